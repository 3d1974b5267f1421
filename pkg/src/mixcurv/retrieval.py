"""Two-layer ad retrieval over the inverted indices, plus a line-protocol server."""

from __future__ import annotations

import json
import logging
import socketserver
import threading
import time
from dataclasses import dataclass, field

from .index import InvertedIndex
from .types import IndexType, NodeType

log = logging.getLogger(__name__)


class RequestError(ValueError):
    pass


@dataclass(frozen=True)
class Request:
    query_id: str
    preclick: tuple[str, ...] = ()
    k: int = 20

    def __post_init__(self):
        if not isinstance(self.k, int) or isinstance(self.k, bool) or self.k < 1:
            raise RequestError(f"k must be an integer >= 1, got {self.k!r}")

    @classmethod
    def from_json(cls, obj) -> "Request":
        if not isinstance(obj, dict) or "query_id" not in obj:
            raise RequestError("request needs a query_id")
        pre = obj.get("preclick", [])
        if not isinstance(pre, list):
            raise RequestError("preclick must be a list")
        return cls(str(obj["query_id"]), tuple(map(str, pre)), obj.get("k", 20))


@dataclass(frozen=True)
class Key:
    id: str
    type: NodeType
    score: float


@dataclass
class Candidate:
    ad_id: str
    score: float
    # each path: (hop chain of (index name, node id), hop scores)
    provenance: list[tuple[tuple[tuple[str, str], ...], tuple[float, ...]]] = field(default_factory=list)

    def to_json(self, verbose: bool = False) -> dict:
        out = {"id": self.ad_id, "score": self.score}
        if verbose:
            out["provenance"] = [{"path": [list(h) for h in chain], "scores": list(s)} for chain, s in self.provenance]
        return out


@dataclass(frozen=True)
class RetrievalConfig:
    layer1_budget: dict[IndexType, int] = field(default_factory=lambda: {
        IndexType.Q2Q: 10, IndexType.Q2I: 10, IndexType.I2Q: 5, IndexType.I2I: 5})
    layer2_budget: int = 50
    k: int = 20
    combine: str = "product"

    def __post_init__(self):
        if any(v < 1 for v in self.layer1_budget.values()) or self.layer2_budget < 1 or self.k < 1:
            raise ValueError("budgets and k must be >= 1")
        if self.combine not in ("product", "sum"):
            raise ValueError("combine must be 'product' or 'sum'")


def _lookup(indices, itype: IndexType, key: str) -> list[tuple[str, float]]:
    idx: InvertedIndex | None = indices.get(itype)
    return idx.get(key) if idx is not None else []


def known_ids(indices) -> set[str]:
    out = set()
    for idx in indices.values():
        out.update(idx.entries)
        for entry in idx.entries.values():
            out.update(n for n, _ in entry)
    return out


def expand_layer1(req: Request, indices, cfg: RetrievalConfig = RetrievalConfig()) -> dict[str, Key]:
    """Request ids themselves (score 1) plus their layer-1 neighbors, max-merged by id."""
    keys: dict[str, Key] = {}

    def put(nid, t, score):
        if nid not in keys or score > keys[nid].score:
            keys[nid] = Key(nid, t, score)

    put(req.query_id, NodeType.QUERY, 1.0)
    for p in req.preclick:
        put(p, NodeType.ITEM, 1.0)
    expansions = [(req.query_id, IndexType.Q2Q), (req.query_id, IndexType.Q2I)]
    expansions += [(p, it) for p in req.preclick for it in (IndexType.I2Q, IndexType.I2I)]
    for src, itype in expansions:
        budget = cfg.layer1_budget.get(itype, 0)
        for nid, score in _lookup(indices, itype, src)[:budget]:
            put(nid, itype.candidate_type, score)
    return keys


def _expansion_paths(req: Request, indices, cfg: RetrievalConfig) -> dict[str, list[tuple[tuple, tuple]]]:
    """For provenance: every (chain, scores) that reaches each layer-1 key."""
    paths: dict[str, list[tuple[tuple, tuple]]] = {req.query_id: [((("request", req.query_id),), (1.0,))]}
    for p in req.preclick:
        paths.setdefault(p, []).append(((("request", p),), (1.0,)))
    expansions = [(req.query_id, IndexType.Q2Q), (req.query_id, IndexType.Q2I)]
    expansions += [(p, it) for p in req.preclick for it in (IndexType.I2Q, IndexType.I2I)]
    for src, itype in expansions:
        for nid, score in _lookup(indices, itype, src)[:cfg.layer1_budget.get(itype, 0)]:
            paths.setdefault(nid, []).append(((("request", src), (itype.value, nid)), (1.0, score)))
    return paths


def retrieve_layer2(keys: dict[str, Key], indices, cfg: RetrievalConfig = RetrievalConfig(),
                    key_paths: dict[str, list] | None = None) -> list[Candidate]:
    """Ads reachable from the keys through Q2A/I2A; score combines path and hop scores, max over paths."""
    out: dict[str, Candidate] = {}
    for kid in sorted(keys):
        key = keys[kid]
        itype = IndexType.Q2A if key.type is NodeType.QUERY else IndexType.I2A
        for ad, hop in _lookup(indices, itype, kid)[:cfg.layer2_budget]:
            score = key.score * hop if cfg.combine == "product" else key.score + hop
            cand = out.get(ad)
            if cand is None:
                cand = out[ad] = Candidate(ad, score)
            else:
                cand.score = max(cand.score, score)
            base = (key_paths or {}).get(kid) or [(((("key", kid),)), (key.score,))]
            for chain, scores in base:
                cand.provenance.append((chain + ((itype.value, ad),), scores + (hop,)))
    return list(out.values())


def retrieve(req: Request, indices, cfg: RetrievalConfig = RetrievalConfig()) -> list[Candidate]:
    keys = expand_layer1(req, indices, cfg)
    cands = retrieve_layer2(keys, indices, cfg, _expansion_paths(req, indices, cfg))
    cands.sort(key=lambda c: (-c.score, c.ad_id))
    return cands[:req.k]


def unresolved(req: Request, known: set[str]) -> list[str]:
    return [f"unknown id {n!r} skipped" for n in (req.query_id, *req.preclick) if n not in known]


def handle_line(line: str, indices, cfg: RetrievalConfig, known: set[str], verbose: bool = False) -> dict:
    """One protocol exchange: request line in, response object out. Never raises on bad input."""
    t0 = time.perf_counter_ns()
    try:
        obj = json.loads(line)
    except json.JSONDecodeError as exc:
        return {"error": "parse", "message": exc.msg}
    try:
        req = Request.from_json(obj)
    except RequestError as exc:
        return {"error": "request", "message": str(exc)}
    ads = retrieve(req, indices, cfg)
    return {
        "ads": [c.to_json(verbose) for c in ads],
        "warnings": unresolved(req, known),
        "latency_us": (time.perf_counter_ns() - t0) // 1000,
    }


class _Handler(socketserver.StreamRequestHandler):
    def handle(self):
        srv: RetrievalServer = self.server
        for raw in self.rfile:
            line = raw.decode("utf-8", errors="replace").strip()
            if not line:
                continue
            resp = handle_line(line, srv.indices, srv.cfg, srv.known)
            if "latency_us" in resp:
                srv.record(resp["latency_us"])
            self.wfile.write((json.dumps(resp) + "\n").encode())


class RetrievalServer(socketserver.ThreadingTCPServer):
    """Newline-delimited JSON over TCP; each connection may send many requests."""

    daemon_threads = True
    allow_reuse_address = True

    def __init__(self, address, indices, cfg: RetrievalConfig = RetrievalConfig()):
        self.indices = indices
        self.cfg = cfg
        self.known = known_ids(indices)
        self._lock = threading.Lock()
        self.latencies: list[int] = []
        super().__init__(address, _Handler)

    def record(self, us: int) -> None:
        with self._lock:
            self.latencies.append(us)


def serve(indices, host: str = "127.0.0.1", port: int = 0, cfg: RetrievalConfig = RetrievalConfig(),
          background: bool = False) -> RetrievalServer:
    """Bind and serve. With ``background`` the loop runs in a daemon thread and the server is returned."""
    try:
        server = RetrievalServer((host, port), indices, cfg)
    except OSError as exc:
        raise RuntimeError(f"cannot bind {host}:{port}: {exc}") from exc
    log.info("serving on %s:%d", *server.server_address[:2])
    if background:
        threading.Thread(target=server.serve_forever, daemon=True).start()
    else:
        try:
            server.serve_forever()
        finally:
            server.server_close()
    return server
