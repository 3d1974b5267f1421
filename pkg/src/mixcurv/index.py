"""Exact mixed-curvature nearest neighbors and the six typed inverted indices."""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .model import FeatureIndex, MixedCurvatureModel, fermi_dirac_sim, sample_context, score_distance
from .types import INDEX_TYPES, LAYER1_INDEXES, IndexType, NodeType, Relation, relations_of

DEFAULT_K = {t: (50 if t in LAYER1_INDEXES else 200) for t in INDEX_TYPES}
CHUNK = 64


class IndexFormatError(ValueError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


@dataclass
class EmbeddingStore:
    """Edge-space projections and attention weights for every node, frozen after construction.

    ``proj[(t, r)]`` is (n_t, M, d) and ``weights[(t, r)]`` is (n_t, M), rows in
    the order of ``ids[t]`` (ascending id).
    """

    M: int
    d: int
    ids: dict[NodeType, list[str]]
    categories: dict[str, str]
    edge_kappas: dict[Relation, list[float]]
    proj: dict[tuple[NodeType, Relation], np.ndarray] = field(default_factory=dict)
    weights: dict[tuple[NodeType, Relation], np.ndarray] = field(default_factory=dict)
    radius: float = 1.0
    temperature: float = 5.0

    def __post_init__(self):
        self.row = {t: {n: i for i, n in enumerate(ids)} for t, ids in self.ids.items()}
        self.type_of = {n: t for t, ids in self.ids.items() for n in ids}

    def __len__(self) -> int:
        return len(self.type_of)

    def __contains__(self, nid: str) -> bool:
        return nid in self.type_of

    def vectors(self, nid: str, r: Relation) -> tuple[np.ndarray, np.ndarray]:
        t = self.type_of[nid]
        i = self.row[t][nid]
        return self.proj[(t, r)][i], self.weights[(t, r)][i]

    def save(self, directory) -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        blocks = []
        for (t, r) in sorted(self.proj, key=lambda k: (k[0].value, k[1].value)):
            stem = f"{t.value}_{r.value}"
            for kind, arr in (("proj", self.proj[(t, r)]), ("weights", self.weights[(t, r)])):
                fname = f"{stem}.{kind}.f64"
                np.ascontiguousarray(arr, dtype="<f8").tofile(d / fname)
                blocks.append({"type": t.value, "relation": r.value, "kind": kind, "file": fname,
                               "shape": list(arr.shape)})
        manifest = {
            "M": self.M, "d": self.d, "radius": self.radius, "temperature": self.temperature,
            "ids": {t.value: ids for t, ids in self.ids.items()},
            "categories": self.categories,
            "edge_kappas": {r.value: ks for r, ks in self.edge_kappas.items()},
            "blocks": blocks,
        }
        (d / "manifest.json").write_text(json.dumps(manifest, sort_keys=True))

    @classmethod
    def load(cls, directory) -> "EmbeddingStore":
        d = Path(directory)
        try:
            manifest = json.loads((d / "manifest.json").read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise IndexFormatError(f"unreadable store manifest in {d}: {exc}") from exc
        store = cls(
            M=manifest["M"], d=manifest["d"],
            ids={NodeType(t): list(v) for t, v in manifest["ids"].items()},
            categories=dict(manifest["categories"]),
            edge_kappas={Relation(r): list(v) for r, v in manifest["edge_kappas"].items()},
            radius=manifest["radius"], temperature=manifest["temperature"],
        )
        for b in manifest["blocks"]:
            arr = np.fromfile(d / b["file"], dtype="<f8")
            if arr.size != int(np.prod(b["shape"], dtype=np.int64)):
                raise IndexFormatError(f"{b['file']} holds {arr.size} values, manifest says {b['shape']}")
            key = (NodeType(b["type"]), Relation(b["relation"]))
            getattr(store, b["kind"])[key] = arr.reshape(b["shape"]).astype(np.float64)
        return store


@torch.no_grad()
def precompute_store(model: MixedCurvatureModel, graph, features: FeatureIndex | None = None,
                     context_seed: int = 0, radius: float = 1.0, temperature: float = 5.0) -> EmbeddingStore:
    """Encode every node once and cache its projections and weights for each relation it takes part in."""
    c = model.config
    ids = {t: sorted(graph.ids_of_type(t)) for t in NodeType}
    store = EmbeddingStore(
        M=c.M, d=c.d, ids=ids, categories={n: graph.category(n) for n in graph.nodes},
        edge_kappas={r: [float(k) for k in model.edge_kappas(r)] for r in Relation},
        radius=radius, temperature=temperature,
    )
    if len(graph) == 0:
        return store
    features = features or FeatureIndex(graph.nodes.values(), c.buckets)
    ctx = sample_context(graph, graph.nodes, c.fanout, c.L, np.random.default_rng(context_seed))
    emb = model.encode(ctx, features)
    for t in NodeType:
        if not ids[t]:
            continue
        x = emb[torch.tensor([ctx.target_pos[n] for n in ids[t]])]
        for r in relations_of(t):
            p = model.project(x, t, r)
            store.proj[(t, r)] = p.numpy().copy()
            store.weights[(t, r)] = model.attention(p, t).numpy().copy()
    return store


@dataclass
class InvertedIndex:
    type: IndexType
    K: int
    entries: dict[str, list[tuple[str, float]]] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.entries)

    def get(self, key: str) -> list[tuple[str, float]]:
        return self.entries.get(key, [])


def _knn_block(store: EmbeddingStore, keys: list[str], itype: IndexType, K: int,
               same_category: bool) -> list[list[tuple[str, float, float]]]:
    r = itype.relation
    kt, ct = itype.key_type, itype.candidate_type
    cand_ids = store.ids[ct]
    if not cand_ids:
        return [[] for _ in keys]
    cp = torch.from_numpy(store.proj[(ct, r)])
    cw = torch.from_numpy(store.weights[(ct, r)])
    rows = [store.row[kt][k] for k in keys]
    kp = torch.from_numpy(store.proj[(kt, r)][rows])
    kw = torch.from_numpy(store.weights[(kt, r)][rows])
    kappas = store.edge_kappas[r]
    with torch.no_grad():
        dist = score_distance(kp[:, None], cp[None], kw[:, None], cw[None], kappas).numpy()
    out = []
    for i, key in enumerate(keys):
        d = dist[i].copy()
        if kt is ct:
            d[store.row[ct][key]] = np.inf
        if same_category:
            cat = store.categories[key]
            d[[store.categories[c] != cat for c in cand_ids]] = np.inf
        order = np.argsort(d, kind="stable")
        keep = [j for j in order[:K] if np.isfinite(d[j])]
        sims = fermi_dirac_sim(torch.from_numpy(d[keep]), store.radius, store.temperature).numpy()
        out.append([(cand_ids[j], float(s), float(d[j])) for j, s in zip(keep, sims)])
    return out


def knn_exact(store: EmbeddingStore, key: str, itype: IndexType, K: int, same_category: bool = False,
              with_distance: bool = False) -> list:
    """Exact top-K candidates for ``key`` by ascending attention-weighted distance.

    Scores are Fermi-Dirac similarities; ties go to the smaller candidate id.
    With ``with_distance`` each entry is ``(id, score, distance)``.
    """
    if store.type_of.get(key) is not itype.key_type:
        raise KeyError(f"{key!r} is not a {itype.key_type.value} node in the store")
    if K < 1:
        raise ValueError("K must be >= 1")
    res = _knn_block(store, [key], itype, K, same_category)[0]
    return res if with_distance else [(n, s) for n, s, _ in res]


def build_index(store: EmbeddingStore, itype: IndexType, K: int | None = None, workers: int = 1,
                same_category: bool = False) -> InvertedIndex:
    """Top-K entry for every key of the key type, computed over fixed chunks of keys.

    Chunk boundaries do not depend on ``workers``, so output is identical for any worker count.
    """
    K = DEFAULT_K[itype] if K is None else K
    keys = store.ids[itype.key_type]
    chunks = [keys[i:i + CHUNK] for i in range(0, len(keys), CHUNK)]

    def run(chunk):
        return _knn_block(store, chunk, itype, K, same_category)

    if workers > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run, chunks))
    else:
        results = [run(ch) for ch in chunks]
    idx = InvertedIndex(itype, K)
    for chunk, res in zip(chunks, results):
        for key, entry in zip(chunk, res):
            idx.entries[key] = [(n, s) for n, s, _ in entry]
    return idx


def build_all_indices(store: EmbeddingStore, K: dict[IndexType, int] | None = None,
                      workers: int = 1) -> dict[IndexType, InvertedIndex]:
    K = {**DEFAULT_K, **(K or {})}
    return {t: build_index(store, t, K[t], workers) for t in INDEX_TYPES}


def index_lines(idx: InvertedIndex) -> list[str]:
    lines = [json.dumps({"type": idx.type.value, "K": idx.K, "count": len(idx.entries)})]
    for key in sorted(idx.entries):
        lines.append(json.dumps({"key": key, "nbrs": [[n, s] for n, s in idx.entries[key]]}))
    return lines


def save_index(idx: InvertedIndex, path) -> None:
    Path(path).write_text("\n".join(index_lines(idx)) + "\n")


def load_index(path) -> InvertedIndex:
    with open(path) as fh:
        lines = [ln for ln in fh]
    if not lines or not lines[0].strip():
        raise IndexFormatError("missing header", 1)
    try:
        head = json.loads(lines[0])
        idx = InvertedIndex(IndexType(head["type"]), int(head["K"]))
        count = int(head["count"])
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise IndexFormatError(f"bad header: {exc}", 1) from exc
    for lineno, line in enumerate(lines[1:], 2):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
            idx.entries[str(obj["key"])] = [(str(n), float(s)) for n, s in obj["nbrs"]]
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise IndexFormatError(f"bad entry: {exc}", lineno) from exc
    if len(idx.entries) != count:
        raise IndexFormatError(f"header announces {count} entries, found {len(idx.entries)}")
    return idx


def save_indices(indices: dict[IndexType, InvertedIndex], directory) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    for t, idx in indices.items():
        save_index(idx, d / f"{t.value}.ndjson")


def load_indices(directory) -> dict[IndexType, InvertedIndex]:
    d = Path(directory)
    return {t: load_index(d / f"{t.value}.ndjson") for t in INDEX_TYPES if (d / f"{t.value}.ndjson").exists()}
