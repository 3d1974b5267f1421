"""Heterogeneous query/item/ad graph built from search behavior logs.

Behavioral edges come from sessions: a click edge from the query to every
clicked node, and a co-click edge between consecutive clicked nodes.
Non-behavioral edges link queries whose term sets overlap enough (semantic)
and ads sharing a bid keyword (co-bid).
"""

from __future__ import annotations

import json
import logging
from collections import defaultdict
from dataclasses import dataclass, field
from functools import cached_property
from itertools import combinations
from pathlib import Path
from typing import Iterable, Iterator, Mapping

from .sampling import AliasTable, build_alias_table
from .types import EDGE_TYPES, NODE_TYPES, EdgeType, NodeType, edge_allowed

log = logging.getLogger(__name__)


class GraphFormatError(ValueError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


@dataclass
class NodeRecord:
    id: str
    type: NodeType
    category: str
    features: dict[str, tuple[str, ...]] = field(default_factory=dict)

    def field_tokens(self, name: str) -> tuple[str, ...]:
        if name == "id":
            return (self.id,)
        if name == "category":
            return (self.category,)
        return self.features.get(name, ())

    def to_json(self) -> dict:
        return {
            "id": self.id,
            "type": self.type.value,
            "category": self.category,
            "features": {k: list(v) for k, v in sorted(self.features.items())},
        }

    @classmethod
    def from_json(cls, obj: Mapping) -> "NodeRecord":
        feats = obj.get("features", {})
        return cls(
            id=str(obj["id"]),
            type=NodeType(obj["type"]),
            category=str(obj["category"]),
            features={k: tuple(sorted(set(map(str, v)))) for k, v in feats.items()},
        )


@dataclass
class BuildReport:
    sessions: int = 0
    rejected: int = 0
    rejected_ids: list[str] = field(default_factory=list)


def jaccard(a: Iterable[str], b: Iterable[str]) -> float:
    a, b = set(a), set(b)
    union = a | b
    if not union:
        return 0.0
    return len(a & b) / len(union)


class HeteroGraph:
    """Immutable typed graph; all four edge types are undirected."""

    def __init__(self, nodes: Mapping[str, NodeRecord], edges: Iterable[tuple[EdgeType, str, str]]):
        self.nodes: dict[str, NodeRecord] = dict(sorted(nodes.items()))
        adj: dict[tuple[EdgeType, str], set[str]] = defaultdict(set)
        for etype, a, b in edges:
            if a == b:
                continue
            if a not in self.nodes or b not in self.nodes:
                raise GraphFormatError(f"edge {etype.value} ({a}, {b}) references an unknown node")
            ta, tb = self.nodes[a].type, self.nodes[b].type
            if not edge_allowed(etype, ta, tb):
                raise GraphFormatError(f"edge {etype.value} not allowed between {ta.value} and {tb.value}")
            adj[(etype, a)].add(b)
            adj[(etype, b)].add(a)
        self.adjacency: dict[tuple[EdgeType, str], tuple[str, ...]] = {
            key: tuple(sorted(v)) for key, v in sorted(adj.items(), key=lambda kv: (kv[0][0].value, kv[0][1]))
        }
        self.report = BuildReport()

    def __len__(self) -> int:
        return len(self.nodes)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, HeteroGraph):
            return NotImplemented
        return self.to_ndjson() == other.to_ndjson()

    def node_type(self, nid: str) -> NodeType:
        return self.nodes[nid].type

    def category(self, nid: str) -> str:
        return self.nodes[nid].category

    def neighbors(self, nid: str, etype: EdgeType) -> tuple[str, ...]:
        return self.adjacency.get((etype, nid), ())

    def edges(self) -> Iterator[tuple[EdgeType, str, str]]:
        """Each undirected edge once, ``src < dst``, in canonical order."""
        out = []
        for (etype, a), nbrs in self.adjacency.items():
            out.extend((etype, a, b) for b in nbrs if a < b)
        out.sort(key=lambda e: (e[0].value, e[1], e[2]))
        return iter(out)

    def num_edges(self) -> int:
        return sum(len(v) for v in self.adjacency.values()) // 2

    @cached_property
    def _by_type(self) -> dict[NodeType, tuple[str, ...]]:
        out: dict[NodeType, list[str]] = {t: [] for t in NODE_TYPES}
        for nid, rec in self.nodes.items():
            out[rec.type].append(nid)
        return {t: tuple(v) for t, v in out.items()}

    def ids_of_type(self, t: NodeType) -> tuple[str, ...]:
        return self._by_type[t]

    @cached_property
    def category_index(self) -> dict[str, dict[NodeType, tuple[str, ...]]]:
        out: dict[str, dict[NodeType, list[str]]] = defaultdict(lambda: defaultdict(list))
        for nid, rec in self.nodes.items():
            out[rec.category][rec.type].append(nid)
        return {c: {t: tuple(v) for t, v in d.items()} for c, d in sorted(out.items())}

    def category_members(self, category: str, t: NodeType) -> tuple[str, ...]:
        return self.category_index.get(category, {}).get(t, ())

    @cached_property
    def _typed_neighbors(self) -> dict[str, dict[NodeType, tuple[str, ...]]]:
        acc: dict[str, dict[NodeType, set[str]]] = defaultdict(lambda: defaultdict(set))
        for (etype, a), nbrs in self.adjacency.items():
            for b in nbrs:
                acc[a][self.nodes[b].type].add(b)
        return {a: {t: tuple(sorted(s)) for t, s in d.items()} for a, d in acc.items()}

    def neighbors_by_type(self, nid: str) -> dict[NodeType, tuple[str, ...]]:
        """Neighbors over all edge types, grouped by node type."""
        return self._typed_neighbors.get(nid, {})

    @cached_property
    def alias_tables(self) -> dict[tuple[NodeType, str | None], AliasTable]:
        """Uniform sampling tables per node type (category None) and per (type, category)."""
        tables: dict[tuple[NodeType, str | None], AliasTable] = {}
        for t in NODE_TYPES:
            ids = self.ids_of_type(t)
            if ids:
                tables[(t, None)] = build_alias_table([1.0] * len(ids))
        for c, per_type in self.category_index.items():
            for t, ids in per_type.items():
                tables[(t, c)] = build_alias_table([1.0] * len(ids))
        return tables

    # serialization

    def to_ndjson(self) -> str:
        lines = [json.dumps({"section": "nodes", "count": len(self.nodes)})]
        lines += [json.dumps(rec.to_json(), sort_keys=True) for rec in self.nodes.values()]
        edges = list(self.edges())
        lines.append(json.dumps({"section": "edges", "count": len(edges)}))
        lines += [json.dumps({"etype": e.value, "src": a, "dst": b}) for e, a, b in edges]
        return "\n".join(lines) + "\n"

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_ndjson())

    @classmethod
    def from_ndjson(cls, lines: Iterable[str]) -> "HeteroGraph":
        nodes: dict[str, NodeRecord] = {}
        edges: list[tuple[EdgeType, str, str]] = []
        section = None
        for lineno, line in enumerate(lines, 1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
                if "section" in obj:
                    section = obj["section"]
                    if section not in ("nodes", "edges"):
                        raise GraphFormatError(f"unknown section {section!r}", lineno)
                elif section == "nodes":
                    rec = NodeRecord.from_json(obj)
                    nodes[rec.id] = rec
                elif section == "edges":
                    edges.append((EdgeType(obj["etype"]), str(obj["src"]), str(obj["dst"])))
                else:
                    raise GraphFormatError("record before any section header", lineno)
            except GraphFormatError:
                raise
            except (ValueError, KeyError, TypeError) as exc:
                raise GraphFormatError(str(exc), lineno) from exc
        return cls(nodes, edges)

    @classmethod
    def load(cls, path: str | Path) -> "HeteroGraph":
        with open(path) as fh:
            return cls.from_ndjson(fh)


def _iter_json_lines(source: Iterable[str] | str | Path, what: str) -> Iterator[tuple[int, dict]]:
    if isinstance(source, (str, Path)):
        with open(source) as fh:
            yield from _iter_json_lines(list(fh), what)
        return
    for lineno, line in enumerate(source, 1):
        if isinstance(line, Mapping):
            yield lineno, dict(line)
            continue
        line = line.strip()
        if not line:
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise GraphFormatError(f"malformed {what} record: {exc.msg}", lineno) from exc
        if not isinstance(obj, dict):
            raise GraphFormatError(f"{what} record must be an object", lineno)
        yield lineno, obj


def read_catalog(source) -> dict[str, NodeRecord]:
    out = {}
    for lineno, obj in _iter_json_lines(source, "catalog"):
        try:
            rec = NodeRecord.from_json(obj)
        except (KeyError, ValueError) as exc:
            raise GraphFormatError(f"bad catalog record: {exc}", lineno) from exc
        out[rec.id] = rec
    return out


def read_bids(source) -> dict[str, tuple[str, ...]]:
    out: dict[str, set[str]] = defaultdict(set)
    for lineno, obj in _iter_json_lines(source, "bids"):
        try:
            out[str(obj["ad_id"])].update(map(str, obj["keywords"]))
        except (KeyError, TypeError) as exc:
            raise GraphFormatError(f"bad bids record: {exc}", lineno) from exc
    return {k: tuple(sorted(v)) for k, v in out.items()}


def build_from_logs(
    logs,
    catalog: Mapping[str, NodeRecord],
    bids: Mapping[str, Iterable[str]] | None = None,
    jaccard_threshold: float = 0.5,
) -> HeteroGraph:
    """Construct the interaction graph.

    ``logs`` yields session records (JSON lines or dicts) of the form
    ``{"session_id", "query": {"id", "terms", "category"}, "clicks": [{"id", "type"}]}``.
    ``catalog`` holds the item and ad records. Sessions that reference a node
    missing from the catalog are rejected and counted in ``graph.report``.
    """
    if not 0 < jaccard_threshold <= 1:
        raise ValueError("jaccard_threshold must lie in (0, 1]")
    bids = {k: tuple(sorted(set(v))) for k, v in (bids or {}).items()}
    nodes: dict[str, NodeRecord] = {}
    for nid, rec in catalog.items():
        if rec.type is NodeType.QUERY:
            continue
        feats = dict(rec.features)
        if rec.type is NodeType.AD and nid in bids and "bid_words" not in feats:
            feats["bid_words"] = bids[nid]
        nodes[nid] = NodeRecord(nid, rec.type, rec.category, feats)

    report = BuildReport()
    edges: set[tuple[EdgeType, str, str]] = set()
    query_terms: dict[str, set[str]] = defaultdict(set)
    query_cat: dict[str, str] = {}

    def add(etype: EdgeType, a: str, b: str) -> None:
        if a != b:
            edges.add((etype, min(a, b), max(a, b)))

    for lineno, obj in _iter_json_lines(logs, "session"):
        try:
            q = obj["query"]
            qid = str(q["id"])
            terms = [str(t) for t in q.get("terms", [])]
            qcat = str(q["category"])
            clicks = [(str(c["id"]), NodeType(c["type"])) for c in obj.get("clicks", [])]
        except (KeyError, TypeError, ValueError) as exc:
            raise GraphFormatError(f"bad session record: {exc}", lineno) from exc
        report.sessions += 1
        unknown = [cid for cid, ctype in clicks if cid not in nodes or nodes[cid].type is not ctype]
        if unknown or any(t is NodeType.QUERY for _, t in clicks):
            report.rejected += 1
            report.rejected_ids.extend(unknown)
            continue
        query_terms[qid].update(terms)
        query_cat.setdefault(qid, qcat)
        for cid, _ in clicks:
            add(EdgeType.CLICK, qid, cid)
        for (a, _), (b, _) in zip(clicks, clicks[1:]):
            add(EdgeType.COCLICK, a, b)

    for qid in sorted(query_terms):
        if qid in nodes:
            raise GraphFormatError(f"query id {qid!r} collides with a catalog id")
        nodes[qid] = NodeRecord(qid, NodeType.QUERY, query_cat[qid], {"terms": tuple(sorted(query_terms[qid]))})

    # candidate pairs share at least one term; threshold > 0 makes that necessary
    by_term: dict[str, list[str]] = defaultdict(list)
    for qid in sorted(query_terms):
        for t in query_terms[qid]:
            by_term[t].append(qid)
    seen: set[tuple[str, str]] = set()
    for qids in by_term.values():
        for a, b in combinations(qids, 2):
            if (a, b) in seen:
                continue
            seen.add((a, b))
            if jaccard(query_terms[a], query_terms[b]) >= jaccard_threshold:
                add(EdgeType.SEMANTIC, a, b)

    by_kw: dict[str, list[str]] = defaultdict(list)
    for aid, kws in sorted(bids.items()):
        if aid in nodes and nodes[aid].type is NodeType.AD:
            for kw in kws:
                by_kw[kw].append(aid)
    for aids in by_kw.values():
        for a, b in combinations(aids, 2):
            add(EdgeType.COBID, a, b)

    if report.rejected:
        log.warning("rejected %d of %d sessions referencing unknown nodes", report.rejected, report.sessions)
    g = HeteroGraph(nodes, sorted(edges, key=lambda e: (e[0].value, e[1], e[2])))
    g.report = report
    return g


def check_edge_rules(g: HeteroGraph) -> list[str]:
    """Return violations of the endpoint, symmetry and self-loop rules (empty when clean)."""
    problems = []
    for (etype, a), nbrs in g.adjacency.items():
        for b in nbrs:
            if a == b:
                problems.append(f"self loop {etype.value} {a}")
            if b not in g.nodes:
                problems.append(f"dangling {etype.value} {a}->{b}")
                continue
            if not edge_allowed(etype, g.node_type(a), g.node_type(b)):
                problems.append(f"bad endpoints {etype.value} {a}-{b}")
            if a not in g.neighbors(b, etype):
                problems.append(f"asymmetric {etype.value} {a}-{b}")
    return problems


__all__ = [
    "BuildReport",
    "EDGE_TYPES",
    "GraphFormatError",
    "HeteroGraph",
    "NodeRecord",
    "build_from_logs",
    "check_edge_rules",
    "jaccard",
    "read_bids",
    "read_catalog",
]
