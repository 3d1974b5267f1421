"""Synthetic two-day click logs over a query tree and ring-shaped item/ad clusters.

Queries form a tree; a query's terms are the tokens of its path from the root,
so term overlap links parents, children and siblings. Every leaf owns a ring
of items and ads; sessions click contiguous arcs of the ring, so co-clicks
trace cycles. Day one builds the training graph, day two supplies held-out
edges and per-query click counts.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import asdict, dataclass, field

import numpy as np

from ..graph import HeteroGraph, NodeRecord, build_from_logs
from ..types import EdgeType, NodeType, Relation, relation_for


@dataclass(frozen=True)
class SyntheticSpec:
    branching: int = 3
    depth: int = 4
    category_depth: int = 2
    items_per_cluster: int = 15
    ads_per_cluster: int = 8
    leaf_sessions: int = 12
    internal_sessions: int = 6
    arc_length: tuple[int, int] = (2, 5)
    noise: float = 0.05
    keywords_per_ad: int = 2
    auc_negatives: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.branching < 1 or self.depth < 0 or self.items_per_cluster + self.ads_per_cluster < 2:
            raise ValueError("need branching >= 1, depth >= 0 and at least two nodes per cluster")
        if self.query_count() + self.leaf_count() * (self.items_per_cluster + self.ads_per_cluster) > 10_000:
            raise ValueError("synthetic graphs are capped at 10^4 nodes")

    def leaf_count(self) -> int:
        return self.branching ** self.depth

    def query_count(self) -> int:
        return sum(self.branching ** k for k in range(self.depth + 1))

    def to_json(self) -> dict:
        out = asdict(self)
        out["arc_length"] = list(self.arc_length)
        return out


# roughly 20 nodes; used for overfitting checks
TINY = SyntheticSpec(branching=2, depth=1, items_per_cluster=6, ads_per_cluster=3, leaf_sessions=8,
                     internal_sessions=4)


@dataclass
class EvalSet:
    """Held-out day: labelled pairs for AUC and per-query click-count ground truth."""

    positives: list[tuple[str, str, Relation]] = field(default_factory=list)
    negatives: list[tuple[str, str, Relation]] = field(default_factory=list)
    # (query id, target type) -> [(id, clicks)] sorted by clicks desc, id asc
    truth: dict[tuple[str, NodeType], list[tuple[str, int]]] = field(default_factory=dict)


@dataclass
class SyntheticLogs:
    catalog: dict[str, NodeRecord]
    bids: dict[str, tuple[str, ...]]
    day1: list[dict]
    day2: list[dict]


def _query_tree(spec: SyntheticSpec) -> list[tuple[int, ...]]:
    paths = [()]
    frontier = [()]
    for _ in range(spec.depth):
        frontier = [p + (c,) for p in frontier for c in range(spec.branching)]
        paths.extend(frontier)
    return paths


def _qid(path: tuple[int, ...]) -> str:
    return "q" + "".join(f".{c}" for c in path)


def _category(path: tuple[int, ...], spec: SyntheticSpec) -> str:
    return "c" + "".join(f".{c}" for c in path[: spec.category_depth])


def synthetic_logs(spec: SyntheticSpec) -> SyntheticLogs:
    rng = np.random.default_rng([spec.seed, 7])
    paths = _query_tree(spec)
    leaves = [p for p in paths if len(p) == spec.depth]
    catalog: dict[str, NodeRecord] = {}
    bids: dict[str, tuple[str, ...]] = {}
    rings: dict[tuple[int, ...], list[tuple[str, NodeType]]] = {}
    for li, leaf in enumerate(leaves):
        cat = _category(leaf, spec)
        tag = "".join(f"{c}" for c in leaf) or "0"
        items = [f"i{li}_{j}" for j in range(spec.items_per_cluster)]
        ads = [f"a{li}_{j}" for j in range(spec.ads_per_cluster)]
        for j, iid in enumerate(items):
            catalog[iid] = NodeRecord(iid, NodeType.ITEM, cat, {
                "title": (f"w{tag}", f"w{tag}_{j % 3}"), "brand": (f"b{tag}",), "shop": (f"s{li % 7}",)})
        keywords = [f"k{tag}_{j}" for j in range(max(1, spec.keywords_per_ad + 1))]
        for j, aid in enumerate(ads):
            catalog[aid] = NodeRecord(aid, NodeType.AD, cat, {
                "title": (f"w{tag}",), "brand": (f"b{tag}",), "shop": (f"s{li % 7}",)})
            pick = rng.choice(len(keywords), size=min(spec.keywords_per_ad, len(keywords)), replace=False)
            bids[aid] = tuple(sorted(keywords[i] for i in pick))
        # interleave ads into the item ring at even spacing
        slots = sorted(items + ads, key=lambda n: (int(n.split("_")[1]) / (spec.items_per_cluster if n[0] == "i"
                                                                          else spec.ads_per_cluster), n))
        ring = [(n, NodeType.ITEM if n[0] == "i" else NodeType.AD) for n in slots]
        rings[leaf] = ring

    def day(day_seed: int) -> list[dict]:
        drng = np.random.default_rng([spec.seed, day_seed])
        all_nodes = [n for ring in rings.values() for n in ring]
        sessions = []

        def arc(ring):
            lo, hi = spec.arc_length
            n = int(drng.integers(lo, hi + 1))
            start = int(drng.integers(len(ring)))
            return [ring[(start + s) % len(ring)] for s in range(min(n, len(ring)))]

        for path in paths:
            under = [lf for lf in leaves if lf[: len(path)] == path]
            count = spec.leaf_sessions if len(path) == spec.depth else spec.internal_sessions
            for _ in range(count):
                leaf = under[int(drng.integers(len(under)))]
                clicks = arc(rings[leaf])
                if drng.random() < spec.noise:
                    clicks.append(all_nodes[int(drng.integers(len(all_nodes)))])
                sessions.append({
                    "session_id": f"d{day_seed}s{len(sessions)}",
                    "query": {"id": _qid(path), "terms": [_qid(path[:k]) for k in range(len(path) + 1)],
                              "category": _category(path, spec)},
                    "clicks": [{"id": n, "type": t.value} for n, t in clicks],
                })
        return sessions

    return SyntheticLogs(catalog, bids, day(1), day(2))


def _session_edges(sessions) -> Counter:
    out: Counter = Counter()
    for s in sessions:
        q = s["query"]["id"]
        ids = [c["id"] for c in s["clicks"]]
        for c in ids:
            out[(EdgeType.CLICK, q, c)] += 1
        for a, b in zip(ids, ids[1:]):
            if a != b:
                out[(EdgeType.COCLICK, min(a, b), max(a, b))] += 1
    return out


def build_eval_set(g: HeteroGraph, day2: list[dict], negatives_per_positive: int = 10, seed: int = 0) -> EvalSet:
    """Next-day positives between training nodes, matched negatives and click-count ground truth."""
    rng = np.random.default_rng([seed, 11])
    edges2 = _session_edges(day2)
    known = {n for n in g.nodes}
    adj2: dict[str, set[str]] = {}
    for (_, a, b) in edges2:
        adj2.setdefault(a, set()).add(b)
        adj2.setdefault(b, set()).add(a)
    ev = EvalSet()
    clicks: dict[tuple[str, NodeType], Counter] = {}
    seen = set()
    for (etype, a, b), count in sorted(edges2.items(), key=lambda kv: (kv[0][0].value, kv[0][1], kv[0][2])):
        if a not in known or b not in known:
            continue
        ta, tb = g.node_type(a), g.node_type(b)
        if etype is EdgeType.CLICK:
            key, other = (a, b) if ta is NodeType.QUERY else (b, a)
            clicks.setdefault((key, g.node_type(other)), Counter())[other] += count
        else:
            key, other = a, b
        if (key, other) in seen:
            continue
        seen.add((key, other))
        rel = relation_for(ta, tb)
        ev.positives.append((key, other, rel))
        pool = g.ids_of_type(g.node_type(other))
        banned = adj2.get(key, set()) | {key}
        for et in EdgeType:
            banned |= set(g.neighbors(key, et))
        for _ in range(negatives_per_positive):
            for _try in range(32):
                cand = pool[int(rng.integers(len(pool)))]
                if cand not in banned:
                    ev.negatives.append((key, cand, rel))
                    break
    for key, counter in sorted(clicks.items(), key=lambda kv: (kv[0][0], kv[0][1].value)):
        ev.truth[key] = sorted(counter.items(), key=lambda kv: (-kv[1], kv[0]))
    return ev


def generate_synthetic(spec: SyntheticSpec = SyntheticSpec()) -> tuple[HeteroGraph, EvalSet]:
    logs = synthetic_logs(spec)
    g = build_from_logs(logs.day1, logs.catalog, logs.bids)
    return g, build_eval_set(g, logs.day2, spec.auc_negatives, spec.seed)
