"""Builders for randomized test inputs shared by several test modules."""

from __future__ import annotations

import numpy as np

from mixcurv.graph import HeteroGraph, NodeRecord
from mixcurv.index import EmbeddingStore
from mixcurv.types import EdgeType as E
from mixcurv.types import NodeType, Relation, relations_of


def _points(rng, n, M, d, kappas):
    out = np.empty((n, M, d))
    for m, k in enumerate(kappas):
        v = rng.normal(size=(n, d))
        v /= np.linalg.norm(v, axis=1, keepdims=True)
        limit = 0.9 / np.sqrt(-k) if k < 0 else 1.0
        out[:, m] = v * rng.uniform(0, limit, size=(n, 1))
    return out


def random_store(counts=(400, 400, 200), M=2, d=8, seed=0, kappas=None, categories=3) -> EmbeddingStore:
    """Store of random in-domain projections and softmax weights.

    ``counts`` gives the number of query, item and ad nodes.
    """
    rng = np.random.default_rng(seed)
    ids = {t: [f"{t.value[0]}{j:05d}" for j in range(n)] for t, n in zip(NodeType, counts)}
    if kappas is None:
        kappas = {r: [float(k) for k in rng.uniform(-2, 2, size=M)] for r in Relation}
    cats = {n: f"c{rng.integers(categories)}" for group in ids.values() for n in group}
    store = EmbeddingStore(M=M, d=d, ids=ids, categories=cats, edge_kappas=kappas)
    for t, group in ids.items():
        if not group:
            continue
        for r in relations_of(t):
            store.proj[(t, r)] = _points(rng, len(group), M, d, kappas[r])
            logits = rng.normal(size=(len(group), M))
            w = np.exp(logits - logits.max(1, keepdims=True))
            store.weights[(t, r)] = w / w.sum(1, keepdims=True)
    return store


def walk_fixture() -> HeteroGraph:
    """Smallest graph on which every reference meta-path walk can be taken."""
    nodes = {n: NodeRecord(n, t, "c") for n, t in [
        ("q1", NodeType.QUERY), ("q2", NodeType.QUERY), ("q3", NodeType.QUERY),
        ("i1", NodeType.ITEM), ("i2", NodeType.ITEM), ("i3", NodeType.ITEM), ("a1", NodeType.AD), ("a2", NodeType.AD)]}
    edges = [(E.SEMANTIC, "q1", "q2"), (E.SEMANTIC, "q2", "q3"), (E.CLICK, "q1", "i1"), (E.CLICK, "q1", "a1"),
             (E.COCLICK, "i1", "i2"), (E.COCLICK, "i2", "i3"), (E.COCLICK, "i1", "a1"), (E.COBID, "a1", "a2")]
    return HeteroGraph(nodes, edges)


# (meta-path, start, expected node sequence, expected positive pairs)
WALK_EXAMPLES = [
    (0, "q1", ("q1", "q2", "q3"), [("q1", "q2"), ("q1", "q3")]),
    (1, "q1", ("q1", "i1", "i2"), [("q1", "i1"), ("q1", "i2")]),
    (2, "q1", ("q1", "a1", "a2"), [("q1", "a1"), ("q1", "a2")]),
    (3, "i1", ("i1", "q1", "q2"), [("i1", "q1"), ("i1", "q2")]),
    (4, "i1", ("i1", "i2", "i3"), [("i1", "i2"), ("i1", "i3")]),
    (5, "i1", ("i1", "a1", "a2"), [("i1", "a1"), ("i1", "a2")]),
]
