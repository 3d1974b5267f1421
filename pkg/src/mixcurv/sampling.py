"""Meta-path walks, positive pair extraction and negative sampling."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import TYPE_CHECKING, Iterable, Sequence

import numpy as np

from .types import EdgeType, NodeType, Relation, edge_allowed, relation_for

if TYPE_CHECKING:
    from .graph import HeteroGraph


@dataclass(frozen=True)
class AliasTable:
    prob: np.ndarray
    alias: np.ndarray

    def __len__(self) -> int:
        return len(self.prob)


def build_alias_table(weights: Sequence[float]) -> AliasTable:
    """Walker's alias method: O(n) build, O(1) draws."""
    w = np.asarray(weights, dtype=np.float64)
    if w.ndim != 1 or len(w) == 0 or (w < 0).any() or not np.isfinite(w).all():
        raise ValueError("weights must be a non-empty list of finite nonnegative numbers")
    total = w.sum()
    if total <= 0:
        raise ValueError("at least one weight must be positive")
    n = len(w)
    scaled = w * n / total
    prob = np.zeros(n)
    alias = np.zeros(n, dtype=np.int64)
    small = [i for i in range(n) if scaled[i] < 1.0]
    large = [i for i in range(n) if scaled[i] >= 1.0]
    while small and large:
        s, l = small.pop(), large.pop()
        prob[s] = scaled[s]
        alias[s] = l
        scaled[l] = scaled[l] + scaled[s] - 1.0
        (small if scaled[l] < 1.0 else large).append(l)
    for i in large + small:
        prob[i] = 1.0
        alias[i] = i
    return AliasTable(prob, alias)


def alias_sample(table: AliasTable, rng: np.random.Generator, size: int | None = None):
    n = len(table)
    if size is None:
        i = int(rng.integers(n))
        return i if rng.random() < table.prob[i] else int(table.alias[i])
    i = rng.integers(n, size=size)
    coin = rng.random(size)
    return np.where(coin < table.prob[i], i, table.alias[i])


@dataclass(frozen=True)
class MetaPath:
    """Start node type followed by (edge type, node type) hops."""

    start: NodeType
    steps: tuple[tuple[EdgeType, NodeType], ...]

    def __post_init__(self):
        prev = self.start
        for etype, t in self.steps:
            if not edge_allowed(etype, prev, t):
                raise ValueError(f"{etype.value} cannot connect {prev.value} to {t.value}")
            prev = t

    def __len__(self) -> int:
        return len(self.steps)

    @property
    def name(self) -> str:
        parts = [self.start.letter]
        for e, t in self.steps:
            parts.append(f"-{e.value}->{t.letter}")
        return "".join(parts)


Q, I, A = NodeType.QUERY, NodeType.ITEM, NodeType.AD

# the six training meta-paths; query-query hops go over semantic edges
DEFAULT_METAPATHS: tuple[MetaPath, ...] = (
    MetaPath(Q, ((EdgeType.SEMANTIC, Q), (EdgeType.SEMANTIC, Q))),
    MetaPath(Q, ((EdgeType.CLICK, I), (EdgeType.COCLICK, I))),
    MetaPath(Q, ((EdgeType.CLICK, A), (EdgeType.COBID, A))),
    MetaPath(I, ((EdgeType.CLICK, Q), (EdgeType.SEMANTIC, Q))),
    MetaPath(I, ((EdgeType.COCLICK, I), (EdgeType.COCLICK, I))),
    MetaPath(I, ((EdgeType.COCLICK, A), (EdgeType.COBID, A))),
)


def metapath_walk(g: "HeteroGraph", path: MetaPath, start: str, rng: np.random.Generator) -> list[str]:
    """Uniform random walk along ``path``; stops early at a dead end."""
    if g.node_type(start) is not path.start:
        raise ValueError(f"walk start {start!r} is a {g.node_type(start).value}, path needs {path.start.value}")
    seq = [start]
    cur = start
    for etype, t in path.steps:
        nbrs = [n for n in g.neighbors(cur, etype) if g.node_type(n) is t]
        if not nbrs:
            break
        cur = nbrs[int(rng.integers(len(nbrs)))]
        seq.append(cur)
    return seq


def extract_pairs(seq: Sequence[str], g: "HeteroGraph | None" = None) -> list[tuple[str, str]]:
    """Head-anchored pairs ``(seq[0], seq[j])``.

    With a graph, pairs whose endpoints differ in category are dropped; pairs
    that revisit the head are always dropped.
    """
    if len(seq) < 2:
        return []
    head = seq[0]
    out = []
    for other in seq[1:]:
        if other == head:
            continue
        if g is not None and g.category(head) != g.category(other):
            continue
        out.append((head, other))
    return out


def split_negatives(k: int) -> tuple[int, int]:
    """Easy/hard counts for a 2:1 ratio, easy = ceil(2k/3)."""
    if k < 1:
        raise ValueError("K must be >= 1")
    easy = math.ceil(2 * k / 3)
    return easy, k - easy


@dataclass(frozen=True)
class TrainingSample:
    src: str
    pos: str
    negs: tuple[str, ...]
    relation: Relation


def _draw_easy(g, t, category, exclude, rng, tries=64):
    ids = g.ids_of_type(t)
    table = g.alias_tables[(t, None)]
    for _ in range(tries):
        cand = ids[alias_sample(table, rng)]
        if g.category(cand) != category and cand not in exclude:
            return cand
    pool = [n for n in ids if g.category(n) != category and n not in exclude]
    if not pool:
        # single-category population: any node of the type will do
        pool = [n for n in ids if n not in exclude] or list(ids)
    return pool[int(rng.integers(len(pool)))]


def sample_negatives(
    g: "HeteroGraph",
    pos: str,
    k: int,
    rng: np.random.Generator,
    ratio: tuple[int, int] = (2, 1),
    exclude: Iterable[str] = (),
    return_kinds: bool = False,
):
    """Draw ``k`` negatives of the positive's node type.

    Hard negatives share the positive's category, easy ones come from other
    categories. When the category bucket holds fewer than ``k`` candidates the
    hard slots are filled with easy draws instead.
    """
    if ratio != (2, 1):
        easy_n = math.ceil(k * ratio[0] / sum(ratio))
        hard_n = k - easy_n
    else:
        easy_n, hard_n = split_negatives(k)
    t = g.node_type(pos)
    if not g.ids_of_type(t):
        raise ValueError(f"graph has no {t.value} nodes")
    category = g.category(pos)
    excl = set(exclude) | {pos}
    bucket = [n for n in g.category_members(category, t) if n not in excl]
    if len(bucket) < k:
        easy_n, hard_n = k, 0
    out, kinds = [], []
    table = g.alias_tables.get((t, category))
    members = g.category_members(category, t)
    for _ in range(hard_n):
        while True:
            cand = members[alias_sample(table, rng)]
            if cand not in excl:
                break
        out.append(cand)
        kinds.append("hard")
    for _ in range(easy_n):
        out.append(_draw_easy(g, t, category, excl, rng))
        kinds.append("easy")
    if return_kinds:
        return out, kinds
    return out


def generate_pairs(
    g: "HeteroGraph",
    rng: np.random.Generator,
    walks_per_node: int = 2,
    metapaths: Sequence[MetaPath] = DEFAULT_METAPATHS,
) -> list[tuple[str, str]]:
    """Positive pair pool from meta-path walks started at every eligible node."""
    pairs: list[tuple[str, str]] = []
    for path in metapaths:
        for start in g.ids_of_type(path.start):
            for _ in range(walks_per_node):
                pairs.extend(extract_pairs(metapath_walk(g, path, start, rng), g))
    return pairs


def make_sample(
    g: "HeteroGraph",
    pair: tuple[str, str],
    k: int,
    rng: np.random.Generator,
    exclude: Iterable[str] = (),
) -> TrainingSample:
    src, pos = pair
    negs = sample_negatives(g, pos, k, rng, exclude=set(exclude) | {src})
    return TrainingSample(src, pos, tuple(negs), relation_for(g.node_type(src), g.node_type(pos)))
