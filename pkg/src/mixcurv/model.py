"""Node encoder and edge scorer in a product of learned-curvature spaces.

The encoder turns hashed node features into M subspace points, runs L rounds
of typed graph convolution through the tangent space at the origin, and
mixes the subspaces once at the end. The scorer projects each subspace into
a relation-specific curvature, weighs subspaces by per-node attention and
sums the weighted geodesic distances.
"""

from __future__ import annotations

import math
import zlib
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from . import geometry as geo
from .geometry import DTYPE
from .types import FEATURE_FIELDS, NODE_TYPES, RELATIONS, NodeType, Relation

T_INDEX = {t: i for i, t in enumerate(NODE_TYPES)}
R_INDEX = {r: i for i, r in enumerate(RELATIONS)}

Activation = Callable[[torch.Tensor], torch.Tensor]
ACTIVATIONS: dict[str, Activation | None] = {"relu": torch.relu, "identity": None}


def default_curvatures(m: int) -> tuple[float, ...]:
    """Alternate hyperbolic/spherical starting points: -1, +1, -1, ..."""
    return tuple(-1.0 if i % 2 == 0 else 1.0 for i in range(m))


@dataclass(frozen=True)
class ModelConfig:
    M: int = 2
    d: int = 8
    L: int = 1
    fanout: int = 5
    buckets: int = 2**18
    node_curvature_init: tuple[float, ...] | None = None
    edge_curvature_init: tuple[float, ...] | None = None
    trainable_curvature: bool = True
    nonlinearity: str = "relu"
    fusion: bool = True
    attention: bool = True
    shared_edge_curvature: bool = False
    init_scale: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.M < 1 or self.d < 2 or self.L < 0 or self.fanout < 1 or self.buckets < 1:
            raise ValueError("need M >= 1, d >= 2, L >= 0, fanout >= 1, buckets >= 1")
        if self.nonlinearity not in ACTIVATIONS:
            raise ValueError(f"unknown nonlinearity {self.nonlinearity!r}")
        for name in ("node_curvature_init", "edge_curvature_init"):
            val = getattr(self, name)
            if val is not None:
                val = tuple(float(v) for v in val)
                object.__setattr__(self, name, val)
                if len(val) != self.M or not all(math.isfinite(v) for v in val):
                    raise ValueError(f"{name} needs {self.M} finite values")

    @property
    def node_kappas(self) -> tuple[float, ...]:
        return self.node_curvature_init or default_curvatures(self.M)

    @property
    def edge_kappas(self) -> tuple[float, ...]:
        return self.edge_curvature_init or self.node_kappas

    def to_json(self) -> dict:
        out = asdict(self)
        for k in ("node_curvature_init", "edge_curvature_init"):
            if out[k] is not None:
                out[k] = list(out[k])
        return out

    @classmethod
    def from_json(cls, obj: Mapping) -> "ModelConfig":
        obj = dict(obj)
        for k in ("node_curvature_init", "edge_curvature_init"):
            if obj.get(k) is not None:
                obj[k] = tuple(obj[k])
        return cls(**obj)


# total dimension 120 with two subspaces
FULL_SCALE_MODEL = ModelConfig(M=2, d=60)


def euclidean(config: ModelConfig) -> ModelConfig:
    """Same architecture with every curvature pinned at zero."""
    zeros = (0.0,) * config.M
    return replace(config, node_curvature_init=zeros, edge_curvature_init=zeros, trainable_curvature=False)


def slot_layout(n_fields: int, d: int) -> tuple[list[int], list[tuple[int, int]]]:
    """Assign feature fields to column ranges of a d-vector.

    Fields are concatenated when there are at most ``d`` of them; otherwise
    field j shares slot ``j % d`` with the others mapped there (summed).
    """
    slots = min(n_fields, d)
    base, extra = divmod(d, slots)
    ranges, start = [], 0
    for s in range(slots):
        width = base + (1 if s < extra else 0)
        ranges.append((start, start + width))
        start += width
    return [j % slots for j in range(n_fields)], ranges


def hash_token(field_name: str, token: str, buckets: int) -> int:
    return zlib.crc32(f"{field_name}\x1f{token}".encode()) % buckets


class FeatureIndex:
    """Hashed bucket ids for every node's feature fields, laid out per type."""

    def __init__(self, records: Iterable, buckets: int):
        self.buckets = buckets
        self.local: dict[str, tuple[NodeType, int]] = {}
        per_type: dict[NodeType, list] = {t: [] for t in NODE_TYPES}
        for rec in records:
            self.local[rec.id] = (rec.type, len(per_type[rec.type]))
            per_type[rec.type].append(rec)
        self.ptr: dict[tuple[NodeType, int], np.ndarray] = {}
        self.idx: dict[tuple[NodeType, int], np.ndarray] = {}
        for t, recs in per_type.items():
            for j, fname in enumerate(FEATURE_FIELDS[t]):
                lens, flat = [0], []
                for rec in recs:
                    toks = rec.field_tokens(fname)
                    flat.extend(hash_token(fname, tok, buckets) for tok in toks)
                    lens.append(len(toks))
                self.ptr[(t, j)] = np.cumsum(lens, dtype=np.int64)
                self.idx[(t, j)] = np.asarray(flat, dtype=np.int64)

    def __contains__(self, nid: str) -> bool:
        return nid in self.local

    def bags(self, t: NodeType, ids: Sequence[str]) -> list[tuple[torch.Tensor, torch.Tensor]]:
        """Per field: (flat bucket ids, bag offsets) for ``ids`` (all of type t)."""
        rows = np.fromiter((self.local[i][1] for i in ids), dtype=np.int64, count=len(ids))
        out = []
        for j in range(len(FEATURE_FIELDS[t])):
            ptr, idx = self.ptr[(t, j)], self.idx[(t, j)]
            starts, ends = ptr[rows], ptr[rows + 1]
            lens = ends - starts
            offsets = np.concatenate([[0], np.cumsum(lens)[:-1]]).astype(np.int64)
            flat = idx[np.repeat(starts - offsets, lens) + np.arange(lens.sum())] if lens.sum() else idx[:0]
            out.append((torch.from_numpy(flat), torch.from_numpy(offsets)))
        return out

    def rows_touched(self, t: NodeType, ids: Sequence[str]) -> np.ndarray:
        parts = [flat.numpy() for flat, _ in self.bags(t, ids)]
        return np.unique(np.concatenate(parts)) if parts else np.zeros(0, dtype=np.int64)


# ---------------------------------------------------------------------------
# single-op building blocks


def embed_features(field_vectors: Sequence[torch.Tensor], slots: Sequence[int],
                   ranges: Sequence[tuple[int, int]], kappa) -> torch.Tensor:
    """Concatenate pooled field vectors (each already d-wide, masked by slot) and map to the manifold.

    ``field_vectors[j]`` is the mean-pooled lookup of field j with shape (..., d);
    only the columns of its slot are kept.
    """
    d = field_vectors[0].shape[-1]
    out = torch.zeros_like(field_vectors[0])
    for vec, s in zip(field_vectors, slots):
        mask = torch.zeros(d, dtype=DTYPE)
        mask[ranges[s][0]:ranges[s][1]] = 1.0
        out = out + vec * mask
    return geo.exp_map0(out, kappa, strict=False)


def gcn_aggregate(self_state: torch.Tensor, neighbor_states: Sequence[torch.Tensor | None],
                  self_kappa, neighbor_kappas: Sequence) -> torch.Tensor:
    """Tangent-space mean of each neighbor type's states, concatenated with the node's own log.

    Empty neighbor groups contribute a zero block. Output width is (|T|+1)*d.
    """
    d = self_state.shape[-1]
    blocks = []
    for states, k in zip(neighbor_states, neighbor_kappas):
        if states is None or len(states) == 0:
            blocks.append(torch.zeros(d, dtype=DTYPE))
        else:
            blocks.append(geo.log_map0(states, k, strict=False).mean(0))
    blocks.append(geo.log_map0(self_state, self_kappa, strict=False))
    return torch.cat(blocks, -1)


def gcn_update(agg: torch.Tensor, weight: torch.Tensor, kappa, act: Activation | None = torch.relu) -> torch.Tensor:
    if weight.shape[1] != agg.shape[-1]:
        raise ValueError(f"gcn weight {tuple(weight.shape)} does not match aggregate width {agg.shape[-1]}")
    h = geo.exp_map0(agg, kappa, strict=False)
    h = geo.mobius_matvec(weight, h, kappa, strict=False)
    return geo.kappa_activation(h, kappa, kappa, act, strict=False)


def space_fusion(parts: torch.Tensor, kappas: Sequence, weights: Sequence[torch.Tensor]) -> torch.Tensor:
    """Mix M subspaces: average their origin logs, then per subspace combine with its own log.

    ``parts`` has shape (..., M, d); ``weights[m]`` is (d, 2d).
    """
    m_count = parts.shape[-2]
    logs = [geo.log_map0(parts[..., m, :], kappas[m], strict=False) for m in range(m_count)]
    pooled = torch.stack(logs, -2).mean(-2)
    out = []
    for m in range(m_count):
        if weights[m].shape != (parts.shape[-1], 2 * parts.shape[-1]):
            raise ValueError(f"fusion weight {m} has shape {tuple(weights[m].shape)}")
        mixed = torch.cat([pooled, logs[m]], -1) @ weights[m].T
        out.append(geo.exp_map0(mixed, kappas[m], strict=False))
    return torch.stack(out, -2)


def edge_project(part: torch.Tensor, weight: torch.Tensor, node_kappa, edge_kappa,
                 act: Activation | None = torch.relu) -> torch.Tensor:
    h = geo.mobius_matvec(weight, part, node_kappa, strict=False)
    return geo.kappa_activation(h, node_kappa, edge_kappa, act, strict=False)


def attention_weights(projected: torch.Tensor, weight: torch.Tensor | None) -> torch.Tensor:
    """Softmax over subspaces of ``W [p_1 || ... || p_M]``; uniform when ``weight`` is None."""
    m_count = projected.shape[-2]
    if weight is None:
        return torch.full(projected.shape[:-1], 1.0 / m_count, dtype=DTYPE)
    flat = projected.reshape(*projected.shape[:-2], -1)
    if weight.shape != (m_count, flat.shape[-1]):
        raise ValueError(f"attention weight {tuple(weight.shape)} does not match {m_count}x{flat.shape[-1]}")
    return torch.softmax(flat @ weight.T, -1)


def subspace_distances(px: torch.Tensor, py: torch.Tensor, kappas: Sequence) -> torch.Tensor:
    """Per-subspace geodesic distances, shape (..., M)."""
    return torch.stack(
        [geo.geodesic_distance(px[..., m, :], py[..., m, :], kappas[m], strict=False) for m in range(px.shape[-2])],
        -1,
    )


def score_distance(px, py, wx, wy, kappas) -> torch.Tensor:
    """Attention-weighted product distance; pair weights are w'(x) + w'(y)."""
    return ((wx + wy) * subspace_distances(px, py, kappas)).sum(-1)


def fermi_dirac_sim(dist, radius: float = 1.0, temperature: float = 5.0):
    """``sigmoid(t (r - dist))``."""
    if isinstance(dist, torch.Tensor):
        return torch.sigmoid(temperature * (radius - dist))
    return 1.0 / (1.0 + math.exp(-temperature * (radius - dist)))


# ---------------------------------------------------------------------------
# neighborhood sampling


@dataclass
class ConvLayer:
    rows: np.ndarray          # rows of the node table computing this layer (sorted)
    self_pos: np.ndarray      # position of each row within the previous layer
    nbr_dst: list[torch.Tensor]  # per neighbor type: position in this layer
    nbr_src: list[torch.Tensor]  # per neighbor type: position in the previous layer
    counts: list[torch.Tensor]


@dataclass
class NodeContext:
    """Sampled, depth-limited neighborhoods for a set of target nodes."""

    nodes: list[str]
    types: np.ndarray
    layers: list[ConvLayer]
    target_pos: dict[str, int] = field(default_factory=dict)
    neighbors: dict[str, dict[NodeType, tuple[str, ...]]] = field(default_factory=dict)

    def final_rows(self) -> np.ndarray:
        return self.layers[-1].rows if self.layers else np.arange(len(self.nodes))


def sample_context(graph, ids: Iterable[str], fanout: int, depth: int, rng: np.random.Generator) -> NodeContext:
    """Sample up to ``fanout`` neighbors per node type, ``depth`` hops out."""
    level: dict[str, int] = {}
    frontier = sorted(set(ids))
    for v in frontier:
        level[v] = 0
    nbrs: dict[str, dict[NodeType, tuple[str, ...]]] = {}
    for k in range(depth):
        nxt = set()
        for v in frontier:
            per = {}
            pools = graph.neighbors_by_type(v)
            for t in NODE_TYPES:
                pool = pools.get(t, ())
                if len(pool) > fanout:
                    pick = np.sort(rng.choice(len(pool), fanout, replace=False))
                    pool = tuple(pool[i] for i in pick)
                per[t] = pool
                for u in pool:
                    if u not in level:
                        level[u] = k + 1
                        nxt.add(u)
            nbrs[v] = per
        frontier = sorted(nxt)
    return build_context(graph, level, nbrs, depth)


def build_context(graph, level: Mapping[str, int], nbrs, depth: int) -> NodeContext:
    nodes = sorted(level, key=lambda n: (T_INDEX[graph.node_type(n)], n))
    row = {n: i for i, n in enumerate(nodes)}
    types = np.array([T_INDEX[graph.node_type(n)] for n in nodes], dtype=np.int64)
    lv = np.array([level[n] for n in nodes], dtype=np.int64)
    layers = []
    prev = np.arange(len(nodes))
    for l in range(1, depth + 1):
        cur = np.nonzero(lv <= depth - l)[0]
        self_pos = np.searchsorted(prev, cur)
        dst = [[] for _ in NODE_TYPES]
        src = [[] for _ in NODE_TYPES]
        for p, r in enumerate(cur):
            for ti, t in enumerate(NODE_TYPES):
                for u in nbrs[nodes[r]].get(t, ()):
                    dst[ti].append(p)
                    src[ti].append(row[u])
        nbr_dst, nbr_src, counts = [], [], []
        for ti in range(len(NODE_TYPES)):
            d_arr = np.asarray(dst[ti], dtype=np.int64)
            s_arr = np.searchsorted(prev, np.asarray(src[ti], dtype=np.int64))
            nbr_dst.append(torch.from_numpy(d_arr))
            nbr_src.append(torch.from_numpy(s_arr))
            counts.append(torch.from_numpy(np.bincount(d_arr, minlength=len(cur)).astype(np.float64)))
        layers.append(ConvLayer(cur, self_pos, nbr_dst, nbr_src, counts))
        prev = cur
    final = layers[-1].rows if layers else np.arange(len(nodes))
    target_pos = {nodes[r]: p for p, r in enumerate(final)}
    return NodeContext(nodes, types, layers, target_pos, {k: dict(v) for k, v in nbrs.items()})


def _type_slices(types: np.ndarray) -> list[tuple[int, slice]]:
    out = []
    for ti in range(len(NODE_TYPES)):
        idx = np.nonzero(types == ti)[0]
        if len(idx):
            out.append((ti, slice(int(idx[0]), int(idx[-1]) + 1)))
    return out


# ---------------------------------------------------------------------------
# the model


class MixedCurvatureModel(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        c = config
        gen = torch.Generator().manual_seed(c.seed)
        n_types = len(NODE_TYPES)

        def normal(*shape, scale):
            return torch.randn(*shape, generator=gen, dtype=DTYPE) * scale

        def xavier(rows, cols, gain=1.0):
            bound = gain * math.sqrt(6.0 / (rows + cols))
            return (torch.rand(rows, cols, generator=gen, dtype=DTYPE) * 2 - 1) * bound

        eye = torch.eye(c.d, dtype=DTYPE)
        self.feat = nn.ParameterDict()
        self.gcn = nn.ParameterDict()
        self.fuse = nn.ParameterDict()
        self.proj = nn.ParameterDict()
        self.attn = nn.ParameterDict()
        for t in NODE_TYPES:
            for m in range(c.M):
                key = f"{t.value}_{m}"
                self.feat[key] = nn.Parameter(normal(c.buckets, c.d, scale=c.init_scale))
                self.register_buffer(f"touch_{key}", torch.full((c.buckets,), -1, dtype=torch.int64))
                for l in range(1, c.L + 1):
                    self.gcn[f"{key}_{l}"] = nn.Parameter(xavier(c.d, (n_types + 1) * c.d))
                self.fuse[key] = nn.Parameter(torch.cat([0.5 * eye, 0.5 * eye], 1) + 0.1 * xavier(c.d, 2 * c.d))
                self.proj[key] = nn.Parameter(eye + 0.1 * xavier(c.d, c.d))
            self.attn[t.value] = nn.Parameter(torch.zeros(c.M, c.M * c.d, dtype=DTYPE))
        n_edge = 1 if c.shared_edge_curvature else len(RELATIONS)
        kn = torch.tensor(c.node_kappas, dtype=DTYPE)[:, None].repeat(1, n_types)
        ke = torch.tensor(c.edge_kappas, dtype=DTYPE)[:, None].repeat(1, n_edge)
        if c.trainable_curvature:
            self.kappa_node = nn.Parameter(kn)
            self.kappa_edge = nn.Parameter(ke)
        else:
            self.register_buffer("kappa_node", kn)
            self.register_buffer("kappa_edge", ke)
        self.act = ACTIVATIONS[c.nonlinearity]
        self._slots = {t: slot_layout(len(FEATURE_FIELDS[t]), c.d) for t in NODE_TYPES}

    # curvature lookups

    def k_node(self, m: int, t: NodeType | int) -> torch.Tensor:
        ti = t if isinstance(t, int) else T_INDEX[t]
        return self.kappa_node[m, ti]

    def k_edge(self, m: int, r: Relation) -> torch.Tensor:
        return self.kappa_edge[m, 0 if self.config.shared_edge_curvature else R_INDEX[r]]

    def touch_table(self, t: NodeType, m: int) -> torch.Tensor:
        return getattr(self, f"touch_{t.value}_{m}")

    # encoder

    def embed_features(self, t: NodeType, ids: Sequence[str], features: FeatureIndex) -> torch.Tensor:
        """Initial product embedding of nodes of one type, shape (n, M, d)."""
        bags = features.bags(t, ids)
        slots, ranges = self._slots[t]
        parts = []
        for m in range(self.config.M):
            table = self.feat[f"{t.value}_{m}"]
            pooled = [F.embedding_bag(flat, table, offsets, mode="mean", sparse=True) for flat, offsets in bags]
            parts.append(embed_features(pooled, slots, ranges, self.k_node(m, t)))
        return torch.stack(parts, 1)

    def _log0(self, h: torch.Tensor, types: np.ndarray) -> torch.Tensor:
        blocks = []
        for ti, sl in _type_slices(types):
            blocks.append(torch.stack(
                [geo.log_map0(h[sl, m], self.k_node(m, ti), strict=False) for m in range(self.config.M)], 1))
        return torch.cat(blocks, 0)

    def encode(self, ctx: NodeContext, features: FeatureIndex) -> torch.Tensor:
        """Embeddings of the context's target nodes, rows ordered as ``ctx.final_rows()``."""
        c = self.config
        types = ctx.types
        blocks = []
        for ti, sl in _type_slices(types):
            blocks.append(self.embed_features(NODE_TYPES[ti], ctx.nodes[sl], features))
        h = torch.cat(blocks, 0)
        prev_types = types
        for l, layer in enumerate(ctx.layers, 1):
            tangent = self._log0(h, prev_types)
            n_cur = len(layer.rows)
            agg = []
            for ti in range(len(NODE_TYPES)):
                acc = torch.zeros(n_cur, c.M, c.d, dtype=DTYPE)
                if len(layer.nbr_dst[ti]):
                    acc = acc.index_add(0, layer.nbr_dst[ti], tangent[layer.nbr_src[ti]])
                agg.append(acc / layer.counts[ti].clamp_min(1.0)[:, None, None])
            agg.append(tangent[torch.from_numpy(layer.self_pos)])
            agg = torch.cat(agg, -1)
            cur_types = types[layer.rows]
            out = []
            for ti, sl in _type_slices(cur_types):
                t = NODE_TYPES[ti]
                out.append(torch.stack([
                    gcn_update(agg[sl, m], self.gcn[f"{t.value}_{m}_{l}"], self.k_node(m, ti), self.act)
                    for m in range(c.M)
                ], 1))
            h = torch.cat(out, 0)
            prev_types = cur_types
        if c.fusion:
            h = self.space_fusion(h, prev_types)
        return h

    def space_fusion(self, h: torch.Tensor, types: np.ndarray) -> torch.Tensor:
        out = []
        for ti, sl in _type_slices(types):
            t = NODE_TYPES[ti]
            kappas = [self.k_node(m, ti) for m in range(self.config.M)]
            weights = [self.fuse[f"{t.value}_{m}"] for m in range(self.config.M)]
            out.append(space_fusion(h[sl], kappas, weights))
        return torch.cat(out, 0)

    def embed(self, ctx: NodeContext, features: FeatureIndex) -> dict[str, torch.Tensor]:
        """Convenience: encode and key the result by node id."""
        h = self.encode(ctx, features)
        return {nid: h[pos] for nid, pos in ctx.target_pos.items()}

    # scorer

    def project(self, x: torch.Tensor, t: NodeType, r: Relation) -> torch.Tensor:
        """Edge-space projection of (n, M, d) node embeddings of type t."""
        return torch.stack([
            edge_project(x[:, m], self.proj[f"{t.value}_{m}"], self.k_node(m, t), self.k_edge(m, r), self.act)
            for m in range(self.config.M)
        ], 1)

    def attention(self, projected: torch.Tensor, t: NodeType) -> torch.Tensor:
        return attention_weights(projected, self.attn[t.value] if self.config.attention else None)

    def edge_kappas(self, r: Relation) -> list[torch.Tensor]:
        return [self.k_edge(m, r) for m in range(self.config.M)]

    def reg_distance(self, x: torch.Tensor, types: np.ndarray | Sequence[int]) -> torch.Tensor:
        """Raw per-node sum over subspaces of the distance to the origin, shape (n,)."""
        types = np.asarray(types)
        out = torch.zeros(len(types), dtype=DTYPE)
        for ti in np.unique(types):
            idx = torch.from_numpy(np.nonzero(types == ti)[0])
            d = sum(geo.dist0(x[idx, m], self.k_node(m, int(ti)), strict=False) for m in range(self.config.M))
            out = out.index_put((idx,), d)
        return out

    def curvature_report(self) -> dict[str, float]:
        out = {}
        for m in range(self.config.M):
            for t in NODE_TYPES:
                out[f"k_node_{m}_{t.value}"] = float(self.k_node(m, t).detach())
            for r in RELATIONS:
                out[f"k_edge_{m}_{r.value}"] = float(self.k_edge(m, r).detach())
        return out
