"""Joint triplet training over all relations with tangent-space AdaGrad."""

from __future__ import annotations

import json
import logging
import math
import time
import zipfile
from dataclasses import asdict, dataclass, field, fields
from typing import Callable, Mapping, Sequence

import numpy as np
import torch

from . import geometry as geo
from .geometry import DTYPE
from .model import (
    T_INDEX, FeatureIndex, MixedCurvatureModel, ModelConfig, NodeContext, fermi_dirac_sim, sample_context, score_distance,
)
from .sampling import DEFAULT_METAPATHS, TrainingSample, generate_pairs, make_sample
from .types import NODE_TYPES

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 256
    lr: float = 1e-2
    warmup_steps: int = 1000
    clip_norm: float = 1.0
    margin: float = 0.5
    fd_radius: float = 1.0
    fd_temperature: float = 5.0
    reg_weight: float = 1e-3
    K: int = 6
    epochs: int = 1
    max_steps: int | None = None
    seed: int = 0
    walks_per_node: int = 2
    adagrad_eps: float = 1e-8
    lru_capacity: int | None = None
    lru_every: int = 100

    def __post_init__(self):
        if self.lr < 0 or self.margin <= 0 or self.clip_norm <= 0 or self.K < 1 or self.batch_size < 1:
            raise ValueError("need lr >= 0, margin > 0, clip_norm > 0, K >= 1, batch_size >= 1")

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, obj: Mapping) -> "TrainConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in obj.items() if k in names})


# full-size settings: batch 1024
FULL_SCALE_TRAIN = TrainConfig(batch_size=1024)
# desk-scale settings: smaller batches and a short warm-up
DESK_TRAIN = TrainConfig(batch_size=256, warmup_steps=100)


def triplet_loss(sim_pos, sim_negs, margin: float = 0.5):
    """Mean hinge ``max(0, m + sim_neg - sim_pos)`` over the negatives.

    Accepts floats or tensors; with tensors ``sim_negs`` has a trailing K axis.
    """
    if isinstance(sim_pos, torch.Tensor):
        if sim_negs.shape[-1] == 0:
            raise ValueError("triplet_loss needs at least one negative")
        return torch.clamp(margin + sim_negs - sim_pos.unsqueeze(-1), min=0).mean(-1)
    sim_negs = list(sim_negs)
    if not sim_negs:
        raise ValueError("triplet_loss needs at least one negative")
    return sum(max(0.0, margin + s - sim_pos) for s in sim_negs) / len(sim_negs)


def reg_loss(embeddings: Sequence[torch.Tensor], kappas: Sequence[Sequence]) -> torch.Tensor:
    """Sum over nodes and subspaces of the distance to the origin.

    ``embeddings[i]`` is an (M, d) product embedding and ``kappas[i]`` its M curvatures.
    """
    total = torch.zeros((), dtype=DTYPE)
    for x, ks in zip(embeddings, kappas):
        for m, k in enumerate(ks):
            total = total + geo.dist0(x[m], k, strict=False)
    return total


class AdaGrad:
    """Vanilla AdaGrad; sparse gradients update only the rows they touch."""

    def __init__(self, params: Mapping[str, torch.nn.Parameter], eps: float = 1e-8):
        self.eps = eps
        self.step = 0
        self.accum: dict[str, torch.Tensor] = {n: torch.zeros_like(p, dtype=DTYPE) for n, p in params.items()}

    @torch.no_grad()
    def update(self, params: Mapping[str, torch.nn.Parameter], lr: float) -> None:
        for name, p in params.items():
            g = p.grad
            if g is None:
                continue
            acc = self.accum[name]
            if g.is_sparse:
                g = g.coalesce()
                idx = g.indices()[0]
                vals = g.values()
                acc.index_add_(0, idx, vals * vals)
                p.index_add_(0, idx, -lr * vals / (acc[idx].sqrt() + self.eps))
            else:
                acc.add_(g * g)
                p.add_(-lr * g / (acc.sqrt() + self.eps))


def _grad_values(g: torch.Tensor) -> torch.Tensor:
    return g.coalesce().values() if g.is_sparse else g


def global_grad_norm(params: Iterable[torch.nn.Parameter]) -> float:
    sq = 0.0
    for p in params:
        if p.grad is not None:
            sq += float(_grad_values(p.grad).pow(2).sum())
    return math.sqrt(sq)


@torch.no_grad()
def clip_gradients(params: Sequence[torch.nn.Parameter], clip_norm: float) -> float:
    """Scale all gradients so their global norm is at most ``clip_norm``; returns the pre-clip norm."""
    norm = global_grad_norm(params)
    if norm > clip_norm:
        scale = clip_norm / norm
        for p in params:
            if p.grad is not None:
                p.grad = p.grad.coalesce() * scale if p.grad.is_sparse else p.grad * scale
    return norm


def effective_lr(cfg: TrainConfig, step: int) -> float:
    """Linear warm-up; ``step`` is 1-based."""
    if cfg.warmup_steps <= 0:
        return cfg.lr
    return cfg.lr * min(1.0, step / cfg.warmup_steps)


def batch_loss(model: MixedCurvatureModel, batch: Sequence[TrainingSample], ctx: NodeContext,
               features: FeatureIndex, graph, cfg: TrainConfig) -> dict[str, torch.Tensor]:
    """Forward pass for one batch: mean of triplet + reg_weight * reg over samples."""
    if not batch:
        raise ValueError("empty batch")
    emb = model.encode(ctx, features)
    pos = ctx.target_pos
    k = len(batch[0].negs)
    need: dict[tuple, set[str]] = {}
    for s in batch:
        for n in (s.src, s.pos, *s.negs):
            need.setdefault((T_INDEX[graph.node_type(n)], s.relation), set()).add(n)
    proj_row: dict[tuple[str, object], int] = {}
    p_blocks, w_blocks, offset = [], [], 0
    for (ti, r) in sorted(need, key=lambda kv: (kv[0], kv[1].value)):
        ids = sorted(need[(ti, r)])
        x = emb[torch.tensor([pos[i] for i in ids])]
        p = model.project(x, NODE_TYPES[ti], r)
        p_blocks.append(p)
        w_blocks.append(model.attention(p, NODE_TYPES[ti]))
        for j, i in enumerate(ids):
            proj_row[(i, r)] = offset + j
        offset += len(ids)
    P = torch.cat(p_blocks, 0)
    W = torch.cat(w_blocks, 0)

    dist = torch.zeros(len(batch), 1 + k, dtype=DTYPE)
    by_rel: dict[object, list[int]] = {}
    for i, s in enumerate(batch):
        by_rel.setdefault(s.relation, []).append(i)
    for r, rows in by_rel.items():
        a = torch.tensor([proj_row[(batch[i].src, r)] for i in rows for _ in range(1 + k)])
        b = torch.tensor([proj_row[(n, r)] for i in rows for n in (batch[i].pos, *batch[i].negs)])
        d = score_distance(P[a], P[b], W[a], W[b], model.edge_kappas(r)).reshape(len(rows), 1 + k)
        dist = dist.index_put((torch.tensor(rows),), d)
    sims = fermi_dirac_sim(dist, cfg.fd_radius, cfg.fd_temperature)
    trip = triplet_loss(sims[:, 0], sims[:, 1:], cfg.margin)

    final_types = ctx.types[ctx.final_rows()]
    node_reg = model.reg_distance(emb, final_types)
    reg_idx = torch.tensor([[pos[n] for n in (s.src, s.pos, *s.negs)] for s in batch])
    reg = node_reg[reg_idx].sum(-1)
    total = (trip + cfg.reg_weight * reg).mean()
    return {"loss": total, "triplet": trip.mean(), "reg": reg.mean(), "sims": sims, "dist": dist}


@dataclass
class StepResult:
    step: int
    loss: float
    triplet: float
    reg: float
    lr: float
    grad_norm: float
    skipped: bool = False


def train_step(model: MixedCurvatureModel, opt: AdaGrad, batch: Sequence[TrainingSample], ctx: NodeContext,
               features: FeatureIndex, graph, cfg: TrainConfig) -> StepResult:
    """One update; returns the pre-update loss."""
    params = dict(model.named_parameters())
    for p in params.values():
        p.grad = None
    out = batch_loss(model, batch, ctx, features, graph, cfg)
    loss = out["loss"]
    vals = float(loss.detach()), float(out["triplet"].detach()), float(out["reg"].detach())
    opt.step += 1
    lr = effective_lr(cfg, opt.step)
    if not torch.isfinite(loss):
        log.warning("step %d: non-finite loss, update skipped", opt.step)
        return StepResult(opt.step, *vals, lr, float("nan"), True)
    loss.backward()
    plist = list(params.values())
    norm = global_grad_norm(plist)
    if not math.isfinite(norm):
        log.warning("step %d: non-finite gradient, update skipped", opt.step)
        for p in plist:
            p.grad = None
        return StepResult(opt.step, *vals, lr, norm, True)
    clip_gradients(plist, cfg.clip_norm)
    opt.update(params, lr)
    for p in plist:
        p.grad = None
    return StepResult(opt.step, *vals, lr, norm)


@torch.no_grad()
def lru_evict(table: torch.Tensor, last_touch: torch.Tensor, capacity: int, now: int = 0,
              init_scale: float = 0.1, accum: torch.Tensor | None = None, seed: int = 0) -> int:
    """Reset the least recently touched occupied rows until at most ``capacity`` remain.

    Evicted rows are redrawn from the initializer distribution and marked unoccupied;
    their optimizer accumulators (if given) are zeroed.
    """
    occupied = torch.nonzero(last_touch >= 0).flatten()
    excess = len(occupied) - capacity
    if excess <= 0:
        return 0
    # oldest first, ties by row id
    order = np.lexsort((occupied.numpy(), last_touch[occupied].numpy()))
    victims = occupied[torch.from_numpy(order[:excess])]
    gen = torch.Generator().manual_seed(hash((seed, now)) & 0x7FFFFFFF)
    table[victims] = torch.randn(len(victims), table.shape[1], generator=gen, dtype=table.dtype) * init_scale
    last_touch[victims] = -1
    if accum is not None:
        accum[victims] = 0
    return int(excess)


class Trainer:
    """Owns the sample pool, optimizer and step counter for one graph."""

    def __init__(self, graph, model: MixedCurvatureModel, cfg: TrainConfig, opt: AdaGrad | None = None,
                 metapaths=DEFAULT_METAPATHS):
        self.graph = graph
        self.model = model
        self.cfg = cfg
        self.features = FeatureIndex(graph.nodes.values(), model.config.buckets)
        self.opt = opt or AdaGrad(dict(model.named_parameters()), cfg.adagrad_eps)
        pool_rng = np.random.default_rng([cfg.seed, 1])
        self.pairs = generate_pairs(graph, pool_rng, cfg.walks_per_node, metapaths)
        if not self.pairs:
            raise ValueError("graph yields no positive pairs")

    @property
    def steps_per_epoch(self) -> int:
        return max(1, math.ceil(len(self.pairs) / self.cfg.batch_size))

    @property
    def total_steps(self) -> int:
        if self.cfg.max_steps is not None:
            return self.cfg.max_steps
        return self.cfg.epochs * self.steps_per_epoch

    def make_batch(self, step: int) -> tuple[list[TrainingSample], NodeContext]:
        """Batch for a 1-based step; depends only on (seed, step)."""
        rng = np.random.default_rng([self.cfg.seed, 2, step])
        picks = rng.integers(len(self.pairs), size=min(self.cfg.batch_size, len(self.pairs)))
        batch = [make_sample(self.graph, self.pairs[i], self.cfg.K, rng) for i in picks]
        ids = {n for s in batch for n in (s.src, s.pos, *s.negs)}
        ctx = sample_context(self.graph, ids, self.model.config.fanout, self.model.config.L, rng)
        return batch, ctx

    def touch(self, ctx: NodeContext, step: int) -> None:
        for ti, t in enumerate(NODE_TYPES):
            ids = [n for n, tt in zip(ctx.nodes, ctx.types) if tt == ti]
            if not ids:
                continue
            rows = torch.from_numpy(self.features.rows_touched(t, ids))
            for m in range(self.model.config.M):
                self.model.touch_table(t, m)[rows] = step

    def step(self) -> StepResult:
        batch, ctx = self.make_batch(self.opt.step + 1)
        res = train_step(self.model, self.opt, batch, ctx, self.features, self.graph, self.cfg)
        self.touch(ctx, res.step)
        if self.cfg.lru_capacity and res.step % self.cfg.lru_every == 0:
            self.evict(res.step)
        return res

    def evict(self, now: int) -> int:
        total = 0
        for t in NODE_TYPES:
            for m in range(self.model.config.M):
                name = f"feat.{t.value}_{m}"
                total += lru_evict(self.model.feat[f"{t.value}_{m}"].data, self.model.touch_table(t, m),
                                   self.cfg.lru_capacity, now, self.model.config.init_scale,
                                   self.opt.accum.get(name), seed=self.cfg.seed)
        return total

    def fit(self, steps: int | None = None, on_step: Callable[[StepResult, "Trainer"], None] | None = None,
            metrics_stream=None) -> list[StepResult]:
        target = self.total_steps if steps is None else self.opt.step + steps
        history = []
        while self.opt.step < target:
            t0 = time.perf_counter()
            res = self.step()
            history.append(res)
            if metrics_stream is not None:
                rec = asdict(res)
                rec["seconds"] = time.perf_counter() - t0
                rec.update(self.model.curvature_report())
                metrics_stream.write(json.dumps(rec) + "\n")
            if on_step is not None:
                on_step(res, self)
        return history


@dataclass
class GradCheckReport:
    max_rel_error: dict[str, float] = field(default_factory=dict)
    checked: dict[str, int] = field(default_factory=dict)
    kinks_skipped: dict[str, int] = field(default_factory=dict)
    failures: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.failures


def check_gradients(model: MixedCurvatureModel, batch: Sequence[TrainingSample], ctx: NodeContext,
                    features: FeatureIndex, graph, cfg: TrainConfig, h: float = 1e-4, tol: float = 1e-3,
                    coords_per_tensor: int = 4, seed: int = 0, floor: float = 1e-7) -> GradCheckReport:
    """Compare autograd gradients with central differences on sampled coordinates.

    Every parameter tensor is probed and every curvature coordinate is checked. A coordinate whose
    central differences at ``h`` and ``h/2`` disagree beyond ``tol`` sits on a
    kink (ReLU, hinge or clamp) and is skipped.
    """
    rng = np.random.default_rng(seed)
    params = dict(model.named_parameters())
    for p in params.values():
        p.grad = None
    batch_loss(model, batch, ctx, features, graph, cfg)["loss"].backward()
    grads = {n: (p.grad.to_dense() if p.grad is not None else torch.zeros_like(p)).clone() for n, p in params.items()}
    for p in params.values():
        p.grad = None

    touched: dict[str, np.ndarray] = {}
    for ti, t in enumerate(NODE_TYPES):
        ids = [n for n, tt in zip(ctx.nodes, ctx.types) if tt == ti]
        rows = features.rows_touched(t, ids) if ids else np.zeros(0, dtype=np.int64)
        for m in range(model.config.M):
            touched[f"feat.{t.value}_{m}"] = rows

    @torch.no_grad()
    def f() -> float:
        return float(batch_loss(model, batch, ctx, features, graph, cfg)["loss"])

    report = GradCheckReport()
    for name, p in params.items():
        flat = p.data.view(-1)
        if name in touched:
            rows = touched[name]
            if len(rows) == 0:
                continue
            r = rng.choice(rows, size=min(coords_per_tensor, len(rows)), replace=False)
            c = rng.integers(p.shape[1], size=len(r))
            coords = [int(a) * p.shape[1] + int(b) for a, b in zip(r, c)]
        elif name.startswith("kappa"):
            coords = list(range(flat.numel()))
        else:
            coords = rng.choice(flat.numel(), size=min(coords_per_tensor, flat.numel()), replace=False).tolist()
        worst, n_checked, n_kink = 0.0, 0, 0
        for ci in coords:
            orig = float(flat[ci])

            def central(step):
                flat[ci] = orig + step
                fp = f()
                flat[ci] = orig - step
                fm = f()
                flat[ci] = orig
                return (fp - fm) / (2 * step)

            fd = central(h)
            fd_half = central(h / 2)
            ad = float(grads[name].view(-1)[ci])
            if abs(fd - fd_half) > tol * max(abs(fd), abs(fd_half), floor):
                n_kink += 1
                continue
            err = abs(fd - ad) / max(abs(fd), abs(ad), floor)
            worst = max(worst, err)
            n_checked += 1
            if err > tol:
                report.failures.append(f"{name}[{ci}]: autograd {ad:.6e} vs fd {fd:.6e} (rel {err:.2e})")
        report.max_rel_error[name] = worst
        report.checked[name] = n_checked
        report.kinks_skipped[name] = n_kink
    return report


class CheckpointError(ValueError):
    pass


class ConfigMismatchError(CheckpointError):
    pass


def save_checkpoint(path, model: MixedCurvatureModel, opt: AdaGrad, train_cfg: TrainConfig | None = None) -> None:
    """Zip archive: config.json, manifest.json and little-endian float64 tensor data."""
    tensors: dict[str, torch.Tensor] = dict(model.state_dict())
    for name, acc in opt.accum.items():
        tensors[f"adagrad/{name}"] = acc
    manifest, chunks, offset = [], [], 0
    for name in sorted(tensors):
        t = tensors[name].detach()
        raw = t.to(torch.float64).contiguous().numpy().astype("<f8").tobytes()
        manifest.append({"name": name, "shape": list(t.shape), "offset": offset,
                         "dtype": "int64" if t.dtype == torch.int64 else "float64"})
        chunks.append(raw)
        offset += len(raw)
    config = {"model": model.config.to_json(), "train": train_cfg.to_json() if train_cfg else None,
              "step": opt.step, "adagrad_eps": opt.eps}
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        zf.writestr("config.json", json.dumps(config, sort_keys=True))
        zf.writestr("manifest.json", json.dumps(manifest))
        zf.writestr("tensors.bin", b"".join(chunks))


def load_checkpoint(path, expected: ModelConfig | None = None):
    """Returns ``(model, opt, train_cfg)``; ``train_cfg`` is None when none was saved."""
    try:
        with zipfile.ZipFile(path) as zf:
            config = json.loads(zf.read("config.json"))
            manifest = json.loads(zf.read("manifest.json"))
            blob = zf.read("tensors.bin")
    except (KeyError, zipfile.BadZipFile, json.JSONDecodeError, OSError) as exc:
        raise CheckpointError(f"unreadable checkpoint {path}: {exc}") from exc
    mcfg = ModelConfig.from_json(config["model"])
    if expected is not None and expected != mcfg:
        diff = {k: (v, getattr(mcfg, k)) for k, v in expected.to_json().items() if mcfg.to_json()[k] != v}
        raise ConfigMismatchError(f"checkpoint config differs from the expected one: {diff}")
    model = MixedCurvatureModel(mcfg)
    opt = AdaGrad(dict(model.named_parameters()), config.get("adagrad_eps", 1e-8))
    opt.step = int(config["step"])
    state = {}
    for entry in manifest:
        n = int(np.prod(entry["shape"], dtype=np.int64))
        start = entry["offset"]
        if start + 8 * n > len(blob):
            raise CheckpointError(f"tensor {entry['name']} runs past the end of the data")
        arr = np.frombuffer(blob, dtype="<f8", count=n, offset=start).reshape(entry["shape"])
        t = torch.from_numpy(arr.copy())
        state[entry["name"]] = t.to(torch.int64) if entry["dtype"] == "int64" else t
    accum = {k.split("/", 1)[1]: v for k, v in state.items() if k.startswith("adagrad/")}
    params = {k: v for k, v in state.items() if not k.startswith("adagrad/")}
    try:
        model.load_state_dict(params, strict=True)
    except RuntimeError as exc:
        raise CheckpointError(f"checkpoint tensors do not match the model: {exc}") from exc
    if set(accum) != set(opt.accum):
        raise CheckpointError("optimizer accumulators do not match the model parameters")
    opt.accum = accum
    train_cfg = TrainConfig.from_json(config["train"]) if config.get("train") else None
    return model, opt, train_cfg
