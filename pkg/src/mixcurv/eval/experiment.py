"""Train-and-evaluate harness over a grid of model variants."""

from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import replace
from pathlib import Path
from statistics import mean, pstdev
from typing import Callable, Mapping

import numpy as np
import torch

from ..index import EmbeddingStore, knn_exact, precompute_store
from ..model import MixedCurvatureModel, ModelConfig, euclidean, score_distance
from ..training import DESK_TRAIN, TrainConfig, Trainer
from ..types import IndexType, NodeType, Relation
from .metrics import hitrate_at_k, ndcg_at_k, next_auc
from .synthetic import EvalSet, SyntheticSpec, generate_synthetic

log = logging.getLogger(__name__)

METRIC_KS = (10, 50)

# equal total dimension 16 throughout
DEFAULT_GRID: dict = {
    "synthetic": {},
    "train": {},
    "steps": 600,
    "seeds": [0, 1, 2],
    "buckets": 2**14,
    "configs": [
        {"name": "euclidean", "model": {"M": 2, "d": 8}, "euclidean": True},
        {"name": "unified-M1", "model": {"M": 1, "d": 16}},
        {"name": "unified-M2", "model": {"M": 2, "d": 8}},
        {"name": "unified-M4", "model": {"M": 4, "d": 4}},
        {"name": "fixed-HxH", "model": {"M": 2, "d": 8, "node_curvature_init": [-1, -1],
                                        "trainable_curvature": False}},
        {"name": "fixed-SxS", "model": {"M": 2, "d": 8, "node_curvature_init": [1, 1],
                                        "trainable_curvature": False}},
        {"name": "fixed-HxS", "model": {"M": 2, "d": 8, "node_curvature_init": [-1, 1],
                                        "trainable_curvature": False}},
        {"name": "no-fusion", "model": {"M": 2, "d": 8, "fusion": False}},
        {"name": "no-edge-spaces", "model": {"M": 2, "d": 8, "shared_edge_curvature": True}},
        {"name": "no-attention", "model": {"M": 2, "d": 8, "attention": False}},
    ],
}


def pair_scores(store: EmbeddingStore, pairs) -> np.ndarray:
    """Fermi-Dirac similarity for (u, v, relation) triples, using stored projections."""
    out = np.empty(len(pairs))
    groups: dict[Relation, list[int]] = {}
    for i, (_, _, r) in enumerate(pairs):
        groups.setdefault(r, []).append(i)
    for r, rows in groups.items():
        pu = np.stack([store.vectors(pairs[i][0], r)[0] for i in rows])
        wu = np.stack([store.vectors(pairs[i][0], r)[1] for i in rows])
        pv = np.stack([store.vectors(pairs[i][1], r)[0] for i in rows])
        wv = np.stack([store.vectors(pairs[i][1], r)[1] for i in rows])
        with torch.no_grad():
            d = score_distance(*(torch.from_numpy(a) for a in (pu, pv, wu, wv)), store.edge_kappas[r])
        out[rows] = torch.sigmoid(store.temperature * (store.radius - d)).numpy()
    return out


def evaluate(store: EmbeddingStore, ev: EvalSet, ks=METRIC_KS) -> dict[str, float]:
    pos = [p for p in ev.positives if p[0] in store and p[1] in store]
    neg = [p for p in ev.negatives if p[0] in store and p[1] in store]
    scored = [(s, 1) for s in pair_scores(store, pos)] + [(s, 0) for s in pair_scores(store, neg)]
    metrics = {"next_auc": 100.0 * next_auc(scored)}
    kmax = max(ks)
    hits = {k: [] for k in ks}
    ndcgs = {k: [] for k in ks}
    for (q, t), truth in ev.truth.items():
        if q not in store:
            continue
        itype = IndexType.Q2I if t is NodeType.ITEM else IndexType.Q2A
        got = [n for n, _ in knn_exact(store, q, itype, kmax)]
        for k in ks:
            hits[k].append(hitrate_at_k(got, [n for n, _ in truth], k))
            ndcgs[k].append(ndcg_at_k(got, truth, k))
    for k in ks:
        metrics[f"hitrate@{k}"] = mean(hits[k]) if hits[k] else 0.0
        metrics[f"ndcg@{k}"] = mean(ndcgs[k]) if ndcgs[k] else 0.0
    return metrics


def model_config_for(entry: Mapping, seed: int, buckets: int) -> ModelConfig:
    cfg = ModelConfig.from_json({"buckets": buckets, **entry.get("model", {}), "seed": seed})
    return euclidean(cfg) if entry.get("euclidean") else cfg


def run_one(graph, ev: EvalSet, entry: Mapping, seed: int, steps: int, train: TrainConfig,
            buckets: int) -> dict:
    mcfg = model_config_for(entry, seed, buckets)
    model = MixedCurvatureModel(mcfg)
    tcfg = replace(train, seed=seed)
    t0 = time.perf_counter()
    trainer = Trainer(graph, model, tcfg)
    hist = trainer.fit(steps)
    tail = [h.triplet for h in hist[-50:]]
    store = precompute_store(model, graph, trainer.features, radius=tcfg.fd_radius,
                             temperature=tcfg.fd_temperature)
    row = {"config": entry["name"], "seed": seed, "M": mcfg.M, "d": mcfg.d, "steps": steps,
           "final_triplet": mean(tail) if tail else float("nan")}
    row.update(evaluate(store, ev))
    row["seconds"] = time.perf_counter() - t0
    row.update({k: v for k, v in model.curvature_report().items() if k.startswith("k_node")})
    return row


def summarize(rows: list[dict]) -> list[dict]:
    """Per-config mean and population std of every numeric metric."""
    out = []
    names = list(dict.fromkeys(r["config"] for r in rows))
    for name in names:
        group = [r for r in rows if r["config"] == name]
        s = {"config": name, "seeds": len(group), "M": group[0]["M"], "d": group[0]["d"]}
        for key in ("next_auc", "final_triplet", *(f"{m}@{k}" for k in METRIC_KS for m in ("hitrate", "ndcg"))):
            vals = [r[key] for r in group]
            s[key] = mean(vals)
            s[f"{key}_std"] = pstdev(vals)
        out.append(s)
    return out


def _write_csv(path: Path, rows: list[dict]) -> None:
    if not rows:
        path.write_text("")
        return
    cols = list(dict.fromkeys(k for r in rows for k in r))
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=cols)
        w.writeheader()
        w.writerows(rows)


def run_experiment(grid: Mapping | None = None, out_dir=None, graph=None, ev: EvalSet | None = None,
                   on_row: Callable[[dict], None] | None = None) -> dict:
    """Train every (config, seed) pair sequentially and collect metrics.

    Returns ``{"rows": per-seed rows, "summary": per-config means}``. With
    ``out_dir`` also writes metrics.csv, metrics.jsonl, summary.csv and
    subspace_sweep.csv (unified-M rows: M against the metrics).
    """
    grid = {**DEFAULT_GRID, **(grid or {})}
    if graph is None:
        graph, ev = generate_synthetic(SyntheticSpec(**grid.get("synthetic", {})))
    elif ev is None:
        raise ValueError("a user graph needs an evaluation set")
    train = TrainConfig.from_json({**DESK_TRAIN.to_json(), **grid.get("train", {})})
    rows = []
    for entry in grid["configs"]:
        for seed in grid["seeds"]:
            row = run_one(graph, ev, entry, seed, grid["steps"], train, grid.get("buckets", 2**14))
            log.info("%s seed %d: auc %.2f hit@10 %.2f", row["config"], seed, row["next_auc"], row["hitrate@10"])
            rows.append(row)
            if on_row:
                on_row(row)
    summary = summarize(rows)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        _write_csv(out / "metrics.csv", rows)
        with open(out / "metrics.jsonl", "w") as fh:
            for r in rows:
                fh.write(json.dumps(r) + "\n")
        _write_csv(out / "summary.csv", summary)
        sweep = [s for s in summary if s["config"].startswith("unified-M")]
        _write_csv(out / "subspace_sweep.csv", [
            {"M": s["M"], "next_auc": s["next_auc"], "hitrate@10": s["hitrate@10"], "ndcg@10": s["ndcg@10"]}
            for s in sorted(sweep, key=lambda s: s["M"])])
        (out / "grid.json").write_text(json.dumps(grid, indent=2))
    return {"rows": rows, "summary": summary}
