"""Figures for training curves and experiment summaries, written straight to files."""

from __future__ import annotations

import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

RC = {
    "font.size": 10,
    "axes.labelsize": 10,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "figure.dpi": 120,
}


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return path


def moving_average(values, window: int) -> list[float]:
    out, acc = [], 0.0
    for i, v in enumerate(values):
        acc += v
        if i >= window:
            acc -= values[i - window]
        out.append(acc / min(i + 1, window))
    return out


def read_metrics(path) -> list[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


def plot_training(records: list[dict], path, window: int = 20) -> Path:
    """Loss (raw and smoothed) and node curvatures against step."""
    with plt.rc_context(RC):
        fig, (ax_loss, ax_k) = plt.subplots(1, 2, figsize=(8, 3))
        steps = [r["step"] for r in records]
        loss = [r["loss"] for r in records]
        ax_loss.plot(steps, loss, color="0.75", lw=0.8, label="loss")
        ax_loss.plot(steps, moving_average(loss, window), color="C0", lw=1.5, label=f"{window}-step mean")
        ax_loss.set_xlabel("step")
        ax_loss.set_ylabel("loss")
        ax_loss.legend(frameon=False)
        keys = sorted(k for k in (records[0] if records else {}) if k.startswith("k_node"))
        for i, key in enumerate(keys):
            ax_k.plot(steps, [r[key] for r in records], lw=1, color=f"C{i % 10}", label=key[7:])
        ax_k.axhline(0, color="k", lw=0.5)
        ax_k.set_xlabel("step")
        ax_k.set_ylabel("curvature")
        if keys:
            ax_k.legend(frameon=False, ncol=2)
        return _save(fig, path)


def plot_subspace_sweep(summary: list[dict], path, metric: str = "next_auc") -> Path:
    """Metric against subspace count for the unified-curvature rows."""
    rows = sorted((s for s in summary if s["config"].startswith("unified-M")), key=lambda s: s["M"])
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=(4, 3))
        xs = [s["M"] for s in rows]
        ax.errorbar(xs, [s[metric] for s in rows], yerr=[s.get(f"{metric}_std", 0) for s in rows],
                    marker="o", capsize=3)
        ax.set_xticks(xs)
        ax.set_xlabel("subspaces M (total dim fixed)")
        ax.set_ylabel(metric)
        return _save(fig, path)


def plot_config_bars(summary: list[dict], path, metric: str = "hitrate@10") -> Path:
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=(max(4, 0.6 * len(summary) + 1), 3))
        names = [s["config"] for s in summary]
        ax.bar(range(len(names)), [s[metric] for s in summary], yerr=[s.get(f"{metric}_std", 0) for s in summary],
               color="C0", capsize=3)
        ax.set_xticks(range(len(names)))
        ax.set_xticklabels(names, rotation=45, ha="right")
        ax.set_ylabel(metric)
        return _save(fig, path)


def render_report(out_dir, summary: list[dict] | None = None, training_metrics=None) -> list[Path]:
    """Render every figure the available inputs allow into ``out_dir``."""
    out = Path(out_dir)
    made = []
    if summary:
        made.append(plot_config_bars(summary, out / "configs_hitrate.png", "hitrate@10"))
        made.append(plot_config_bars(summary, out / "configs_auc.png", "next_auc"))
        if any(s["config"].startswith("unified-M") for s in summary):
            made.append(plot_subspace_sweep(summary, out / "subspace_sweep.png"))
    if training_metrics:
        made.append(plot_training(read_metrics(training_metrics), out / "training.png"))
    return made
