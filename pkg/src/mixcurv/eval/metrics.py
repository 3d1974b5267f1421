"""Ranking and link-prediction metrics, reported on a 0-100 scale where noted."""

from __future__ import annotations

import math
from typing import Iterable, Sequence

import numpy as np
from scipy.stats import rankdata


def next_auc(scored: Iterable[tuple[float, int]]) -> float:
    """Probability that a random positive outscores a random negative; ties count one half."""
    pairs = list(scored)
    scores = np.array([s for s, _ in pairs], dtype=np.float64)
    labels = np.array([bool(y) for _, y in pairs])
    n_pos = int(labels.sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("next_auc needs both positive and negative examples")
    # Mann-Whitney U from mid-ranks
    ranks = rankdata(scores)
    u = ranks[labels].sum() - n_pos * (n_pos + 1) / 2
    return float(u / (n_pos * n_neg))


def hitrate_at_k(retrieved: Sequence[str], truth: Sequence[str], k: int) -> float:
    """Percentage of the ground-truth list found in the top ``k`` retrieved ids."""
    truth_set = set(truth)
    if not truth_set:
        raise ValueError("truth must be nonempty")
    return 100.0 * len(set(retrieved[:k]) & truth_set) / len(truth_set)


def ndcg_at_k(retrieved: Sequence[str], gains: dict[str, float] | Sequence[tuple[str, float]], k: int) -> float:
    """100 * DCG@k / IDCG@k with gain = click count and discount 1/log2(rank+1)."""
    gains = dict(gains)
    if not gains:
        raise ValueError("truth must be nonempty")
    dcg = sum(gains.get(n, 0.0) / math.log2(i + 2) for i, n in enumerate(retrieved[:k]))
    ideal = sorted(gains.values(), reverse=True)[:k]
    idcg = sum(g / math.log2(i + 2) for i, g in enumerate(ideal))
    return 100.0 * dcg / idcg if idcg > 0 else 0.0
