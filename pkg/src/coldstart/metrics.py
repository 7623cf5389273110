"""AUC, LogLoss, and relative-percentage scores over the hold-out set."""

from __future__ import annotations

import numpy as np

LOGLOSS_EPS = 1e-7


class UndefinedMetric(ValueError):
    pass


def auc(scores, labels) -> float:
    """Probability that a random positive outranks a random negative, with
    ties counted half. Rank-sum implementation, O(n log n)."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise ValueError("scores and labels must be equal-length vectors")
    n_pos = int((labels == 1).sum())
    n_neg = int((labels == 0).sum())
    if n_pos + n_neg != labels.size:
        raise ValueError("labels must be 0 or 1")
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetric("AUC needs at least one positive and one negative label")

    order = np.argsort(scores, kind="stable")
    sorted_scores = scores[order]
    ranks = np.empty(scores.size, dtype=np.float64)
    i = 0
    while i < scores.size:
        j = i
        while j + 1 < scores.size and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0  # average rank, 1-based
        i = j + 1
    rank_sum_pos = ranks[labels == 1].sum()
    return float((rank_sum_pos - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def auc_bruteforce(scores, labels) -> float:
    """O(n^2) pairwise definition; the oracle the rank-sum path is checked
    against."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    pos = scores[labels == 1]
    neg = scores[labels == 0]
    if pos.size == 0 or neg.size == 0:
        raise UndefinedMetric("AUC needs at least one positive and one negative label")
    wins = (pos[:, None] > neg[None, :]).sum()
    ties = (pos[:, None] == neg[None, :]).sum()
    return float((wins + 0.5 * ties) / (pos.size * neg.size))


def logloss(preds, labels) -> float:
    """Mean binary cross-entropy with probabilities clipped to
    [1e-7, 1 - 1e-7]."""
    preds = np.asarray(preds, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    if preds.shape != labels.shape:
        raise ValueError(f"length mismatch: {preds.shape} vs {labels.shape}")
    p = np.clip(preds, LOGLOSS_EPS, 1.0 - LOGLOSS_EPS)
    return float(-(labels * np.log(p) + (1.0 - labels) * np.log(1.0 - p)).mean())


def percentage(metric_value: float, base_cold_value: float, kind: str) -> float:
    """Relative change versus the base-cold anchor, in percent. Positive is
    better for AUC, negative is better for LogLoss."""
    if kind not in ("auc", "logloss"):
        raise ValueError(f"unknown metric kind {kind!r}")
    if base_cold_value <= 0:
        raise ValueError("percentage anchor must be positive")
    return (metric_value / base_cold_value - 1.0) * 100.0


CSV_COLUMNS = [
    "dataset", "model", "init_policy", "phase", "seed",
    "auc", "logloss", "auc_pct", "logloss_pct",
]


def format_metric_row(dataset, model, policy, phase, seed, auc_v, ll_v, auc_pct, ll_pct) -> str:
    return ",".join([
        dataset, model, policy, phase, str(seed),
        format(auc_v, ".12g"), format(ll_v, ".12g"),
        format(auc_pct, ".12g"), format(ll_pct, ".12g"),
    ])
