"""Detection metrics for In-vs-Out score sets.

Every metric takes the positive ("In") scores first.  An empty side yields
``nan``, the undefined-metric marker used throughout the reports.
"""
from __future__ import annotations

import math

import numpy as np

UNDEFINED = math.nan


def _prep(pos, neg):
    pos = np.asarray(pos, dtype=np.float64).ravel()
    neg = np.asarray(neg, dtype=np.float64).ravel()
    if pos.size == 0 or neg.size == 0:
        return None
    return pos, neg


def _tally(pos: np.ndarray, neg: np.ndarray):
    """Distinct scores (descending) with positive/negative counts at each."""
    values, inv = np.unique(np.concatenate([pos, neg]), return_inverse=True)
    n_pos = np.bincount(inv[: pos.size], minlength=values.size)
    n_neg = np.bincount(inv[pos.size :], minlength=values.size)
    return values[::-1], n_pos[::-1], n_neg[::-1]


def auc(in_scores, out_scores) -> float:
    """P(in > out) + 0.5 P(in == out), via tie-averaged ranks.

    The numerator is accumulated as an exact integer count of half-pairs.
    """
    prepped = _prep(in_scores, out_scores)
    if prepped is None:
        return UNDEFINED
    pos, neg = prepped
    _, n_pos, n_neg = _tally(pos, neg)
    # ascending order: negatives strictly below each level, plus half the ties
    n_pos, n_neg = n_pos[::-1].astype(np.int64), n_neg[::-1].astype(np.int64)
    below = np.concatenate([[0], np.cumsum(n_neg)[:-1]])
    twice = int((n_pos * (2 * below + n_neg)).sum())
    return twice / (2 * pos.size * neg.size)


def aupr_in(in_scores, out_scores) -> float:
    """Step-wise area under precision/recall with In as the positive class."""
    prepped = _prep(in_scores, out_scores)
    if prepped is None:
        return UNDEFINED
    pos, neg = prepped
    _, n_pos, n_neg = _tally(pos, neg)
    tp = np.cumsum(n_pos)
    fp = np.cumsum(n_neg)
    precision = tp / (tp + fp)
    recall = tp / pos.size
    prev = np.concatenate([[0.0], recall[:-1]])
    # correctly rounded sum, independent of summation order
    return math.fsum((recall - prev) * precision)


def der(in_scores, out_scores) -> float:
    """``min_tau 0.5 P(in <= tau) + 0.5 P(out > tau)`` over observed scores and +-inf."""
    prepped = _prep(in_scores, out_scores)
    if prepped is None:
        return UNDEFINED
    pos, neg = prepped
    values, n_pos, n_neg = _tally(pos, neg)
    n_pos, n_neg = n_pos[::-1], n_neg[::-1]  # ascending thresholds
    in_le = np.concatenate([[0], np.cumsum(n_pos)])  # tau = -inf, then each value
    out_le = np.concatenate([[0], np.cumsum(n_neg)])
    err = 0.5 * (in_le / pos.size) + 0.5 * ((neg.size - out_le) / neg.size)
    return float(err.min())


def metric_triple(in_scores, out_scores) -> tuple[float, float, float]:
    return auc(in_scores, out_scores), aupr_in(in_scores, out_scores), der(in_scores, out_scores)
