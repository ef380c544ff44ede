"""Ranking and threshold metrics.

average_precision follows the step-wise AP definition: the mean, over
positives in score-descending order, of the precision at each positive's
rank.  Ties are broken by stable input order.  auc_roc is the Mann-Whitney
statistic with ties counted as half.
"""

from __future__ import annotations

import numpy as np


class UndefinedMetricError(ValueError):
    pass


def _check_binary(labels: np.ndarray):
    pos = int(labels.sum())
    if pos == 0 or pos == len(labels):
        raise UndefinedMetricError("metric undefined for single-class labels")


def average_precision(scores, labels) -> float:
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels, dtype=int)
    _check_binary(labels)
    order = np.argsort(-scores, kind="stable")
    ranked = labels[order]
    cum_pos = np.cumsum(ranked)
    ranks = np.arange(1, len(ranked) + 1)
    precision_at = cum_pos / ranks
    return float(precision_at[ranked == 1].sum() / ranked.sum())


def auc_roc(scores, labels) -> float:
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels, dtype=int)
    _check_binary(labels)
    pos = scores[labels == 1]
    neg = scores[labels == 0]
    # rank-based Mann-Whitney with midranks for ties
    allscores = np.concatenate([pos, neg])
    order = np.argsort(allscores, kind="stable")
    ranks = np.empty(len(allscores))
    sorted_scores = allscores[order]
    i = 0
    while i < len(sorted_scores):
        j = i
        while j + 1 < len(sorted_scores) and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    r_pos = ranks[:len(pos)].sum()
    n_pos, n_neg = len(pos), len(neg)
    u = r_pos - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def f1_score(scores, labels, threshold: float = 0.5) -> float:
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels, dtype=int)
    _check_binary(labels)
    pred = (scores >= threshold).astype(int)
    tp = int(((pred == 1) & (labels == 1)).sum())
    fp = int(((pred == 1) & (labels == 0)).sum())
    fn = int(((pred == 0) & (labels == 1)).sum())
    if 2 * tp + fp + fn == 0:
        return 0.0
    return float(2 * tp / (2 * tp + fp + fn))


def confusion_counts(scores, labels, threshold: float = 0.5) -> dict:
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels, dtype=int)
    pred = (scores >= threshold).astype(int)
    return {
        "tp": int(((pred == 1) & (labels == 1)).sum()),
        "fp": int(((pred == 1) & (labels == 0)).sum()),
        "tn": int(((pred == 0) & (labels == 0)).sum()),
        "fn": int(((pred == 0) & (labels == 1)).sum()),
    }


def evaluate(scores, labels, threshold: float = 0.5) -> dict:
    return {
        "auc_roc": auc_roc(scores, labels),
        "auc_pr": average_precision(scores, labels),
        "f1": f1_score(scores, labels, threshold),
        "confusion": confusion_counts(scores, labels, threshold),
    }
