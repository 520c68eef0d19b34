import math

import numpy as np
from scipy.stats import rankdata

from . import _kernels
from .tensor import stable_sigmoid


class UndefinedMetricError(ValueError):
    """Raised when a metric has no value for the input (AUC with one class)."""

    def __init__(self, msg, f1=None):
        super().__init__(msg)
        self.f1 = f1


def rmse_mae(predictions, labels):
    p = np.asarray(predictions, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    if p.shape != y.shape:
        raise ValueError(f"length mismatch: {p.shape} vs {y.shape}")
    if p.size == 0:
        raise ValueError("rmse/mae of an empty list")
    err = p - y
    return math.sqrt(float(np.mean(err * err))), float(np.mean(np.abs(err)))


def auc_score(scores, labels):
    """Mann-Whitney AUC; tied scores count one half."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels) > 0.5
    n_pos = int(y.sum())
    n_neg = len(y) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUC needs both positive and negative labels")
    ranks = rankdata(s)  # average ranks make ties worth 0.5
    u = ranks[y].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def f1_score(scores, labels, threshold=0.5):
    """F1 of the decision sigmoid(score) >= threshold."""
    pred = stable_sigmoid(np.asarray(scores, dtype=np.float64)) >= threshold
    y = np.asarray(labels) > 0.5
    tp = int(np.sum(pred & y))
    fp = int(np.sum(pred & ~y))
    fn = int(np.sum(~pred & y))
    denom = 2 * tp + fp + fn
    return 2.0 * tp / denom if denom else 0.0


def auc_f1(scores, labels, threshold=0.5):
    f1 = f1_score(scores, labels, threshold)
    try:
        auc = auc_score(scores, labels)
    except UndefinedMetricError as exc:
        raise UndefinedMetricError(str(exc), f1=f1) from None
    return auc, f1


def hit_ndcg(rank, k):
    """Single-relevant-item HR@k and NDCG@k for a 1-based rank."""
    if rank < 1:
        raise ValueError(f"rank must be >= 1, got {rank}")
    if rank > k:
        return 0.0, 0.0
    return 1.0, 1.0 / math.log2(rank + 1)


def topk(ranked_candidates, held_out, k):
    """HR@k and NDCG@k of ``held_out`` inside an already ranked candidate list."""
    for pos, c in enumerate(ranked_candidates):
        if c == held_out:
            return hit_ndcg(pos + 1, k)
    raise ValueError(f"held-out item {held_out!r} is not among the candidates")


def rank_of(scores, target_index):
    """1-based rank of scores[target_index]; ties with other candidates rank below it."""
    scores = np.asarray(scores, dtype=np.float64)
    above, equal = _kernels.count_rank(scores, scores[target_index])
    return above + equal  # equal includes the target itself
