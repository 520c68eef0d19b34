import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cakgcn import metrics as M


def pairwise_auc(scores, labels):
    """O(n^2) oracle: fraction of (pos, neg) pairs ordered correctly, ties worth 1/2."""
    pos = [s for s, y in zip(scores, labels) if y]
    neg = [s for s, y in zip(scores, labels) if not y]
    total = 0.0
    for p in pos:
        for n in neg:
            total += 1.0 if p > n else 0.5 if p == n else 0.0
    return total / (len(pos) * len(neg))


def test_auc_matches_pairwise_oracle_on_random_instances():
    rng = np.random.default_rng(0)
    for _ in range(50):
        n = int(rng.integers(2, 31))
        labels = rng.integers(0, 2, size=n)
        labels[0], labels[1] = 0, 1
        scores = rng.integers(0, 6, size=n) / 5.0  # coarse grid forces ties
        assert M.auc_score(scores, labels) == pairwise_auc(scores, labels)


def test_auc_examples():
    assert M.auc_score([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1]) == 1.0
    assert M.auc_score([0.5] * 6, [0, 1, 0, 1, 1, 0]) == 0.5


def test_auc_single_class_still_reports_f1():
    with pytest.raises(M.UndefinedMetricError) as info:
        M.auc_f1([1.0, 2.0], [1, 1])
    assert info.value.f1 == 1.0


def test_f1_threshold_on_sigmoid():
    # logits 0.0 map to exactly 0.5 and count as positive
    assert M.f1_score([0.0, -1.0, 2.0], [1, 0, 0]) == pytest.approx(2 / 3)
    assert M.f1_score([-1.0, -2.0], [0, 0]) == 0.0


def test_topk_closed_forms():
    assert M.hit_ndcg(1, 10) == (1.0, 1.0)
    assert M.hit_ndcg(3, 10) == (1.0, 0.5)
    assert M.hit_ndcg(15, 10) == (0.0, 0.0)
    assert M.topk(["x", "y", "z"], "z", 10) == (1.0, 0.5)
    with pytest.raises(ValueError):
        M.topk(["x"], "q", 10)
    with pytest.raises(ValueError):
        M.hit_ndcg(0, 10)


def test_ndcg_monotone_and_hr_step():
    prev = 2.0
    for r in range(1, 40):
        h, g = M.hit_ndcg(r, 20)
        assert g <= prev
        assert h == (1.0 if r <= 20 else 0.0)
        prev = g


def test_rank_of_is_pessimistic_on_ties():
    assert M.rank_of([0.3, 0.9, 0.3, 0.1], 0) == 3
    assert M.rank_of([0.3, 0.9, 0.3, 0.1], 1) == 1
    assert M.rank_of([1.0, 1.0, 1.0], 2) == 3


def test_rmse_mae_examples():
    assert M.rmse_mae([1, 2, 3], [1, 2, 3]) == (0.0, 0.0)
    rmse, mae = M.rmse_mae([1, 3], [3, 3])
    assert rmse == pytest.approx(math.sqrt(2)) and mae == 1.0
    with pytest.raises(ValueError):
        M.rmse_mae([], [])
    with pytest.raises(ValueError):
        M.rmse_mae([1.0], [1.0, 2.0])


def test_rmse_mae_recomputation():
    rng = np.random.default_rng(1)
    p, y = rng.normal(size=100), rng.normal(size=100)
    rmse, mae = M.rmse_mae(p, y)
    assert abs(rmse - math.sqrt(sum((a - b) ** 2 for a, b in zip(p, y)) / 100)) < 1e-12
    assert abs(mae - sum(abs(a - b) for a, b in zip(p, y)) / 100) < 1e-12


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(st.integers(-3, 3), st.booleans()), min_size=2, max_size=25))
def test_auc_property(pairs):
    scores = [s for s, _ in pairs]
    labels = [int(y) for _, y in pairs]
    if len(set(labels)) < 2:
        return
    assert M.auc_score(scores, labels) == pytest.approx(pairwise_auc(scores, labels), abs=1e-12)
    # negating every score mirrors the AUC
    assert M.auc_score([-s for s in scores], labels) == pytest.approx(1 - pairwise_auc(scores, labels))
