import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cakgcn import _kernels as K

needs_numba = pytest.mark.skipif(not K.HAVE_NUMBA, reason="numba not installed")


def test_dispatch_flag_matches_environment(monkeypatch):
    import importlib

    monkeypatch.setenv("CAKGCN_NO_NUMBA", "1")
    mod = importlib.reload(K)
    try:
        assert mod.USE_NUMBA is False
    finally:
        monkeypatch.delenv("CAKGCN_NO_NUMBA")
        importlib.reload(K)


def test_scatter_add_rows_duplicates():
    out = np.zeros((3, 2))
    K.scatter_add_rows(out, np.array([0, 2, 0]), np.array([[1.0, 1.0], [2.0, 3.0], [4.0, 5.0]]))
    assert out.tolist() == [[5, 6], [0, 0], [2, 3]]


def test_count_rank():
    assert K.count_rank(np.array([0.3, 0.9, 0.3, 0.1]), 0.3) == (1, 2)


@needs_numba
@settings(max_examples=40, deadline=None)
@given(st.integers(1, 30), st.integers(1, 5), st.integers(0, 2**31))
def test_numba_and_numpy_twins_agree(n, d, seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(n, d))
    c = rng.normal(size=(min(n, 4), d))

    l1, d1 = K.nearest_centroid_np(x, c)
    l2, d2 = K.nearest_centroid_nb(x, c)
    assert np.array_equal(l1, l2) and np.allclose(d1, d2, atol=1e-12)
    assert np.allclose(K.pairwise_dist_np(x), K.pairwise_dist_nb(x), atol=1e-6)

    idx = rng.integers(n, size=3 * n)
    rows = rng.normal(size=(3 * n, d))
    a, b = np.zeros((n, d)), np.zeros((n, d))
    K.scatter_add_rows_np(a, idx, rows)
    K.scatter_add_rows_nb(b, idx, rows)
    assert np.allclose(a, b, atol=1e-12)

    cols = rng.integers(d, size=(n, 3))
    vals = rng.normal(size=(n, 3))
    a, b = np.zeros((n, d)), np.zeros((n, d))
    K.scatter_add_cols_np(a, cols, vals)
    K.scatter_add_cols_nb(b, cols, vals)
    assert np.allclose(a, b, atol=1e-12)

    s = np.round(rng.normal(size=n), 1)
    assert K.count_rank_np(s, s[0]) == tuple(int(v) for v in K.count_rank_nb(s, s[0]))


def test_pairwise_dist_against_loops():
    x = np.random.default_rng(4).normal(size=(6, 3))
    d = K.pairwise_dist(x)
    for i in range(6):
        for j in range(6):
            assert abs(d[i, j] - np.sqrt(((x[i] - x[j]) ** 2).sum())) < 1e-9
