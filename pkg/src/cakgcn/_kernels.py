"""Hot inner loops, compiled with numba when available.

Every kernel has a pure-numpy twin with identical semantics.  Set
``CAKGCN_NO_NUMBA=1`` in the environment to force the numpy path (useful for
debugging and for the benchmark in ``benchmarks/bench_kernels.py``).
"""

import os

import numpy as np

try:
    import numba
    HAVE_NUMBA = True
except ImportError:  # pragma: no cover
    HAVE_NUMBA = False

USE_NUMBA = HAVE_NUMBA and os.environ.get("CAKGCN_NO_NUMBA", "0") not in ("1", "true", "yes")


# ---------------------------------------------------------------------------
# numpy reference versions

def scatter_add_rows_np(out, idx, rows):
    """out[idx[k]] += rows[k] for every k (duplicates accumulate)."""
    np.add.at(out, idx, rows)


def scatter_add_cols_np(out, idx, vals):
    """out[b, idx[b, n]] += vals[b, n]."""
    b = np.repeat(np.arange(out.shape[0]), idx.shape[1])
    np.add.at(out, (b, idx.ravel()), vals.ravel())


def count_rank_np(scores, target):
    """(number of scores strictly above target, number equal to it)."""
    return int(np.count_nonzero(scores > target)), int(np.count_nonzero(scores == target))


def nearest_centroid_np(x, centroids):
    d2 = ((x[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
    labels = d2.argmin(axis=1)
    return labels, d2[np.arange(x.shape[0]), labels]


def pairwise_dist_np(x):
    sq = (x * x).sum(axis=1)
    d2 = sq[:, None] + sq[None, :] - 2.0 * x @ x.T
    np.maximum(d2, 0.0, out=d2)
    np.fill_diagonal(d2, 0.0)
    return np.sqrt(d2)


# ---------------------------------------------------------------------------
# numba versions

if HAVE_NUMBA:

    @numba.njit(cache=True)
    def scatter_add_rows_nb(out, idx, rows):
        d = out.shape[1]
        for k in range(idx.shape[0]):
            r = idx[k]
            for j in range(d):
                out[r, j] += rows[k, j]

    @numba.njit(cache=True)
    def scatter_add_cols_nb(out, idx, vals):
        for b in range(idx.shape[0]):
            for n in range(idx.shape[1]):
                out[b, idx[b, n]] += vals[b, n]

    @numba.njit(cache=True)
    def count_rank_nb(scores, target):
        above = 0
        equal = 0
        for s in scores:
            if s > target:
                above += 1
            elif s == target:
                equal += 1
        return above, equal

    @numba.njit(cache=True)
    def nearest_centroid_nb(x, centroids):
        n, d = x.shape
        k = centroids.shape[0]
        labels = np.empty(n, dtype=np.int64)
        dist = np.empty(n)
        for i in range(n):
            best = np.inf
            arg = 0
            for c in range(k):
                acc = 0.0
                for j in range(d):
                    t = x[i, j] - centroids[c, j]
                    acc += t * t
                if acc < best:
                    best = acc
                    arg = c
            labels[i] = arg
            dist[i] = best
        return labels, dist

    @numba.njit(cache=True)
    def pairwise_dist_nb(x):
        n, d = x.shape
        out = np.zeros((n, n))
        for i in range(n):
            for k in range(i + 1, n):
                acc = 0.0
                for j in range(d):
                    t = x[i, j] - x[k, j]
                    acc += t * t
                out[i, k] = np.sqrt(acc)
                out[k, i] = out[i, k]
        return out


# ---------------------------------------------------------------------------
# dispatch

def scatter_add_rows(out, idx, rows):
    idx = np.ascontiguousarray(idx, dtype=np.int64).ravel()
    rows = np.ascontiguousarray(rows).reshape(idx.shape[0], out.shape[1])
    if USE_NUMBA:
        scatter_add_rows_nb(out, idx, rows)
    else:
        scatter_add_rows_np(out, idx, rows)


def scatter_add_cols(out, idx, vals):
    idx = np.ascontiguousarray(idx, dtype=np.int64)
    vals = np.ascontiguousarray(vals, dtype=out.dtype)
    if USE_NUMBA:
        scatter_add_cols_nb(out, idx, vals)
    else:
        scatter_add_cols_np(out, idx, vals)


def count_rank(scores, target):
    scores = np.ascontiguousarray(scores, dtype=np.float64)
    if USE_NUMBA:
        above, equal = count_rank_nb(scores, float(target))
        return int(above), int(equal)
    return count_rank_np(scores, target)


def nearest_centroid(x, centroids):
    x = np.ascontiguousarray(x, dtype=np.float64)
    centroids = np.ascontiguousarray(centroids, dtype=np.float64)
    if USE_NUMBA:
        return nearest_centroid_nb(x, centroids)
    return nearest_centroid_np(x, centroids)


def pairwise_dist(x):
    x = np.ascontiguousarray(x, dtype=np.float64)
    if USE_NUMBA:
        return pairwise_dist_nb(x)
    return pairwise_dist_np(x)
