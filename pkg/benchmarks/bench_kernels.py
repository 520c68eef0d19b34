"""Time each numba kernel against its numpy twin.

    python3 benchmarks/bench_kernels.py [--repeat 5]

The numba column is empty when numba is missing.  Compilation happens in a
warm-up call and is not timed.
"""

import argparse
import time

import numpy as np

from cakgcn import _kernels as K


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t)
    return min(times)


def cases(rng):
    # shapes roughly match one training batch and one clustering pass
    rows = rng.normal(size=(256 * 3, 128))
    idx = rng.integers(4000, size=256 * 3)
    vals = rng.normal(size=(768, 40))
    cols = rng.integers(5, size=(768, 40))
    scores = rng.normal(size=4082)
    x = rng.random(size=(957, 5))
    cents = rng.random(size=(3, 5))
    return {
        "scatter_add_rows": (lambda f: f(np.zeros((4000, 128)), idx, rows)),
        "scatter_add_cols": (lambda f: f(np.zeros((768, 5)), cols, vals)),
        "count_rank": (lambda f: f(scores, scores[17])),
        "nearest_centroid": (lambda f: f(x, cents)),
        "pairwise_dist": (lambda f: f(x)),
    }


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args(argv)
    rng = np.random.default_rng(0)
    print(f"{'kernel':<18} {'numpy ms':>10} {'numba ms':>10} {'speedup':>8}")
    for name, call in cases(rng).items():
        np_fn = getattr(K, f"{name}_np")
        t_np = best_of(lambda: call(np_fn), args.repeat)
        if K.HAVE_NUMBA:
            nb_fn = getattr(K, f"{name}_nb")
            call(nb_fn)
            t_nb = best_of(lambda: call(nb_fn), args.repeat)
            print(f"{name:<18} {1e3 * t_np:>10.3f} {1e3 * t_nb:>10.3f} {t_np / t_nb:>7.1f}x")
        else:
            print(f"{name:<18} {1e3 * t_np:>10.3f} {'':>10} {'':>8}")


if __name__ == "__main__":
    main()
