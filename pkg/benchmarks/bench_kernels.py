"""Timing comparison for the two retrieval kernels.

Runs each kernel through both backends (numba JIT and the pure-numpy
fallback selected by SPECREID_NUMBA=0) on evaluation-sized workloads and
prints a small table. Results are checked for agreement before timing so
a broken backend cannot post a fast number.
"""

import argparse
import os
import time

import numpy as np

from specreid import kernels


def _time(fn, repeats):
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def _with_backend(enabled, fn):
    old = os.environ.get("SPECREID_NUMBA")
    os.environ["SPECREID_NUMBA"] = "1" if enabled else "0"
    try:
        return fn()
    finally:
        if old is None:
            del os.environ["SPECREID_NUMBA"]
        else:
            os.environ["SPECREID_NUMBA"] = old


def bench_pairwise(n_query, n_gallery, dim, repeats):
    rng = np.random.default_rng(0)
    a = rng.standard_normal((n_query, dim))
    b = rng.standard_normal((n_gallery, dim))

    ref = _with_backend(False, lambda: kernels.pairwise_sqdist(a, b))
    got = _with_backend(True, lambda: kernels.pairwise_sqdist(a, b))
    assert np.allclose(ref, got, rtol=1e-10, atol=1e-10)

    t_np = _with_backend(False, lambda: _time(lambda: kernels.pairwise_sqdist(a, b), repeats))
    t_nb = _with_backend(True, lambda: _time(lambda: kernels.pairwise_sqdist(a, b), repeats))
    return t_np, t_nb


def bench_rank_walk(n_query, n_gallery, repeats):
    rng = np.random.default_rng(1)
    match = rng.random((n_query, n_gallery)) < 0.05
    # every query needs at least one match and one junk-free column
    match[:, 0] = True
    junk = rng.random((n_query, n_gallery)) < 0.02
    junk[:, 0] = False

    ref = _with_backend(False, lambda: kernels.rank_walk(match, junk, 20))
    got = _with_backend(True, lambda: kernels.rank_walk(match, junk, 20))
    for r, g in zip(ref, got):
        assert np.array_equal(r, g)

    t_np = _with_backend(False, lambda: _time(lambda: kernels.rank_walk(match, junk, 20), repeats))
    t_nb = _with_backend(True, lambda: _time(lambda: kernels.rank_walk(match, junk, 20), repeats))
    return t_np, t_nb


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeats", type=int, default=5, help="timing repeats, best is kept")
    ap.add_argument("--queries", type=int, default=400)
    ap.add_argument("--gallery", type=int, default=2000)
    ap.add_argument("--dim", type=int, default=256)
    args = ap.parse_args()

    if not kernels.HAVE_NUMBA:
        print("numba is not installed: the 'numba' column below is the fallback path")

    # one throwaway call per kernel so JIT compilation is not timed
    _with_backend(True, lambda: kernels.pairwise_sqdist(np.zeros((2, 3)), np.zeros((2, 3))))
    _with_backend(True, lambda: kernels.rank_walk(
        np.array([[True, False]]), np.array([[False, False]]), 2))

    rows = []
    t_np, t_nb = bench_pairwise(args.queries, args.gallery, args.dim, args.repeats)
    rows.append((f"pairwise_sqdist {args.queries}x{args.gallery} d={args.dim}", t_np, t_nb))
    t_np, t_nb = bench_rank_walk(args.queries, args.gallery, args.repeats)
    rows.append((f"rank_walk {args.queries}x{args.gallery} max_rank=20", t_np, t_nb))

    width = max(len(r[0]) for r in rows)
    print(f"{'workload':<{width}}  {'numpy':>10}  {'numba':>10}  {'speedup':>8}")
    for name, t_np, t_nb in rows:
        print(f"{name:<{width}}  {t_np * 1e3:>8.2f}ms  {t_nb * 1e3:>8.2f}ms  {t_np / t_nb:>7.2f}x")


if __name__ == "__main__":
    main()
