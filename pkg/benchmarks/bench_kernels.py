"""Timing comparison of the compiled and pure-numpy nearest-neighbor kernels.

Run with: python benchmarks/bench_kernels.py
"""

import time

import numpy as np

from hoirecon import _kernels_py

try:
    from hoirecon import _kernels
except ImportError:
    _kernels = None

SIZES = ((128, 128), (512, 512), (1024, 1024), (2048, 2048), (4096, 1024))
REPEATS = 5


def best_of(fn, points, queries):
    fn(points, queries)  # warm up
    times = []
    for _ in range(REPEATS):
        start = time.perf_counter()
        fn(points, queries)
        times.append(time.perf_counter() - start)
    return min(times)


def main():
    rng = np.random.default_rng(0)
    print(f"{'points':>8} {'queries':>8} {'python':>12} {'cython':>12} "
          f"{'speedup':>8}")
    for n_points, n_queries in SIZES:
        points = np.ascontiguousarray(rng.normal(size=(n_points, 3)))
        queries = np.ascontiguousarray(rng.normal(size=(n_queries, 3)))
        t_py = best_of(_kernels_py.nn_batch, points, queries)
        if _kernels is None:
            print(f"{n_points:>8} {n_queries:>8} {t_py * 1e3:>10.2f}ms "
                  f"{'absent':>12} {'-':>8}")
            continue
        t_cy = best_of(_kernels.nn_batch, points, queries)
        idx_py, d2_py = _kernels_py.nn_batch(points, queries)
        idx_cy, d2_cy = _kernels.nn_batch(points, queries)
        assert np.array_equal(idx_py, idx_cy) and np.array_equal(d2_py, d2_cy)
        print(f"{n_points:>8} {n_queries:>8} {t_py * 1e3:>10.2f}ms "
              f"{t_cy * 1e3:>10.2f}ms {t_py / t_cy:>7.1f}x")


if __name__ == "__main__":
    main()
