"""Benchmark: compiled vs numpy nearest-surface-distance kernel."""

import time

import numpy as np

from voxadv import metrics
from voxadv._surfdist_py import directed_min_distances as kernel_py

try:
    from voxadv._surfdist import directed_min_distances as kernel_c
except ImportError:
    kernel_c = None


def time_kernel(kernel, a, b, repeats=3):
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        kernel(a, b)
        best = min(best, time.perf_counter() - t0)
    return best


def main():
    rng = np.random.default_rng(0)
    print(f"active backend: {metrics.KERNEL_BACKEND}")
    print(f"{'points':>10} {'numpy (s)':>12} {'compiled (s)':>14} {'speedup':>9}")
    for n in (500, 2000, 8000):
        a = rng.uniform(0, 64, size=(n, 3))
        b = rng.uniform(0, 64, size=(n, 3))
        t_py = time_kernel(kernel_py, a, b)
        if kernel_c is None:
            print(f"{n:>10} {t_py:>12.4f} {'(not built)':>14} {'-':>9}")
            continue
        t_c = time_kernel(kernel_c, a, b)
        assert np.array_equal(kernel_py(a, b), kernel_c(a, b))
        print(f"{n:>10} {t_py:>12.4f} {t_c:>14.4f} {t_py / t_c:>8.1f}x")


if __name__ == "__main__":
    main()
