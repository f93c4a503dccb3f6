"""Timing comparison between the compiled kernel core and the NumPy fallback.

Runs every shared kernel on training-shaped inputs, reports best-of-N
wall times plus the numeric gap between backends.

    python3 benchmarks/bench_kernels.py [--repeat N]
"""

import argparse
import time

import numpy as np

from gazedistill._kernels import numpy_backend

try:
    from gazedistill._kernels import cython_backend
except ImportError:
    cython_backend = None


def best_of(fn, repeat):
    fn()  # warm up
    best = float("inf")
    for _ in range(repeat):
        start = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - start)
    return best


def cases(rng):
    x = rng.normal(size=(16, 16, 32, 32))
    w = rng.normal(size=(32, 16, 3, 3))
    gy = rng.normal(size=(16, 32, 32, 32))
    pool_x = rng.normal(size=(16, 16, 64, 64))
    pool_gy3 = rng.normal(size=(16, 16, 64, 64))
    grid = rng.normal(size=(512, 512))
    taps = rng.normal(size=129)
    return [
        ("conv3x3 forward", lambda b: b.conv3x3_forward(x, w, 1)),
        ("conv3x3 backward", lambda b: b.conv3x3_backward(x, w, gy, 1)),
        ("avgpool 3x3 forward", lambda b: b.avgpool2d_forward(pool_x, 3, 1)),
        ("avgpool 3x3 backward", lambda b: b.avgpool2d_backward(pool_gy3, pool_x.shape, 3, 1)),
        ("avgpool 2x2 stride 2", lambda b: b.avgpool2d_forward(pool_x, 2, 2)),
        ("correlate1d 129 taps", lambda b: b.correlate1d(grid, taps, 0)),
    ]


def gap(a, b):
    if isinstance(a, tuple):
        return max(gap(x, y) for x, y in zip(a, b))
    return float(np.max(np.abs(np.asarray(a) - np.asarray(b))))


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--repeat", type=int, default=5, help="timing repeats (default 5)")
    args = parser.parse_args()

    if cython_backend is None:
        print("compiled backend not built; showing NumPy times only")

    rng = np.random.default_rng(0)
    rows = []
    for name, run in cases(rng):
        t_np = best_of(lambda: run(numpy_backend), args.repeat)
        if cython_backend is None:
            rows.append((name, t_np, None, None))
            continue
        t_cy = best_of(lambda: run(cython_backend), args.repeat)
        delta = gap(run(numpy_backend), run(cython_backend))
        rows.append((name, t_np, t_cy, delta))

    print(f"{'kernel':<24} {'numpy':>10} {'cython':>10} {'speedup':>8} {'max|diff|':>10}")
    for name, t_np, t_cy, delta in rows:
        if t_cy is None:
            print(f"{name:<24} {t_np * 1e3:>8.2f}ms")
            continue
        print(
            f"{name:<24} {t_np * 1e3:>8.2f}ms {t_cy * 1e3:>8.2f}ms "
            f"{t_np / t_cy:>7.1f}x {delta:>10.2e}"
        )


if __name__ == "__main__":
    main()
