"""Compare the compiled and numpy kernel backends (plus a plain-Python loop for scale).

Usage: python3 benchmarks/bench_kernels.py [--events N] [--repeat R]
"""

import argparse
import math
import time

import numpy as np

from evflow import kernels


def naive_voxel(xs, ys, pidx, tn, D, H, W):
    grid = np.zeros((2, D, H, W))
    for x, y, p, t in zip(xs.tolist(), ys.tolist(), pidx.tolist(), tn.tolist()):
        b = int(math.floor(t))
        for bb, wt in ((b, 1.0 - (t - b)), (b + 1, t - b)):
            if wt > 0 and bb < D and 0 <= x < W and 0 <= y < H:
                grid[p, bb, y, x] += wt
    return grid


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--events", type=int, default=200_000)
    ap.add_argument("--size", type=int, default=256)
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    rng = np.random.default_rng(0)
    n, S, D = args.events, args.size, 8
    xs = rng.integers(0, S, n).astype(np.float64)
    ys = rng.integers(0, S, n).astype(np.float64)
    pidx = rng.integers(0, 2, n)
    tn = np.sort(rng.uniform(0, D - 1, n))
    img = rng.random((1, S, S))
    cx = rng.uniform(-2, S + 1, (S, S))
    cy = rng.uniform(-2, S + 1, (S, S))
    g = rng.normal(size=(1, S, S))

    impls = kernels.implementations()
    print(f"default backend: {kernels.BACKEND}; {n} events, {S}x{S} sensor, D={D}")
    rows = []
    for name, impl in sorted(impls.items()):
        rows.append((f"voxel_scatter [{name}]",
                     best_of(lambda: kernels.voxel_scatter(xs, ys, pidx, tn, D, S, S, impl=impl), args.repeat)))
        rows.append((f"bilinear_forward [{name}]",
                     best_of(lambda: kernels.bilinear_forward(img, cx, cy, impl=impl), args.repeat)))
        rows.append((f"bilinear_backward [{name}]",
                     best_of(lambda: kernels.bilinear_backward(img, cx, cy, g, impl=impl), args.repeat)))
    rows.append(("voxel_scatter [python loop]", best_of(lambda: naive_voxel(
        xs.astype(np.int64), ys.astype(np.int64), pidx, tn, D, S, S), 1)))
    for label, sec in rows:
        print(f"{label:34s} {sec * 1e3:10.2f} ms")
    if "cython" in impls:
        a = kernels.voxel_scatter(xs, ys, pidx, tn, D, S, S, impl=impls["cython"])
        b = kernels.voxel_scatter(xs, ys, pidx, tn, D, S, S, impl=impls["numpy"])
        print("backends bit-identical:", a.tobytes() == b.tobytes())


if __name__ == "__main__":
    main()
