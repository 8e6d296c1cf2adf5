#!/usr/bin/env python3
"""Time the numba kernels against the pure-numpy fallback.

Run from the repo root:

    python benchmarks/bench_kernels.py [--sizes 8192,131072,4350000] [--reps 20]

The large size matches the message-extractor parameter count that dominates
an embedding step, which is where the fused loops earn their keep.
"""

import argparse
import time

import numpy as np

from wmlab import kernels


def time_fn(fn, args, reps):
    fn(*args)  # warm (and JIT-compile on the numba path)
    t0 = time.perf_counter()
    for _ in range(reps):
        fn(*args)
    return (time.perf_counter() - t0) / reps


def bench_size(n, reps):
    rng = np.random.default_rng(0)
    p = rng.normal(size=n)
    g = rng.normal(size=n)
    m = np.zeros(n)
    v = np.zeros(n)
    x = rng.normal(size=n) * 2

    ref = kernels.numpy_impls()
    rows = []
    rows.append(("adam_update",
                 time_fn(kernels.adam_update, (p, g, m, v, 1e-4, 0.5, 0.999, 1e-8, 0.5, 0.001), reps),
                 time_fn(ref["adam_update"], (p, g, m, v, 1e-4, 0.5, 0.999, 1e-8, 0.5, 0.001), reps)))
    rows.append(("clip_inplace",
                 time_fn(kernels.clip_inplace, (p, 0.5), reps),
                 time_fn(ref["clip_inplace"], (p, 0.5), reps)))
    rows.append(("sigmoid",
                 time_fn(kernels.sigmoid, (x,), reps),
                 time_fn(ref["sigmoid"], (x,), reps)))
    rows.append(("relu",
                 time_fn(kernels.relu, (x,), reps),
                 time_fn(ref["relu"], (x,), reps)))
    rows.append(("relu_grad",
                 time_fn(kernels.relu_grad, (g, x), reps),
                 time_fn(ref["relu_grad"], (g, x), reps)))
    return rows


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--sizes", default="8192,131072,4350000")
    ap.add_argument("--reps", type=int, default=20)
    args = ap.parse_args()

    print(f"active backend: {kernels.backend_name()}")
    if kernels.backend_name() != "numba":
        print("note: WMLAB_BACKEND forces numpy, 'active' column repeats the fallback")
    header = f"{'kernel':<14} {'n':>9} {'active (ms)':>12} {'numpy (ms)':>12} {'speedup':>8}"
    print(header)
    print("-" * len(header))
    for n in [int(s) for s in args.sizes.split(",")]:
        for name, t_active, t_np in bench_size(n, args.reps):
            print(f"{name:<14} {n:>9} {t_active * 1e3:>12.3f} {t_np * 1e3:>12.3f} "
                  f"{t_np / t_active:>8.1f}x")


if __name__ == "__main__":
    main()
