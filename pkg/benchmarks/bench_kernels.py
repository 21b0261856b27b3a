"""Benchmark the compiled backbone kernels against the numpy fallback.

Usage: python benchmarks/bench_kernels.py [--repeat-seconds 0.5]

Measures one forward + backward pass per call at several (batch, tokens,
width, hidden, layers) operating points, including the default training and
ablation configurations. The compiled core pays off where per-op dispatch
overhead dominates (small batches, single-sample traces); at large batched
GEMM sizes both backends ride the same BLAS.
"""

import argparse
import time

import numpy as np

from ekpc import kernels_py
from ekpc.numerics import SeededRng

try:
    from ekpc import _kernels
except ImportError:
    _kernels = None

POINTS = [
    # (B, d_t, d, d_h, L)          what it represents
    (1, 4, 16, 4, 3),      # single-sample trace at gradient-check scale
    (8, 4, 32, 8, 4),      # small minibatch
    (48, 4, 32, 8, 4),     # default training batch (ablation config)
    (256, 4, 32, 8, 4),    # inference chunk
    (128, 8, 64, 16, 6),   # larger-than-default model
]


def timed(fn, budget: float) -> float:
    fn()  # warm up
    t0 = time.perf_counter()
    calls = 0
    while time.perf_counter() - t0 < budget:
        fn()
        calls += 1
    return (time.perf_counter() - t0) / calls


def bench_point(impl, b, d_t, d, d_h, layers, budget):
    rng = SeededRng(0)
    w_blocks = rng.derive(1).standard_normal((layers, d, d))
    w_down = rng.derive(2).standard_normal((layers, d, d_h)) * 0.3
    w_up = rng.derive(3).standard_normal((layers, d_h, d)) * 0.3
    x = rng.derive(4).standard_normal((b, d_t, d))
    dfeat = rng.derive(5).standard_normal((b, d))

    def step():
        xs, ut, th = impl.forward_batch(x, w_blocks, w_down, w_up, False)
        impl.backward_batch(dfeat, xs, ut, th, w_blocks, w_down, w_up, False)

    return timed(step, budget)


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--repeat-seconds", type=float, default=0.5,
                        help="measurement budget per cell")
    args = parser.parse_args()

    if _kernels is None:
        print("compiled extension not built; benchmarking the fallback only")
    header = f"{'B':>5} {'d_t':>4} {'d':>4} {'d_h':>4} {'L':>3} {'python':>12} {'compiled':>12} {'speedup':>8}"
    print(header)
    print("-" * len(header))
    for point in POINTS:
        t_py = bench_point(kernels_py, *point, args.repeat_seconds)
        if _kernels is not None:
            t_cy = bench_point(_kernels, *point, args.repeat_seconds)
            ratio = f"{t_py / t_cy:7.2f}x"
            cy_cell = f"{t_cy * 1e6:9.1f} us"
        else:
            ratio, cy_cell = "-", "-"
        b, d_t, d, d_h, layers = point
        print(f"{b:>5} {d_t:>4} {d:>4} {d_h:>4} {layers:>3} "
              f"{t_py * 1e6:9.1f} us {cy_cell:>12} {ratio:>8}")


if __name__ == "__main__":
    main()
