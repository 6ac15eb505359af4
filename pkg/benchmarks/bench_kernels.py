"""Time the numba and numpy kernel paths on model-sized inputs.

    python benchmarks/bench_kernels.py [--repeat 5] [--batch 32]

Both implementations are called directly, so the HMFDETECT_NUMBA flag does
not matter here.  The first numba call (JIT compile or cache load) is
excluded from the timings.
"""

import argparse
import time

import numpy as np

from hmfdetect import kernels

# (side, cin, cout) for the three stages of the default plain model
LAYERS = [(64, 3, 8), (32, 8, 16), (16, 16, 16)]


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t)
    return min(times)


def step(impl, x, w, b):
    fwd = getattr(kernels, f"conv2d_forward_{impl}")
    bwd = getattr(kernels, f"conv2d_backward_{impl}")
    pool = getattr(kernels, f"maxpool_forward_{impl}")
    unpool = getattr(kernels, f"maxpool_backward_{impl}")

    def run():
        y = fwd(x, w, b, 1, 1)
        p, arg = pool(y, 2)
        dy = unpool(np.ones_like(p), arg, y.shape, 2)
        bwd(x, w, dy, 1, 1)

    return run


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--batch", type=int, default=32)
    args = ap.parse_args()
    impls = ["numpy"] + (["numba"] if kernels.HAVE_NUMBA else [])
    rng = np.random.default_rng(0)
    print(f"batch {args.batch}, best of {args.repeat}; conv 3x3 same + 2x2 max-pool, forward and backward")
    print(f"{'layer':>16}  " + "  ".join(f"{i:>10}" for i in impls) + ("  speedup" if len(impls) == 2 else ""))
    for side, cin, cout in LAYERS:
        x = rng.normal(size=(args.batch, side, side, cin))
        w = rng.normal(size=(3, 3, cin, cout))
        b = rng.normal(size=cout)
        row = {}
        for impl in impls:
            fn = step(impl, x, w, b)
            fn()  # warm-up
            row[impl] = best_of(fn, args.repeat)
        label = f"{side}x{side} {cin}->{cout}"
        line = f"{label:>16}  " + "  ".join(f"{row[i] * 1e3:8.2f}ms" for i in impls)
        if len(impls) == 2:
            line += f"  {row['numpy'] / row['numba']:6.2f}x"
        print(line)


if __name__ == "__main__":
    main()
