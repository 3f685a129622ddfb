"""Benchmark the numpy and numba kernel backends side by side.

Times each hot kernel at training-sized shapes (batch 4, float32 by
default) and prints a per-kernel comparison. Run from the repo root:

    python3 benchmarks/bench_kernels.py
    python3 benchmarks/bench_kernels.py --dtype float64 --repeats 50
"""

import argparse
import time

import numpy as np

from occflow import kernels_numpy

try:
    from occflow import kernels_numba
except ImportError:
    kernels_numba = None


def _time(fn, args, repeats):
    fn(*args)  # warm-up (triggers jit compilation on the numba side)
    t0 = time.perf_counter()
    for _ in range(repeats):
        fn(*args)
    return (time.perf_counter() - t0) / repeats * 1000.0


def build_cases(dtype):
    rng = np.random.default_rng(0)

    def arr(*shape):
        return rng.normal(size=shape).astype(dtype)

    x = arr(4, 64, 16, 16)
    w = arr(48, 64, 3, 3)
    b = arr(48)
    gy = arr(4, 48, 16, 16)

    feat = arr(4, 16, 32, 32)
    flow = arr(4, 2, 32, 32)
    gwarp = arr(4, 16, 32, 32)

    f1 = arr(4, 16, 16, 16)
    f2 = arr(4, 16, 16, 16)
    gcorr = arr(4, 81, 16, 16)

    gray = arr(4, 1, 64, 64)
    gcen = arr(4, 48, 64, 64)

    small = arr(4, 2, 16, 16)
    gres = arr(4, 2, 32, 32)

    return [
        ("conv2d_forward", (x, w, b, 1, 1, 1)),
        ("conv2d_backward_input", (gy, w, 1, 1, 1, 16, 16)),
        ("conv2d_backward_weight", (x, gy, 3, 3, 1, 1, 1)),
        ("bilinear_warp_forward", (feat, flow, 0.0, 0.0)),
        ("bilinear_warp_backward", (feat, flow, 0.0, 0.0, gwarp)),
        ("correlation_forward", (f1, f2, 4)),
        ("correlation_backward", (f1, f2, 4, gcorr)),
        ("census_forward", (gray, 7)),
        ("census_backward", (gray, 7, gcen)),
        ("resize_bilinear_forward", (small, 32, 32)),
        ("resize_bilinear_backward", (gres, 16, 16)),
    ]


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--dtype", default="float32",
                        choices=["float32", "float64"])
    parser.add_argument("--repeats", type=int, default=20)
    args = parser.parse_args()

    cases = build_cases(np.dtype(args.dtype))
    header = f"{'kernel':<26} {'numpy ms':>10} {'numba ms':>10} {'speedup':>8}"
    print(f"dtype={args.dtype}  repeats={args.repeats}")
    print(header)
    print("-" * len(header))
    for name, case_args in cases:
        t_np = _time(getattr(kernels_numpy, name), case_args, args.repeats)
        if kernels_numba is None:
            print(f"{name:<26} {t_np:>10.3f} {'n/a':>10} {'n/a':>8}")
            continue
        t_nb = _time(getattr(kernels_numba, name), case_args, args.repeats)
        print(f"{name:<26} {t_np:>10.3f} {t_nb:>10.3f} {t_np / t_nb:>7.1f}x")
    if kernels_numba is None:
        print("numba not installed; only the numpy backend was timed")


if __name__ == "__main__":
    main()
