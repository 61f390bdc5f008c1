#!/usr/bin/env python3
"""Benchmark the numba kernels against the pure-numpy fallback.

Times the two hot kernels (3D convolution, trilinear resampling) on
inference-like shapes and checks that both backends agree. Run:

    python3 benchmarks/bench_kernels.py [--quick]

Setting VOLSEG_NO_NUMBA=1 makes the package itself fall back to numpy;
this script always times both paths directly (when numba is available).
"""

import argparse
import time

import numpy as np

from volseg import _kernels


def timeit(fn, *args, repeats=3):
    best = float("inf")
    result = None
    for _ in range(repeats):
        start = time.perf_counter()
        result = fn(*args)
        best = min(best, time.perf_counter() - start)
    return best, result


def bench_conv(quick):
    cases = [
        ("stage-1 conv 3x3x3, 1->32ch, 64^3", 1, 32, 3, (64, 64, 64)),
        ("stage-4 conv 3x3x3, 128->256ch, 16^3", 128, 256, 3, (16, 16, 16)),
        ("bottleneck conv 1x1x1, 512->1024ch, 8^3", 512, 1024, 1, (8, 8, 8)),
    ]
    if quick:
        cases = [("toy conv 3x3x3, 2->4ch, 16^3", 2, 4, 3, (16, 16, 16))]
    rng = np.random.default_rng(0)
    for label, cin, cout, k, dims in cases:
        padded = rng.normal(size=(cin, dims[0] + k - 1, dims[1] + k - 1, dims[2] + k - 1))
        padded = padded.astype(np.float32)
        weights = rng.normal(size=(cout, cin, k, k, k)).astype(np.float32)
        t_np, out_np = timeit(_kernels._conv3d_numpy, padded, weights)
        row = f"{label:<42} numpy {t_np * 1e3:9.2f} ms"
        if _kernels.NUMBA_ENABLED:
            _kernels._conv3d_numba(padded, weights)  # warm the JIT
            t_nb, out_nb = timeit(_kernels._conv3d_numba, padded, weights)
            agree = np.allclose(out_np, out_nb, atol=1e-4)
            row += f"   numba {t_nb * 1e3:9.2f} ms   speedup {t_np / t_nb:5.1f}x   agree {agree}"
        print(row)


def bench_trilinear(quick):
    dims = (64, 64, 32) if quick else (256, 256, 64)
    target = tuple(int(1.6 * d) for d in dims)
    rng = np.random.default_rng(1)
    src = rng.normal(size=dims).astype(np.float32)
    coords = [np.clip(np.linspace(-0.3, d - 0.7, n), 0, d - 1)
              for d, n in zip(dims, target)]
    t_np, out_np = timeit(_kernels._trilinear_numpy, src, *coords)
    row = f"{'trilinear resample %s -> %s' % (dims, target):<42} numpy {t_np * 1e3:9.2f} ms"
    if _kernels.NUMBA_ENABLED:
        _kernels._trilinear_numba(src, *coords)
        t_nb, out_nb = timeit(_kernels._trilinear_numba, src, *coords)
        agree = np.allclose(out_np, out_nb, atol=1e-5)
        row += f"   numba {t_nb * 1e3:9.2f} ms   speedup {t_np / t_nb:5.1f}x   agree {agree}"
    print(row)


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--quick", action="store_true", help="small shapes for a fast sanity run")
    args = parser.parse_args()
    print(f"active package backend: {_kernels.backend()}")
    if not _kernels.NUMBA_ENABLED:
        print("numba unavailable or disabled; timing the numpy path only")
    bench_conv(args.quick)
    bench_trilinear(args.quick)


if __name__ == "__main__":
    main()
