"""Time the compiled and numpy convolution kernels on the shapes the models use.

Run with ``python benchmarks/bench_kernels.py [--repeat N]``.  Each row times
one forward plus both backward kernels and reports the best of N runs.
"""

import argparse
import timeit

import numpy as np

from bpfpn_lab import _pykernels

try:
    from bpfpn_lab import _ckernels
except ImportError:
    _ckernels = None

# (input shape, out channels, kernel) covering every conv in the 64x64 models at batch 4
CASES = [
    ((4, 1, 16, 16), 8, 3),    # backbone stage 1
    ((4, 8, 8, 8), 16, 3),     # backbone stage 2
    ((4, 16, 4, 4), 32, 3),    # backbone stage 3
    ((4, 32, 8, 8), 16, 3),    # fusion
    ((4, 32, 8, 8), 16, 1),    # GILS projection
    ((4, 16, 8, 8), 1, 1),     # head
]


def bench(impl, x, w, gy, k, repeat):
    pad = (k - 1) // 2

    def step():
        impl.conv2d_forward(x, w, pad)
        impl.conv2d_backward_input(gy, w, pad)
        impl.conv2d_backward_weight(x, gy, k, k, pad)

    number = 50
    return min(timeit.repeat(step, number=number, repeat=repeat)) / number * 1e3


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    rng = np.random.default_rng(0)
    print(f"{'input':>16} {'out':>4} {'k':>2} {'numpy ms':>9} {'cython ms':>10} {'speedup':>8}")
    for shape, out_c, k in CASES:
        x = rng.normal(size=shape)
        w = rng.normal(size=(out_c, shape[1], k, k))
        gy = rng.normal(size=(shape[0], out_c, shape[2], shape[3]))
        py = bench(_pykernels, x, w, gy, k, args.repeat)
        if _ckernels is None:
            print(f"{str(shape):>16} {out_c:>4} {k:>2} {py:9.3f} {'n/a':>10} {'':>8}")
            continue
        cy = bench(_ckernels, x, w, gy, k, args.repeat)
        print(f"{str(shape):>16} {out_c:>4} {k:>2} {py:9.3f} {cy:10.3f} {py / cy:7.2f}x")


if __name__ == "__main__":
    main()
