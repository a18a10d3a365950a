"""Timing comparison of the compiled and reference convolution kernels.

Run from anywhere after installing the package:

    python3 benchmarks/bench_kernels.py [--batch 4] [--repeats 5]

Each row times one layer shape for the forward pass, the input gradient, and
the weight gradient, through both implementations:

* ``reference`` — pure numpy im2col + BLAS matmul (src/sarslide/backend/reference.py)
* ``compiled``  — direct Cython loops (src/sarslide/backend/_convkernels.pyx)

The dispatch heuristic in ``sarslide.backend`` comes from this table: the
direct loops win for the narrow layers at the top of the network, BLAS wins
once the channel product ``cin*cout`` grows past roughly 128, and the weight
gradient belongs to BLAS at every size.  Re-run after touching either
implementation; move ``_COMPILED_CHANNEL_LIMIT`` if the crossover moves.
"""

from __future__ import annotations

import argparse
import time

import numpy as np

from sarslide.backend import reference

try:
    from sarslide.backend import _convkernels as ext
except ImportError:
    ext = None

# (cin, cout, height=width); kernel 3x3, stride 1, pad 1 throughout, matching
# the shapes the encoder/decoder stages actually run.
DEFAULT_CASES = (
    (2, 8, 128),
    (8, 8, 128),
    (8, 16, 64),
    (16, 32, 64),
    (32, 64, 32),
    (64, 128, 16),
)


def compiled_forward(x, w):
    xp = np.ascontiguousarray(reference._pad(x, 1))
    y = np.zeros((x.shape[0], w.shape[0], x.shape[2], x.shape[3]),
                 dtype=np.float32)
    ext.conv_fwd_f32(xp, np.ascontiguousarray(w), y, 1)
    return y


def compiled_backward_input(gy, w, in_hw):
    h, wd = in_hw
    gxp = np.zeros((gy.shape[0], w.shape[1], h + 2, wd + 2), dtype=np.float32)
    ext.conv_bwd_input_f32(np.ascontiguousarray(gy), np.ascontiguousarray(w),
                           gxp, 1)
    return np.ascontiguousarray(gxp[:, :, 1:1 + h, 1:1 + wd])


def compiled_backward_weight(x, gy):
    xp = np.ascontiguousarray(reference._pad(x, 1))
    gw = np.zeros((gy.shape[1], x.shape[1], 3, 3), dtype=np.float32)
    ext.conv_bwd_weight_f32(xp, np.ascontiguousarray(gy), gw, 1)
    return gw


def best_of(fn, repeats):
    best = float("inf")
    for _ in range(repeats):
        start = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - start)
    return best


def run(batch, repeats, cases):
    rng = np.random.default_rng(0)
    header = (f"{'shape':>16} {'op':>10} {'reference':>11} {'compiled':>11} "
              f"{'ratio':>7}  winner")
    print(header)
    print("-" * len(header))
    for cin, cout, hw in cases:
        x = rng.standard_normal((batch, cin, hw, hw)).astype(np.float32)
        w = rng.standard_normal((cout, cin, 3, 3)).astype(np.float32)
        gy = rng.standard_normal((batch, cout, hw, hw)).astype(np.float32)
        ops = {
            "forward": (
                lambda: reference.conv2d_forward(x, w, None, 1, 1),
                lambda: compiled_forward(x, w)),
            "bwd_input": (
                lambda: reference.conv2d_backward_input(gy, w, 1, 1, (hw, hw)),
                lambda: compiled_backward_input(gy, w, (hw, hw))),
            "bwd_weight": (
                lambda: reference.conv2d_backward_weight(x, gy, 1, 1, 3, 3),
                lambda: compiled_backward_weight(x, gy)),
        }
        for name, (ref_fn, ext_fn) in ops.items():
            ref_t = best_of(ref_fn, repeats)
            if ext is None:
                print(f"{f'{cin}x{cout}@{hw}':>16} {name:>10} "
                      f"{ref_t * 1e3:>9.2f}ms {'n/a':>11} {'':>7}  reference")
                continue
            np.testing.assert_allclose(ext_fn(), ref_fn(), rtol=2e-4,
                                       atol=2e-4)
            ext_t = best_of(ext_fn, repeats)
            ratio = ext_t / ref_t
            winner = "compiled" if ext_t < ref_t else "reference"
            print(f"{f'{cin}x{cout}@{hw}':>16} {name:>10} "
                  f"{ref_t * 1e3:>9.2f}ms {ext_t * 1e3:>9.2f}ms "
                  f"{ratio:>7.2f}  winner={winner} (cin*cout={cin * cout})")
    if ext is None:
        print("\ncompiled extension not built; only the reference backend "
              "was timed")


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--batch", type=int, default=4)
    parser.add_argument("--repeats", type=int, default=5)
    parser.add_argument("--quick", action="store_true",
                        help="small shapes only, for smoke testing")
    args = parser.parse_args()
    cases = DEFAULT_CASES[:2] if args.quick else DEFAULT_CASES
    run(args.batch, args.repeats, cases)


if __name__ == "__main__":
    main()
