#!/usr/bin/env python3
"""Benchmark the two kernel backends (numpy im2col+BLAS vs numba loops) on
the convolution shapes the networks actually use, plus one full generator
training step. Select the faster backend for your machine via
INTERSLICE_BACKEND; numpy is the default because BLAS wins on typical CPUs.

Usage: python benchmarks/bench_kernels.py [--repeat N]
"""

import argparse
import time

import numpy as np

from interslice import backend, kernels

SHAPES = [
    # (label, n, cin, cout, h, stride)
    ("stem 2->16 @64", 4, 2, 16, 64, 2),
    ("mid 16->32 @32", 4, 16, 32, 32, 2),
    ("deep 32->64 @16", 4, 32, 64, 16, 2),
    ("res 64->64 @8", 4, 64, 64, 8, 1),
]


def time_call(fn, repeat):
    fn()  # warmup / JIT
    start = time.perf_counter()
    for _ in range(repeat):
        fn()
    return (time.perf_counter() - start) / repeat


def bench_conv(repeat):
    rows = []
    for label, n, cin, cout, h, stride in SHAPES:
        rng = np.random.default_rng(0)
        x = rng.standard_normal((n, cin, h, h))
        w = rng.standard_normal((cout, cin, 3, 3))
        b = np.zeros(cout)
        y = kernels.conv2d_forward(x, w, b, stride, 1, 1)
        gy = rng.standard_normal(y.shape)
        ops = {
            "fwd": lambda: kernels.conv2d_forward(x, w, b, stride, 1, 1),
            "bwd_in": lambda: kernels.conv2d_backward_input(gy, w, stride, 1, 1, h, h),
            "bwd_w": lambda: kernels.conv2d_backward_weight(x, gy, stride, 1, 1, 3, 3),
        }
        for op_name, fn in ops.items():
            entry = {"shape": label, "op": op_name}
            for name in ("numpy", "numba") if backend.numba_available() else ("numpy",):
                prev = backend.set_backend(name)
                try:
                    entry[name] = time_call(fn, repeat)
                finally:
                    backend.set_backend(prev)
            rows.append(entry)
    return rows


def bench_generator_step(repeat):
    from interslice import gan

    cfg = gan.GanConfig(widths=(16, 32, 64), disc_widths=(16, 32, 64), seed=0,
                        batch_size=4, dtype="float64")
    rng = np.random.default_rng(1)
    lefts = rng.random((4, 2, 64, 64))
    rights = rng.random((4, 2, 64, 64))

    def one_step():
        gen = one_step.gen
        outs = gen.forward_ratios(lefts, rights, gan.TRAIN_RATIOS)
        grads = {r: np.ones_like(o) / o.size for r, o in outs.items()}
        gen.backward_ratios(grads)
        gen.zero_grad()

    rows = []
    for name in ("numpy", "numba") if backend.numba_available() else ("numpy",):
        prev = backend.set_backend(name)
        try:
            one_step.gen = gan.InterSliceGenerator(cfg)
            rows.append({"shape": "generator fwd+bwd @64", "op": "step",
                         name: time_call(one_step, repeat)})
        finally:
            backend.set_backend(prev)
    merged = rows[0]
    for extra in rows[1:]:
        merged.update({k: v for k, v in extra.items() if k not in ("shape", "op")})
    return [merged]


def main():
    parser = argparse.ArgumentParser()
    parser.add_argument("--repeat", type=int, default=20)
    args = parser.parse_args()

    rows = bench_conv(args.repeat) + bench_generator_step(max(3, args.repeat // 4))
    has_numba = backend.numba_available()
    header = f"{'shape':<22} {'op':<7} {'numpy ms':>10}"
    if has_numba:
        header += f" {'numba ms':>10} {'numpy speedup':>14}"
    print(header)
    print("-" * len(header))
    for row in rows:
        line = f"{row['shape']:<22} {row['op']:<7} {row['numpy'] * 1e3:>10.3f}"
        if has_numba and "numba" in row:
            ratio = row["numba"] / row["numpy"]
            line += f" {row['numba'] * 1e3:>10.3f} {ratio:>13.1f}x"
        print(line)


if __name__ == "__main__":
    main()
