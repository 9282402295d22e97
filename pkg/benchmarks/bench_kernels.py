#!/usr/bin/env python3
"""Benchmark the numba kernels against the pure-numpy fallback.

Runs each hot kernel at training-realistic shapes, then a full convolution
forward+backward composite through the engine under both backends, and
prints per-kernel timings with speedups.  Use --repeat to stabilize numbers.

The two backends are bit-identical (asserted here on every shape); the only
difference is speed.
"""

import argparse
import time

import numpy as np

import medtex  # noqa: F401  (pins BLAS threads)
from medtex.kernels import numba_backend, numpy_backend


def _time(fn, repeat):
    fn()  # warm (JIT compile / page in)
    t0 = time.perf_counter()
    for _ in range(repeat):
        out = fn()
    return (time.perf_counter() - t0) / repeat, out


def bench_kernels(repeat):
    rng = np.random.default_rng(0)
    x64 = rng.random((16, 64, 64, 64)).astype(np.float32)   # encoder-scale map
    x16 = rng.random((16, 256, 16, 16)).astype(np.float32)  # decoder-scale map
    g64 = rng.random((16, 64, 128, 128)).astype(np.float32)
    cols1 = rng.random((64 * 9, 64 * 64)).astype(np.float32)
    colsb = rng.random((256 * 9, 16 * 16 * 16)).astype(np.float32)

    cases = [
        ("im2col_t 64ch@64px", lambda m: m.im2col_t(x64[0], 3, 1)),
        ("col2im_t 64ch@64px", lambda m: m.col2im_t(cols1, 64, 64, 64, 3, 1)),
        ("im2col_t_batch 256ch@16px", lambda m: m.im2col_t_batch(x16, 3, 1)),
        ("col2im_t_batch 256ch@16px", lambda m: m.col2im_t_batch(colsb, 16, 256, 16, 16, 3, 1)),
        ("maxpool2x2", lambda m: m.maxpool2x2(x64)),
        ("maxpool2x2_backward", lambda m: m.maxpool2x2_backward(
            x64[:, :, :32, :32], np.zeros((16, 64, 32, 32), np.uint8))),
        ("sumpool 4x4", lambda m: m.sumpool(x64, 4, 4)),
        ("sumpool_backward 4x4", lambda m: m.sumpool_backward(x64[:, :, :16, :16], 4, 4)),
        ("upsample2x", lambda m: m.upsample2x(x64)),
        ("upsample2x_backward", lambda m: m.upsample2x_backward(g64)),
    ]

    print(f"{'kernel':<28} {'numpy':>10} {'numba':>10} {'speedup':>9}")
    for name, fn in cases:
        t_np, out_np = _time(lambda: fn(numpy_backend), repeat)
        t_nb, out_nb = _time(lambda: fn(numba_backend), repeat)
        a = out_np[0] if isinstance(out_np, tuple) else out_np
        b = out_nb[0] if isinstance(out_nb, tuple) else out_nb
        assert np.array_equal(a, b), f"backend mismatch in {name}"
        print(f"{name:<28} {t_np * 1e3:>8.2f}ms {t_nb * 1e3:>8.2f}ms {t_np / t_nb:>8.2f}x")


def bench_conv_composite(repeat):
    """Full engine conv fwd+bwd on an explainer-scale layer, per backend."""
    import importlib

    from medtex import engine, kernels

    rng = np.random.default_rng(1)
    x = rng.random((8, 64, 64, 64)).astype(np.float32)
    w = rng.standard_normal((64, 64, 3, 3)).astype(np.float32) * 0.05
    b = np.zeros(64, np.float32)

    results = {}
    for impl in (numpy_backend, numba_backend):
        for name in ("im2col_t", "col2im_t", "im2col_t_batch", "col2im_t_batch",
                     "maxpool2x2", "maxpool2x2_backward", "sumpool",
                     "sumpool_backward", "upsample2x", "upsample2x_backward"):
            setattr(kernels, name, getattr(impl, name))

        def step():
            xt = engine.parameter(x)
            wt = engine.parameter(w)
            bt = engine.parameter(b)
            y = engine.conv2d(xt, wt, bt, 1)
            engine.tsum(engine.square(y)).backward()
            return y.data

        t, out = _time(step, repeat)
        results[impl.NAME] = (t, out)
        print(f"conv fwd+bwd 64ch@64px [{impl.NAME:>5}]: {t * 1e3:8.2f} ms/step")
    assert np.array_equal(results["numpy"][1], results["numba"][1])
    print(f"conv composite speedup: {results['numpy'][0] / results['numba'][0]:.2f}x")
    importlib.reload(kernels)


if __name__ == "__main__":
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    print(f"numpy {np.__version__}; backends verified bit-identical\n")
    bench_kernels(args.repeat)
    print()
    bench_conv_composite(args.repeat)
