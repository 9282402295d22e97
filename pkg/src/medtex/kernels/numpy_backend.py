"""Pure-numpy implementations of the hot data-movement kernels.

This is the fallback path used when ``MEDTEX_BACKEND=numpy`` or numba is
unavailable.  Each function has a numba twin in ``numba_backend`` that must
produce bit-identical output; accumulation orders are pinned on both sides
(see test_kernels.py).  Matrix products themselves are not here — they stay
on BLAS via ``np.dot`` in the engine, shared by both backends.

Convolution patches use a transposed per-sample layout: ``im2col_t`` turns
one (C, H, W) sample into a (C*k*k, OH*OW) matrix whose rows are contiguous
shifted planes, so the GEMM writes conv outputs in NCHW order directly and
no batched transpose copies are needed anywhere.
"""

import numpy as np

NAME = "numpy"


def im2col_t(x, k, pad):
    """One sample (C, H, W) -> patch matrix (C*k*k, OH*OW)."""
    c, h, w = x.shape
    if k == 1 and pad == 0:
        return x.reshape(c, h * w)
    oh = h + 2 * pad - k + 1
    ow = w + 2 * pad - k + 1
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(1, 2))
    # win: (c, oh, ow, k, k) view -> rows ordered (c, ki, kj)
    return win.transpose(0, 3, 4, 1, 2).reshape(c * k * k, oh * ow)


def col2im_t(gcols, c, h, w, k, pad):
    """Adjoint of im2col_t: fold (C*k*k, OH*OW) back onto one (C, H, W)."""
    if k == 1 and pad == 0:
        return gcols.reshape(c, h, w)
    oh = h + 2 * pad - k + 1
    ow = w + 2 * pad - k + 1
    g5 = gcols.reshape(c, k, k, oh, ow)
    gxp = np.zeros((c, h + 2 * pad, w + 2 * pad), dtype=gcols.dtype)
    # (ki, kj) ascending pins the per-element summation order shared with
    # the numba twin
    for ki in range(k):
        for kj in range(k):
            gxp[:, ki:ki + oh, kj:kj + ow] += g5[:, ki, kj]
    if pad == 0:
        return gxp
    return np.ascontiguousarray(gxp[:, pad:pad + h, pad:pad + w])


def im2col_t_batch(x, k, pad):
    """Batch (N, C, H, W) -> (C*k*k, N*OH*OW); sample n fills its column block.

    Used for small spatial maps where one wide GEMM beats per-sample calls.
    """
    n, c, h, w = x.shape
    if k == 1 and pad == 0:
        return np.ascontiguousarray(x.transpose(1, 0, 2, 3)).reshape(c, n * h * w)
    oh = h + 2 * pad - k + 1
    ow = w + 2 * pad - k + 1
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(2, 3))
    # win: (n, c, oh, ow, k, k) -> rows (c, ki, kj), cols (n, oh, ow)
    return win.transpose(1, 4, 5, 0, 2, 3).reshape(c * k * k, n * oh * ow)


def col2im_t_batch(gcols, n, c, h, w, k, pad):
    """Adjoint of im2col_t_batch."""
    if k == 1 and pad == 0:
        return np.ascontiguousarray(gcols.reshape(c, n, h, w).transpose(1, 0, 2, 3))
    oh = h + 2 * pad - k + 1
    ow = w + 2 * pad - k + 1
    g6 = gcols.reshape(c, k, k, n, oh, ow)
    gxp = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=gcols.dtype)
    for ki in range(k):
        for kj in range(k):
            gxp[:, :, ki:ki + oh, kj:kj + ow] += g6[:, ki, kj].transpose(1, 0, 2, 3)
    if pad == 0:
        return gxp
    return np.ascontiguousarray(gxp[:, :, pad:pad + h, pad:pad + w])


def maxpool2x2(x):
    """2x2/stride-2 max pool; returns (pooled, argmax in 0..3 per cell).

    Ties resolve to the lowest in-cell index (row-major), matching argmax.
    """
    n, c, h, w = x.shape
    v = np.ascontiguousarray(
        x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
    ).reshape(n, c, h // 2, w // 2, 4)
    idx = v.argmax(-1).astype(np.uint8)
    y = np.take_along_axis(v, idx[..., None].astype(np.intp), -1)[..., 0]
    return np.ascontiguousarray(y), idx


def maxpool2x2_backward(g, idx):
    """Scatter cell gradients to the argmax positions recorded forward."""
    n, c, oh, ow = g.shape
    g4 = np.zeros((n, c, oh, ow, 4), dtype=g.dtype)
    np.put_along_axis(g4, idx[..., None].astype(np.intp), g[..., None], -1)
    gx = g4.reshape(n, c, oh, ow, 2, 2).transpose(0, 1, 2, 4, 3, 5)
    return np.ascontiguousarray(gx).reshape(n, c, 2 * oh, 2 * ow)


def sumpool(x, bh, bw):
    """Non-overlapping (bh, bw) block sum.  Caller applies any 1/(bh*bw)."""
    n, c, h, w = x.shape
    acc = np.zeros((n, c, h // bh, w // bw), dtype=x.dtype)
    for bi in range(bh):
        for bj in range(bw):
            acc += x[:, :, bi::bh, bj::bw]
    return acc


def sumpool_backward(g, bh, bw):
    """Broadcast each block gradient to its bh x bw cell."""
    return np.ascontiguousarray(
        np.repeat(np.repeat(g, bh, axis=2), bw, axis=3)
    )


def upsample2x(x):
    """Nearest-neighbour 2x upsampling."""
    return np.ascontiguousarray(np.repeat(np.repeat(x, 2, axis=2), 2, axis=3))


def upsample2x_backward(g):
    """Adjoint of nearest 2x: sum each 2x2 cell (fixed order)."""
    n, c, h, w = g.shape
    v = g.reshape(n, c, h // 2, 2, w // 2, 2)
    return ((v[:, :, :, 0, :, 0] + v[:, :, :, 0, :, 1])
            + v[:, :, :, 1, :, 0]) + v[:, :, :, 1, :, 1]
