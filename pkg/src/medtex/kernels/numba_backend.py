"""Numba-compiled twins of the numpy kernels.

Loops are written so that every output element accumulates contributions in
exactly the same order as the numpy fallback, keeping the two backends
bit-identical.  ``cache=True`` persists compiled kernels next to the source
so the JIT cost is paid once per machine.  fastmath stays off: reassociation
would break backend parity.
"""

import numpy as np
from numba import njit

NAME = "numba"

_JIT = dict(cache=True, fastmath=False, nogil=True)


@njit(**_JIT)
def _im2col_t_impl(x, k, pad, cols):
    c, h, w = x.shape
    oh = h + 2 * pad - k + 1
    ow = w + 2 * pad - k + 1
    for cc in range(c):
        for ki in range(k):
            for kj in range(k):
                row = (cc * k + ki) * k + kj
                for i in range(oh):
                    src_i = i + ki - pad
                    base = i * ow
                    if src_i < 0 or src_i >= h:
                        for j in range(ow):
                            cols[row, base + j] = 0.0
                    else:
                        for j in range(ow):
                            src_j = j + kj - pad
                            if 0 <= src_j < w:
                                cols[row, base + j] = x[cc, src_i, src_j]
                            else:
                                cols[row, base + j] = 0.0
    return cols


def im2col_t(x, k, pad):
    c, h, w = x.shape
    if k == 1 and pad == 0:
        return x.reshape(c, h * w)
    oh = h + 2 * pad - k + 1
    ow = w + 2 * pad - k + 1
    cols = np.empty((c * k * k, oh * ow), dtype=x.dtype)
    return _im2col_t_impl(np.ascontiguousarray(x), k, pad, cols)


@njit(**_JIT)
def _col2im_t_impl(g5, k, pad, gx):
    c, h, w = gx.shape
    oh = h + 2 * pad - k + 1
    ow = w + 2 * pad - k + 1
    # (ki, kj) outermost: per-element accumulation order matches numpy twin
    for ki in range(k):
        for kj in range(k):
            for cc in range(c):
                for i in range(oh):
                    src_i = i + ki - pad
                    if src_i < 0 or src_i >= h:
                        continue
                    for j in range(ow):
                        src_j = j + kj - pad
                        if 0 <= src_j < w:
                            gx[cc, src_i, src_j] += g5[cc, ki, kj, i, j]
    return gx


def col2im_t(gcols, c, h, w, k, pad):
    if k == 1 and pad == 0:
        return gcols.reshape(c, h, w)
    oh = h + 2 * pad - k + 1
    ow = w + 2 * pad - k + 1
    g5 = np.ascontiguousarray(gcols).reshape(c, k, k, oh, ow)
    gx = np.zeros((c, h, w), dtype=gcols.dtype)
    return _col2im_t_impl(g5, k, pad, gx)


@njit(**_JIT)
def _im2col_t_batch_impl(x, k, pad, cols):
    n, c, h, w = x.shape
    oh = h + 2 * pad - k + 1
    ow = w + 2 * pad - k + 1
    block = oh * ow
    for cc in range(c):
        for ki in range(k):
            for kj in range(k):
                row = (cc * k + ki) * k + kj
                for nn in range(n):
                    off = nn * block
                    for i in range(oh):
                        src_i = i + ki - pad
                        base = off + i * ow
                        if src_i < 0 or src_i >= h:
                            for j in range(ow):
                                cols[row, base + j] = 0.0
                        else:
                            for j in range(ow):
                                src_j = j + kj - pad
                                if 0 <= src_j < w:
                                    cols[row, base + j] = x[nn, cc, src_i, src_j]
                                else:
                                    cols[row, base + j] = 0.0
    return cols


def im2col_t_batch(x, k, pad):
    n, c, h, w = x.shape
    if k == 1 and pad == 0:
        return np.ascontiguousarray(x.transpose(1, 0, 2, 3)).reshape(c, n * h * w)
    oh = h + 2 * pad - k + 1
    ow = w + 2 * pad - k + 1
    cols = np.empty((c * k * k, n * oh * ow), dtype=x.dtype)
    return _im2col_t_batch_impl(np.ascontiguousarray(x), k, pad, cols)


@njit(**_JIT)
def _col2im_t_batch_impl(g6, k, pad, gx):
    n, c, h, w = gx.shape
    oh = h + 2 * pad - k + 1
    ow = w + 2 * pad - k + 1
    for ki in range(k):
        for kj in range(k):
            for nn in range(n):
                for cc in range(c):
                    for i in range(oh):
                        src_i = i + ki - pad
                        if src_i < 0 or src_i >= h:
                            continue
                        for j in range(ow):
                            src_j = j + kj - pad
                            if 0 <= src_j < w:
                                gx[nn, cc, src_i, src_j] += g6[cc, ki, kj, nn, i, j]
    return gx


def col2im_t_batch(gcols, n, c, h, w, k, pad):
    if k == 1 and pad == 0:
        return np.ascontiguousarray(gcols.reshape(c, n, h, w).transpose(1, 0, 2, 3))
    oh = h + 2 * pad - k + 1
    ow = w + 2 * pad - k + 1
    g6 = np.ascontiguousarray(gcols).reshape(c, k, k, n, oh, ow)
    gx = np.zeros((n, c, h, w), dtype=gcols.dtype)
    return _col2im_t_batch_impl(g6, k, pad, gx)


@njit(**_JIT)
def _maxpool_impl(x, y, idx):
    n, c, oh, ow = y.shape
    for nn in range(n):
        for cc in range(c):
            for i in range(oh):
                for j in range(ow):
                    a = x[nn, cc, 2 * i, 2 * j]
                    b = x[nn, cc, 2 * i, 2 * j + 1]
                    d = x[nn, cc, 2 * i + 1, 2 * j]
                    e = x[nn, cc, 2 * i + 1, 2 * j + 1]
                    best = a
                    k = np.uint8(0)
                    if b > best:
                        best = b
                        k = np.uint8(1)
                    if d > best:
                        best = d
                        k = np.uint8(2)
                    if e > best:
                        best = e
                        k = np.uint8(3)
                    y[nn, cc, i, j] = best
                    idx[nn, cc, i, j] = k


def maxpool2x2(x):
    n, c, h, w = x.shape
    y = np.empty((n, c, h // 2, w // 2), dtype=x.dtype)
    idx = np.empty((n, c, h // 2, w // 2), dtype=np.uint8)
    _maxpool_impl(np.ascontiguousarray(x), y, idx)
    return y, idx


@njit(**_JIT)
def _maxpool_bwd_impl(g, idx, gx):
    n, c, oh, ow = g.shape
    for nn in range(n):
        for cc in range(c):
            for i in range(oh):
                for j in range(ow):
                    k = idx[nn, cc, i, j]
                    gx[nn, cc, 2 * i + k // 2, 2 * j + k % 2] = g[nn, cc, i, j]


def maxpool2x2_backward(g, idx):
    n, c, oh, ow = g.shape
    gx = np.zeros((n, c, 2 * oh, 2 * ow), dtype=g.dtype)
    _maxpool_bwd_impl(np.ascontiguousarray(g), idx, gx)
    return gx


@njit(**_JIT)
def _sumpool_impl(x, bh, bw, y):
    n, c, oh, ow = y.shape
    for nn in range(n):
        for cc in range(c):
            for i in range(oh):
                for j in range(ow):
                    v0 = x[nn, cc, i * bh, j * bw]
                    acc = v0 - v0  # zero in x's own dtype (a python 0.0 would promote)
                    for bi in range(bh):
                        for bj in range(bw):
                            acc += x[nn, cc, i * bh + bi, j * bw + bj]
                    y[nn, cc, i, j] = acc


def sumpool(x, bh, bw):
    n, c, h, w = x.shape
    y = np.empty((n, c, h // bh, w // bw), dtype=x.dtype)
    _sumpool_impl(np.ascontiguousarray(x), bh, bw, y)
    return y


@njit(**_JIT)
def _sumpool_bwd_impl(g, bh, bw, gx):
    n, c, h, w = gx.shape
    for nn in range(n):
        for cc in range(c):
            for i in range(h):
                for j in range(w):
                    gx[nn, cc, i, j] = g[nn, cc, i // bh, j // bw]


def sumpool_backward(g, bh, bw):
    n, c, oh, ow = g.shape
    gx = np.empty((n, c, oh * bh, ow * bw), dtype=g.dtype)
    _sumpool_bwd_impl(np.ascontiguousarray(g), bh, bw, gx)
    return gx


@njit(**_JIT)
def _upsample_impl(x, y):
    n, c, h, w = x.shape
    for nn in range(n):
        for cc in range(c):
            for i in range(h):
                for j in range(w):
                    v = x[nn, cc, i, j]
                    y[nn, cc, 2 * i, 2 * j] = v
                    y[nn, cc, 2 * i, 2 * j + 1] = v
                    y[nn, cc, 2 * i + 1, 2 * j] = v
                    y[nn, cc, 2 * i + 1, 2 * j + 1] = v


def upsample2x(x):
    n, c, h, w = x.shape
    y = np.empty((n, c, 2 * h, 2 * w), dtype=x.dtype)
    _upsample_impl(np.ascontiguousarray(x), y)
    return y


@njit(**_JIT)
def _upsample_bwd_impl(g, gx):
    n, c, h, w = gx.shape
    for nn in range(n):
        for cc in range(c):
            for i in range(h):
                for j in range(w):
                    gx[nn, cc, i, j] = ((g[nn, cc, 2 * i, 2 * j]
                                         + g[nn, cc, 2 * i, 2 * j + 1])
                                        + g[nn, cc, 2 * i + 1, 2 * j]) \
                                       + g[nn, cc, 2 * i + 1, 2 * j + 1]


def upsample2x_backward(g):
    n, c, h, w = g.shape
    gx = np.empty((n, c, h // 2, w // 2), dtype=g.dtype)
    _upsample_bwd_impl(np.ascontiguousarray(g), gx)
    return gx
