"""Minimal reverse-mode autodiff over numpy arrays.

A ``Tensor`` wraps an ndarray and remembers how it was produced; calling
``backward()`` on a scalar walks the tape and accumulates ``.grad`` on every
tensor that requires it.  Ops cover exactly what the networks here need:
convolutions (im2col + BLAS GEMM), 2x2 max pooling, block average pooling,
nearest upsampling, batch norm, channel concat, dense layers, and the usual
elementwise/reduction primitives for the losses.

Convolution and the pooling/upsampling data movement route through
``medtex.kernels`` so the numba and numpy backends are interchangeable.
Everything runs in the dtype of its inputs; training uses float32, the
finite-difference checks build float64 graphs.
"""

import contextlib

import numpy as np

from . import kernels as K
from .errors import ValidationError

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_bw")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._bw = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        return float(self.data.item())

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def backward(self):
        if self.data.size != 1:
            raise ValidationError("engine", "backward", "backward() needs a scalar")
        order = _toposort(self)
        self.grad = np.ones_like(self.data)
        for node in order:
            bw = node._bw
            if bw is None:
                continue  # leaf or constant: keep any accumulated grad
            bw(node.grad)
            # interior node: release tape references and its own grad
            node._bw = None
            node._parents = ()
            if node is not self:
                node.grad = None

    # operator sugar -------------------------------------------------
    def __add__(self, other):
        return add(self, _wrap(other, self.dtype))

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, _wrap(other, self.dtype))

    __rmul__ = __mul__

    def __sub__(self, other):
        return sub(self, _wrap(other, self.dtype))

    def __rsub__(self, other):
        return sub(_wrap(other, self.dtype), self)

    def __truediv__(self, other):
        return div(self, _wrap(other, self.dtype))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, grad={self.requires_grad})"


def parameter(data):
    return Tensor(np.asarray(data), requires_grad=True)


def as_tensor(x, dtype=None):
    if isinstance(x, Tensor):
        return x
    a = np.asarray(x)
    if dtype is not None and a.dtype != dtype:
        a = a.astype(dtype)
    return Tensor(a)


def _wrap(x, dtype):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _toposort(root):
    # two-phase DFS postorder; visited is checked at pop time so that a node
    # reachable along paths of different depths still lands after all the
    # nodes it feeds (a parent may be pushed more than once, harmlessly)
    order = []
    visited = set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p._bw is not None or p.requires_grad:
                stack.append((p, False))
    order.reverse()
    return order


def _make(data, parents, bw):
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._bw = bw
    return out


def _accum(t, g, own=False):
    """Add gradient g onto t.grad.

    ``own=True`` promises g is freshly allocated and referenced nowhere
    else, so it may be adopted without a defensive copy.
    """
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = g if own else g.copy()
    else:
        t.grad += g


def _unbroadcast(g, shape):
    """Reduce g back to `shape` after numpy broadcasting.

    Returns (array, fresh): fresh is True when a new array was allocated.
    """
    fresh = False
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
        fresh = True
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
        fresh = True
    return g, fresh


# elementwise / arithmetic -------------------------------------------------

def add(a, b):
    def bw(g):
        ga, fa = _unbroadcast(g, a.data.shape)
        _accum(a, ga, own=fa)
        gb, fb = _unbroadcast(g, b.data.shape)
        _accum(b, gb, own=fb)
    return _make(a.data + b.data, (a, b), bw)


def sub(a, b):
    def bw(g):
        ga, fa = _unbroadcast(g, a.data.shape)
        _accum(a, ga, own=fa)
        gb, _ = _unbroadcast(g, b.data.shape)
        _accum(b, -gb, own=True)
    return _make(a.data - b.data, (a, b), bw)


def neg(a):
    def bw(g):
        _accum(a, -g, own=True)
    return _make(-a.data, (a,), bw)


def mul(a, b):
    def bw(g):
        ga, _ = _unbroadcast(g * b.data, a.data.shape)
        _accum(a, ga, own=True)
        gb, _ = _unbroadcast(g * a.data, b.data.shape)
        _accum(b, gb, own=True)
    return _make(a.data * b.data, (a, b), bw)


def div(a, b):
    def bw(g):
        ga, _ = _unbroadcast(g / b.data, a.data.shape)
        _accum(a, ga, own=True)
        gb, _ = _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape)
        _accum(b, gb, own=True)
    return _make(a.data / b.data, (a, b), bw)


def square(a):
    def bw(g):
        _accum(a, g * (2.0 * a.data), own=True)
    return _make(a.data * a.data, (a,), bw)


def log(a):
    def bw(g):
        _accum(a, g / a.data, own=True)
    return _make(np.log(a.data), (a,), bw)


def exp(a):
    out_data = np.exp(a.data)

    def bw(g):
        _accum(a, g * out_data, own=True)
    return _make(out_data, (a,), bw)


def clamp_min(a, floor):
    mask = a.data > floor

    def bw(g):
        _accum(a, g * mask, own=True)
    return _make(np.maximum(a.data, floor), (a,), bw)


def relu(a):
    mask = a.data > 0

    def bw(g):
        _accum(a, g * mask, own=True)
    return _make(a.data * mask, (a,), bw)


def _sigmoid_data(x):
    e = np.exp(-np.abs(x))  # never overflows
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def sigmoid(a):
    out_data = _sigmoid_data(a.data)

    def bw(g):
        _accum(a, g * out_data * (1.0 - out_data), own=True)
    return _make(out_data, (a,), bw)


def softplus(a):
    out_data = np.logaddexp(np.zeros((), dtype=a.data.dtype), a.data)
    sig = _sigmoid_data(a.data)

    def bw(g):
        _accum(a, g * sig, own=True)
    return _make(out_data, (a,), bw)


# reductions / shape -------------------------------------------------------

def tsum(a, axis=None, keepdims=False):
    def bw(g):
        if axis is None:
            gk = g
        else:
            gk = g if keepdims else np.expand_dims(g, axis)
        gx = np.array(np.broadcast_to(gk, a.data.shape))
        _accum(a, gx, own=True)
    return _make(a.data.sum(axis=axis, keepdims=keepdims), (a,), bw)


def tmean(a, axis=None, keepdims=False):
    if axis is None:
        n = a.data.size
    else:
        ax = axis if isinstance(axis, tuple) else (axis,)
        n = 1
        for i in ax:
            n *= a.data.shape[i]
    return tsum(a, axis=axis, keepdims=keepdims) * (1.0 / n)


def reshape(a, shape):
    def bw(g):
        _accum(a, g.reshape(a.data.shape), own=False)
    return _make(a.data.reshape(shape), (a,), bw)


def concat_channels(a, b):
    ca = a.data.shape[1]

    def bw(g):
        _accum(a, np.ascontiguousarray(g[:, :ca]), own=False)
        _accum(b, np.ascontiguousarray(g[:, ca:]), own=False)
    return _make(np.concatenate([a.data, b.data], axis=1), (a, b), bw)


# linear algebra -----------------------------------------------------------

def matmul(a, b):
    def bw(g):
        _accum(a, g @ b.data.T, own=True)
        _accum(b, a.data.T @ g, own=True)
    return _make(a.data @ b.data, (a, b), bw)


def linear(x, w, b):
    """x: (N, D), w: (D, L), b: (L,)"""
    return add(matmul(x, w), b)


# structured ops -----------------------------------------------------------

# below this many output pixels per sample, conv batches all samples into
# one wide GEMM (the small-map transposes it needs are then cheap)
_CONV_BATCH_PIXELS = 2048


def conv2d(x, w, b, padding):
    """NCHW convolution, stride 1, square kernel from w: (F, C, k, k).

    Large maps run one sample at a time through a transposed im2col layout,
    so the GEMM writes each (F, OH*OW) output plane in place; small maps are
    stacked column-wise into a single batch GEMM.
    """
    n, c, h, wd = x.data.shape
    f, c2, kk, _ = w.data.shape
    if c2 != c:
        raise ValidationError("engine", "conv2d", f"channel mismatch: input {c}, kernel {c2}")
    oh = h + 2 * padding - kk + 1
    ow = wd + 2 * padding - kk + 1
    wmat = w.data.reshape(f, c * kk * kk)
    batched = oh * ow <= _CONV_BATCH_PIXELS and n > 1

    if batched:
        cols = K.im2col_t_batch(x.data, kk, padding)       # (C*k*k, N*OH*OW)
        out = wmat @ cols
        y = np.ascontiguousarray(
            out.reshape(f, n, oh * ow).transpose(1, 0, 2)).reshape(n, f, oh, ow)
    else:
        y = np.empty((n, f, oh, ow), dtype=x.data.dtype)
        yflat = y.reshape(n, f, oh * ow)
        for i in range(n):
            np.dot(wmat, K.im2col_t(x.data[i], kk, padding), out=yflat[i])
    if b is not None:
        y += b.data[None, :, None, None]

    def bw(g):
        if b is not None:
            _accum(b, g.sum(axis=(0, 2, 3)), own=True)
        need_gx = x.requires_grad
        if batched:
            cols2 = K.im2col_t_batch(x.data, kk, padding)
            gb = np.ascontiguousarray(
                g.reshape(n, f, oh * ow).transpose(1, 0, 2)).reshape(f, -1)
            gw = gb @ cols2.T
            _accum(w, gw.reshape(w.data.shape), own=True)
            if need_gx:
                _accum(x, K.col2im_t_batch(wmat.T @ gb, n, c, h, wd, kk, padding), own=True)
            return
        gw = np.zeros_like(wmat)
        gx = np.empty_like(x.data) if need_gx else None
        gflat = g.reshape(n, f, oh * ow)
        for i in range(n):
            cols2 = K.im2col_t(x.data[i], kk, padding)
            gw += gflat[i] @ cols2.T
            if need_gx:
                gx[i] = K.col2im_t(wmat.T @ gflat[i], c, h, wd, kk, padding)
        _accum(w, gw.reshape(w.data.shape), own=True)
        if need_gx:
            _accum(x, gx, own=True)

    parents = (x, w, b) if b is not None else (x, w)
    return _make(y, parents, bw)


def maxpool2x2(x):
    y, idx = K.maxpool2x2(x.data)

    def bw(g):
        _accum(x, K.maxpool2x2_backward(np.ascontiguousarray(g), idx), own=True)
    return _make(y, (x,), bw)


def avgpool_block(x, bh, bw_):
    """Average over non-overlapping (bh, bw_) blocks."""
    scale = np.asarray(1.0 / (bh * bw_), dtype=x.data.dtype)
    y = K.sumpool(x.data, bh, bw_) * scale

    def bw(g):
        _accum(x, K.sumpool_backward(np.ascontiguousarray(g * scale), bh, bw_), own=True)
    return _make(y, (x,), bw)


def adaptive_avgpool(x, out_hw):
    n, c, h, w = x.data.shape
    if h % out_hw or w % out_hw:
        raise ValidationError("engine", "adaptive_avgpool",
                              f"spatial dims ({h},{w}) not divisible by {out_hw}")
    return avgpool_block(x, h // out_hw, w // out_hw)


def upsample_nearest2x(x):
    def bw(g):
        _accum(x, K.upsample2x_backward(np.ascontiguousarray(g)), own=True)
    return _make(K.upsample2x(x.data), (x,), bw)


def softmax(x):
    """Softmax over the last axis."""
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        dot = (g * s).sum(axis=-1, keepdims=True)
        _accum(x, (g - dot) * s, own=True)
    return _make(s, (x,), bw)


def batchnorm2d(x, gamma, beta, state, training, momentum=0.1, eps=1e-5):
    """Per-channel batch norm on NCHW.

    ``state`` holds ndarrays "mean" and "var" that are updated in place
    while training (biased variance throughout).
    """
    n, c, h, w = x.data.shape
    if training:
        mu = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        state["mean"] *= (1.0 - momentum)
        state["mean"] += momentum * mu
        state["var"] *= (1.0 - momentum)
        state["var"] += momentum * var
    else:
        mu = state["mean"]
        var = state["var"]
    ivar = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu[None, :, None, None]) * ivar[None, :, None, None]
    y = gamma.data[None, :, None, None] * xhat + beta.data[None, :, None, None]

    def bw(g):
        _accum(gamma, (g * xhat).sum(axis=(0, 2, 3)), own=True)
        _accum(beta, g.sum(axis=(0, 2, 3)), own=True)
        if not x.requires_grad:
            return
        gxh = g * gamma.data[None, :, None, None]
        if training:
            m = n * h * w
            sum_gxh = gxh.sum(axis=(0, 2, 3))
            sum_gxh_xhat = (gxh * xhat).sum(axis=(0, 2, 3))
            gx = (ivar[None, :, None, None] / m) * (
                m * gxh
                - sum_gxh[None, :, None, None]
                - xhat * sum_gxh_xhat[None, :, None, None]
            )
        else:
            gx = gxh * ivar[None, :, None, None]
        _accum(x, gx.astype(x.data.dtype, copy=False), own=True)

    return _make(y.astype(x.data.dtype, copy=False), (x, gamma, beta), bw)
