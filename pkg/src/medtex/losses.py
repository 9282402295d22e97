"""Distillation objective: output cross-entropy, per-layer Gaussian feature
losses with learnable per-channel variances, and their weighted total.

All loss functions accept plain arrays or engine tensors and return an
engine scalar; call ``.item()`` for the float.  Teacher-side inputs are
treated as constants, so gradients flow only into student-side arguments
(student activations, adapter networks, and the variance parameters).

Conventions, fixed so the intermediate weight keeps its meaning across
batch sizes: sum over (channel, height, width), mean over the batch.  The
constant term of the Gaussian log-density is dropped.
"""

from dataclasses import dataclass, field

import numpy as np

from . import engine as E
from .arch import mu_forward
from .errors import ValidationError

PROB_FLOOR = 1e-12       # defines 0*log 0 = 0 in the cross-entropy
DEFAULT_EPSILON = 1e-4   # variance floor added to softplus
DEFAULT_LAMBDA = 0.001   # weight of the intermediate losses


@dataclass
class LayerVariance:
    """Per-channel variance parameter for one intermediate layer.

    The actual variance is softplus(alpha) + epsilon, always positive.
    """
    alpha: E.Tensor
    epsilon: float = DEFAULT_EPSILON

    @classmethod
    def create(cls, channels, epsilon=DEFAULT_EPSILON, dtype=np.float32):
        return cls(alpha=E.parameter(np.zeros(channels, dtype=dtype)), epsilon=epsilon)


@dataclass
class VarianceParams:
    """Variance parameters for all tapped layers, in tap order."""
    layers: list
    epsilon: float = DEFAULT_EPSILON

    @classmethod
    def create(cls, channel_counts, epsilon=DEFAULT_EPSILON, dtype=np.float32):
        return cls(layers=[LayerVariance.create(c, epsilon, dtype) for c in channel_counts],
                   epsilon=epsilon)


@dataclass
class DistillLossTerms:
    """Float values of one training step's loss terms."""
    l_output: float
    l_intermediate: list
    lam: float
    total: float

    def metrics_line(self, step):
        cols = [f"{step}", _fmt(self.l_output)]
        if self.l_intermediate:
            cols.extend(_fmt(v) for v in self.l_intermediate)
        else:
            cols.extend(["n/a"] * 4)
        cols.append(_fmt(self.total))
        return "\t".join(cols)


def _fmt(v):
    return np.format_float_scientific(v, precision=10)


def softplus_variance(alpha, epsilon):
    """sigma^2 = ln(1 + e^alpha) + epsilon, overflow-safe for large |alpha|."""
    if epsilon <= 0:
        raise ValidationError("losses", "softplus_variance", "epsilon must be > 0")
    if isinstance(alpha, E.Tensor):
        return E.softplus(alpha) + epsilon
    a = np.asarray(alpha, dtype=np.float64)
    return np.logaddexp(0.0, a) + epsilon


def _check_simplex(p, what):
    sums = p.sum(axis=-1)
    if np.abs(sums - 1.0).max() > 1e-4 or p.min() < 0:
        raise ValidationError("losses", "output_distill_loss",
                              f"{what} rows are not probability vectors")


def output_distill_loss(teacher_probs, student_probs):
    """Batch-mean cross-entropy of student probabilities under teacher ones.

    Student probabilities are clamped below at 1e-12 before the log; the
    teacher side is a constant.
    """
    p = teacher_probs.data if isinstance(teacher_probs, E.Tensor) else np.asarray(teacher_probs)
    q = student_probs if isinstance(student_probs, E.Tensor) else E.as_tensor(student_probs)
    if p.ndim == 1:
        p = p[None]
    if q.data.ndim == 1:
        q = E.reshape(q, (1, -1))
    if p.shape != q.data.shape:
        raise ValidationError("losses", "output_distill_loss",
                              f"shape mismatch {p.shape} vs {q.data.shape}")
    _check_simplex(p, "teacher")
    _check_simplex(q.data, "student")
    log_q = E.log(E.clamp_min(q, PROB_FLOOR))
    per_sample = E.tsum(E.mul(E.as_tensor(p.astype(q.data.dtype)), log_q), axis=-1)
    return E.neg(E.tmean(per_sample))


def intermediate_loss(teacher_tap, student_tap, mu_model, variance):
    """Gaussian negative log-likelihood of a teacher tap under the adapted
    student tap, with per-channel variance.

    Per sample: sum over (c, h, w) of log sigma_c + (T - mu(S))^2 / (2 sigma_c^2),
    then mean over the batch.  Gradients reach the student tap, the adapter
    and alpha; the teacher tap is constant.
    """
    t = teacher_tap.data if isinstance(teacher_tap, E.Tensor) else np.asarray(teacher_tap)
    s = student_tap if isinstance(student_tap, E.Tensor) else E.as_tensor(student_tap)
    if t.ndim == 3:
        t = t[None]
    s4 = E.reshape(s, (1,) + tuple(s.data.shape)) if s.data.ndim == 3 else s
    pred = mu_forward(mu_model, s4)
    if pred.data.shape != t.shape:
        raise ValidationError("losses", "intermediate_loss",
                              f"adapted student tap {pred.data.shape} vs teacher tap {t.shape}")
    n, c, h, w = t.shape
    sigma2 = softplus_variance(variance.alpha, variance.epsilon)        # (C,)
    resid = E.sub(E.as_tensor(t.astype(pred.data.dtype)), pred)
    sq = E.tsum(E.square(resid), axis=(0, 2, 3))                        # (C,)
    quad = E.tsum(E.div(sq, 2.0 * sigma2))
    # log sigma_c enters once per (h, w) cell and per sample
    log_term = E.tsum(E.log(sigma2)) * (0.5 * h * w * n)
    return (log_term + quad) * (1.0 / n)


def total_loss(l_output, l_intermediate, lam):
    """l_output + lam * sum(l_intermediate); works on floats or tensors."""
    if lam < 0:
        raise ValidationError("losses", "total_loss", "lambda must be >= 0")
    total = l_output
    if l_intermediate:
        acc = l_intermediate[0]
        for term in l_intermediate[1:]:
            acc = acc + term
        total = total + lam * acc
    return total
