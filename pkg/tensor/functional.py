"""Differentiable primitives used by the ViT, the losses and the regularizer.

Softmax, log-softmax, layer norm and GELU are fused ops with hand-written
backward passes; the losses are composed from them.
"""

import math
from typing import Optional, Union

import numpy as np

from tensor.tensor import Tensor
from utils.constants import KL_EPSILON, LAYERNORM_EPSILON, PROB_SUM_TOLERANCE
from utils.errors import TargetIndexError, ValidationError

_GELU_C = math.sqrt(2.0 / math.pi)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Numerically stable softmax along ``axis`` (row max is subtracted)."""
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def grad_fn(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return Tensor.from_op(y, (x,), grad_fn)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    probs = np.exp(out)

    def grad_fn(g):
        return (g - probs * g.sum(axis=axis, keepdims=True),)

    return Tensor.from_op(out, (x,), grad_fn)


def normalize(x: Tensor, eps: float = LAYERNORM_EPSILON) -> Tensor:
    """Zero-mean, unit-variance over the last axis (layer norm without affine)."""
    a = x.data
    mu = a.mean(axis=-1, keepdims=True)
    centered = a - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    d = a.shape[-1]

    def grad_fn(g):
        gs = g.sum(axis=-1, keepdims=True)
        gx = (g * xhat).sum(axis=-1, keepdims=True)
        return ((inv / d) * (d * g - gs - xhat * gx),)

    return Tensor.from_op(xhat, (x,), grad_fn)


def layernorm(x: Tensor, gamma: Optional[Tensor] = None, beta: Optional[Tensor] = None,
              eps: float = LAYERNORM_EPSILON) -> Tensor:
    out = normalize(x, eps)
    if gamma is not None:
        out = out * gamma
    if beta is not None:
        out = out + beta
    return out


def gelu(x: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    a = x.data
    inner = _GELU_C * (a + 0.044715 * a ** 3)
    t = np.tanh(inner)
    out = 0.5 * a * (1.0 + t)

    def grad_fn(g):
        d_inner = _GELU_C * (1.0 + 3 * 0.044715 * a * a)
        return (g * (0.5 * (1.0 + t) + 0.5 * a * (1.0 - t * t) * d_inner),)

    return Tensor.from_op(out, (x,), grad_fn)


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    out = x @ weight
    if bias is not None:
        out = out + bias
    return out


def cross_entropy(logits: Tensor, targets: Union[np.ndarray, list]) -> Tensor:
    """Mean negative log-likelihood of the targets under softmax(logits).

    ``targets`` is either a vector of class indices or a one-hot matrix.
    """
    batch, classes = logits.shape
    if classes < 2:
        raise ValidationError(f"cross_entropy needs at least 2 classes, got {classes}")
    targets = np.asarray(targets)
    lsm = log_softmax(logits, axis=1)

    if targets.ndim == 2:
        if targets.shape != logits.shape:
            raise ValidationError(f"one-hot targets {targets.shape} do not match logits {logits.shape}")
        picked = (lsm * targets.astype(logits.dtype)).sum(axis=1)
        return -picked.mean()

    targets = targets.astype(np.int64)
    if targets.shape != (batch,):
        raise ValidationError(f"expected {batch} targets, got shape {targets.shape}")
    if targets.size and (targets.min() < 0 or targets.max() >= classes):
        raise TargetIndexError(f"target index out of range for {classes} classes: {targets.tolist()}")
    picked = lsm[np.arange(batch), targets]
    return -picked.mean()


def kl_divergence(student_probs: Tensor, teacher_probs: Union[Tensor, np.ndarray],
                  eps: float = KL_EPSILON) -> Tensor:
    """Mean over rows of sum(teacher * log(teacher / student)).

    The teacher is treated as a constant target; gradients reach the student
    only. Probabilities are clamped to [eps, 1] inside the logs.
    """
    teacher = teacher_probs.data if isinstance(teacher_probs, Tensor) else np.asarray(teacher_probs)
    teacher = teacher.astype(student_probs.dtype)
    if teacher.shape != student_probs.shape:
        raise ValidationError(f"student {student_probs.shape} and teacher {teacher.shape} differ in shape")
    check_distribution(student_probs.data, "student")
    check_distribution(teacher, "teacher")

    teacher_log = np.log(np.clip(teacher, eps, 1.0))
    self_term = Tensor((teacher * teacher_log).sum(axis=1), dtype=student_probs.dtype)
    cross_term = (student_probs.clip(eps, 1.0).log() * teacher).sum(axis=1)
    return (self_term - cross_term).mean()


def check_distribution(probs: np.ndarray, label: str = "probabilities") -> None:
    """Raise ValidationError unless every row is a probability distribution."""
    sums = probs.sum(axis=-1)
    tolerance = PROB_SUM_TOLERANCE
    if np.issubdtype(probs.dtype, np.floating):
        # float32 rounding grows with the row length
        tolerance = max(tolerance, 4 * float(np.finfo(probs.dtype).eps) * probs.shape[-1])
    if np.any(probs < 0) or np.any(np.abs(sums - 1.0) > tolerance):
        raise ValidationError(f"{label} rows must be nonnegative and sum to 1 (got sums {sums.tolist()})")
