"""Dense float64 numerics shared by every training loop.

All functions are pure. Row-wise variants reduce over the last axis of an
``(n, C)`` array; the scalar variants take single vectors.

"""
from __future__ import annotations

import math
from typing import Callable, NamedTuple, Optional, Tuple

import numpy
import numpy.typing

from .errors import InvalidInputError, InvalidParameterError, NumericError, ShapeError
from .util import FloatArray

LOG_CLAMP = 1e-12
# Gradient entries below this magnitude are compared absolutely.
GRADIENT_FLOOR = 1e-8

LossAndGrad = Callable[[FloatArray], Tuple[float, FloatArray]]


class GradientReport(NamedTuple):
    analytic: FloatArray
    numeric: FloatArray
    max_rel_err: float


def as_vector(values: numpy.typing.ArrayLike) -> FloatArray:
    ret = numpy.asarray(values, dtype=numpy.float64)
    if ret.ndim != 1 or ret.size == 0:
        raise ShapeError(f"expected a non-empty vector, got shape {ret.shape}")
    return ret


def _check_tau(tau: float) -> None:
    if not tau > 0:
        raise InvalidParameterError(f"temperature must be positive, got {tau}")


def _same_shape(a: FloatArray, b: FloatArray) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch: {a.shape} vs {b.shape}")


def log_softmax(logits: numpy.typing.ArrayLike, tau: float = 1.0) -> FloatArray:
    _check_tau(tau)
    scaled = numpy.asarray(logits, dtype=numpy.float64) / tau
    if not numpy.all(numpy.isfinite(scaled)):
        raise InvalidInputError("logits must be finite")
    shifted = scaled - scaled.max(axis=-1, keepdims=True)
    return shifted - numpy.log(numpy.exp(shifted).sum(axis=-1, keepdims=True))


def softmax(logits: numpy.typing.ArrayLike, tau: float = 1.0) -> FloatArray:
    """Temperature softmax over the last axis, computed after max-subtraction."""
    _check_tau(tau)
    scaled = numpy.asarray(logits, dtype=numpy.float64) / tau
    if not numpy.all(numpy.isfinite(scaled)):
        raise InvalidInputError("logits must be finite")
    exps = numpy.exp(scaled - scaled.max(axis=-1, keepdims=True))
    return exps / exps.sum(axis=-1, keepdims=True)


def _xlogy(x: FloatArray, y: FloatArray) -> FloatArray:
    # 0 * log(0) == 0
    return numpy.where(x > 0, x * numpy.log(numpy.maximum(y, LOG_CLAMP)), 0.0)


def cross_entropy_rows(target: numpy.typing.ArrayLike, pred: numpy.typing.ArrayLike) -> FloatArray:
    target_arr = numpy.asarray(target, dtype=numpy.float64)
    pred_arr = numpy.asarray(pred, dtype=numpy.float64)
    _same_shape(target_arr, pred_arr)
    return -_xlogy(target_arr, pred_arr).sum(axis=-1)


def cross_entropy(target: numpy.typing.ArrayLike, pred: numpy.typing.ArrayLike) -> float:
    """H(target, pred) = -sum_k target_k log(pred_k), with pred clamped at 1e-12."""
    return float(cross_entropy_rows(as_vector(target), as_vector(pred)))


def entropy_rows(probs: numpy.typing.ArrayLike) -> FloatArray:
    return cross_entropy_rows(probs, probs)


def entropy(probs: numpy.typing.ArrayLike) -> float:
    return cross_entropy(probs, probs)


def kl_divergence(p: numpy.typing.ArrayLike, q: numpy.typing.ArrayLike) -> float:
    p_arr = as_vector(p)
    q_arr = as_vector(q)
    _same_shape(p_arr, q_arr)
    return float((_xlogy(p_arr, p_arr) - _xlogy(p_arr, q_arr)).sum())


def normalize_rows(matrix: numpy.typing.ArrayLike) -> FloatArray:
    arr = numpy.asarray(matrix, dtype=numpy.float64)
    norms = numpy.linalg.norm(arr, axis=-1, keepdims=True)
    if numpy.any(norms == 0):
        raise InvalidInputError("cannot normalize a zero vector")
    return arr / norms


def normalize(vector: numpy.typing.ArrayLike) -> FloatArray:
    return normalize_rows(as_vector(vector))


def cosine_sim(a: numpy.typing.ArrayLike, b: numpy.typing.ArrayLike) -> float:
    a_arr = as_vector(a)
    b_arr = as_vector(b)
    _same_shape(a_arr, b_arr)
    norm_a = float(numpy.linalg.norm(a_arr))
    norm_b = float(numpy.linalg.norm(b_arr))
    if norm_a == 0 or norm_b == 0:
        raise InvalidInputError("cosine similarity is undefined for a zero vector")
    return float(numpy.clip(a_arr @ b_arr / (norm_a * norm_b), -1.0, 1.0))


def one_hot(labels: numpy.typing.ArrayLike, classes: int) -> FloatArray:
    label_arr = numpy.asarray(labels, dtype=numpy.int64)
    if numpy.any(label_arr < 0) or numpy.any(label_arr >= classes):
        raise InvalidInputError(f"labels must lie in [0, {classes})")
    return numpy.eye(classes, dtype=numpy.float64)[label_arr]


def check_gradient(loss: LossAndGrad, point: numpy.typing.ArrayLike, step: float = 1e-5) -> GradientReport:
    """Compare the analytic gradient returned by ``loss`` against central differences.

    ``loss`` maps a parameter vector to ``(value, gradient)``. The error of an
    entry is relative to ``|analytic| + |numeric|``, floored at ``GRADIENT_FLOOR``.

    """
    if not 1e-7 <= step <= 1e-3:
        raise InvalidParameterError(f"finite-difference step must lie in [1e-7, 1e-3], got {step}")
    x0 = as_vector(point).copy()
    value, analytic = loss(x0.copy())
    analytic = numpy.asarray(analytic, dtype=numpy.float64).reshape(x0.shape)
    if not math.isfinite(value):
        raise NumericError("loss is not finite at the base point")
    numeric = numpy.zeros_like(x0)
    for idx in range(x0.size):
        x = x0.copy()
        x[idx] = x0[idx] + step
        f_plus = loss(x)[0]
        x[idx] = x0[idx] - step
        f_minus = loss(x)[0]
        if not (math.isfinite(f_plus) and math.isfinite(f_minus)):
            raise NumericError(f"loss is not finite near coordinate {idx}")
        numeric[idx] = (f_plus - f_minus) / (2 * step)
    rel = numpy.abs(analytic - numeric) / numpy.maximum(GRADIENT_FLOOR, numpy.abs(analytic) + numpy.abs(numeric))
    return GradientReport(analytic, numeric, float(rel.max(initial=0.0)))


def cosine_annealing(step: int, total: int) -> float:
    """Factor (1 + cos(pi * step / total)) / 2, which decays from 1 at step 0 to 0 at step == total."""
    if total <= 0:
        return 1.0
    return (1.0 + math.cos(math.pi * step / total)) / 2.0


class SgdMomentum:
    """SGD with heavy-ball momentum and coupled L2 weight decay.

    The learning rate is passed per step so the caller owns the schedule.

    """

    def __init__(self, momentum: float = 0.9, weight_decay: float = 0.0) -> None:
        if not 0 <= momentum < 1:
            raise InvalidParameterError(f"momentum must lie in [0, 1), got {momentum}")
        if weight_decay < 0:
            raise InvalidParameterError(f"weight decay must be non-negative, got {weight_decay}")
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity: Optional[FloatArray] = None

    def step(self, params: FloatArray, grad: FloatArray, lr: float) -> FloatArray:
        direction = grad + self.weight_decay * params
        if self.velocity is None:
            self.velocity = direction.copy()
        else:
            self.velocity = self.momentum * self.velocity + direction
        return params - lr * self.velocity
