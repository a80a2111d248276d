"""Probability and loss functions: softmax, log-softmax, MSE, BCE and KL divergence."""

from typing import Optional

import numpy as np

from sonar_kd.core import ops
from sonar_kd.core.autodiff import Tensor
from sonar_kd.errors import NonFiniteError, ShapeError

# Probability clamp for BCE and the KL reference distribution.
PROB_EPS = 1e-7
# Tolerance on "sums to one" for KL inputs.
NORMALIZATION_TOL = 1e-6

REDUCTIONS = ("mean", "sum", "none")


def _require_finite(z: Tensor, name: str) -> None:
    if not np.all(np.isfinite(z.data)):
        bad = int(np.size(z.data) - np.count_nonzero(np.isfinite(z.data)))
        raise NonFiniteError(f"{name}: input contains {bad} non-finite values", {"shape": list(z.shape)})


def _axis(z: Tensor, axis: int) -> int:
    if z.ndim == 0 or not -z.ndim <= axis < z.ndim:
        raise ShapeError(f"axis {axis} invalid for shape {z.shape}", {"axis": axis, "shape": list(z.shape)})
    return axis % z.ndim


def _reduce(x: Tensor, reduction: str) -> Tensor:
    if reduction == "mean":
        return ops.mean(x)
    if reduction == "sum":
        return ops.sum(x)
    if reduction == "none":
        return x
    raise ValueError(f"unknown reduction {reduction!r}; expected one of {REDUCTIONS}")


def softmax(z: Tensor, axis: int = -1) -> Tensor:
    """Normalized exponential along ``axis``, computed after max-subtraction."""
    _require_finite(z, "softmax")
    return ops.Softmax.apply(z, axis=_axis(z, axis))


def log_softmax(z: Tensor, axis: int = -1) -> Tensor:
    """``log(softmax(z))`` in the fused log-sum-exp form."""
    _require_finite(z, "log_softmax")
    return ops.LogSoftmax.apply(z, axis=_axis(z, axis))


def mse(y: Tensor, yhat: Tensor, reduction: str = "mean") -> Tensor:
    """Mean (or summed) squared difference."""
    if y.shape != yhat.shape:
        raise ShapeError(f"mse: shapes {y.shape} and {yhat.shape} differ", {"y": list(y.shape), "yhat": list(yhat.shape)})
    diff = ops.sub(y, yhat)
    return _reduce(ops.mul(diff, diff), reduction)


def bce(p: Tensor, y: Tensor, reduction: str = "mean", eps: float = PROB_EPS) -> Tensor:
    """Binary cross-entropy of predictions ``p`` against (possibly soft) targets ``y``.

    ``p`` is clamped to ``[eps, 1 - eps]`` before the logarithms.
    """
    if p.shape != y.shape:
        raise ShapeError(f"bce: shapes {p.shape} and {y.shape} differ", {"p": list(p.shape), "y": list(y.shape)})
    for tensor, name in ((p, "p"), (y, "y")):
        data = tensor.data
        if not np.all(np.isfinite(data)) or np.any(data < 0.0) or np.any(data > 1.0):
            raise ShapeError(f"bce: {name} must lie in [0, 1]", {"min": float(np.min(data)), "max": float(np.max(data))})
    pc = ops.clamp(p, eps, 1.0 - eps)
    positive = ops.mul(y, ops.log(pc))
    negative = ops.mul(ops.sub(1.0, y), ops.log(ops.sub(1.0, pc)))
    return ops.neg(_reduce(ops.add(positive, negative), reduction))


def _check_distribution(t: Tensor, axis: int, name: str) -> None:
    data = t.data
    if not np.all(np.isfinite(data)) or np.any(data < 0.0):
        raise ShapeError(f"kl_div: {name} must be a non-negative finite distribution")
    totals = data.sum(axis=axis)
    worst = float(np.max(np.abs(totals - 1.0))) if totals.size else 0.0
    if worst > NORMALIZATION_TOL:
        raise ShapeError(f"kl_div: {name} is not normalized (off by {worst:.3e})", {"axis": axis, "max_error": worst})


def kl_div_log_input(
    log_q: Tensor,
    p: Tensor,
    axis: int = -1,
    reduction: str = "sum",
    log_p: Optional[Tensor] = None,
) -> Tensor:
    """KL divergence ``sum p * (log p - log_q)`` with the approximating distribution given in log space.

    Terms with ``p == 0`` contribute zero. ``log_p`` may be supplied when it is available in a
    more accurate form than ``log(p)``. ``reduction`` applies to the per-row divergences.
    """
    if log_q.shape != p.shape:
        raise ShapeError(f"kl_div: shapes {log_q.shape} and {p.shape} differ", {"log_q": list(log_q.shape), "p": list(p.shape)})
    axis = _axis(p, axis)
    _check_distribution(p, axis, "P")
    _require_finite(log_q, "kl_div")
    if log_p is None:
        log_p = ops.log(ops.clamp(p, float(np.finfo(p.dtype).tiny)))
    rows = ops.sum(ops.mul(p, ops.sub(log_p, log_q)), axis=axis)
    return _reduce(rows, reduction)


def kl_div(P: Tensor, Q: Tensor, axis: int = -1, reduction: str = "sum", eps: float = PROB_EPS) -> Tensor:
    """Information lost when ``Q`` approximates ``P``; ``Q`` is clamped to at least ``eps``.

    ``P`` is used as given: entries with ``P == 0`` contribute zero.
    """
    if P.shape != Q.shape:
        raise ShapeError(f"kl_div: shapes {P.shape} and {Q.shape} differ", {"P": list(P.shape), "Q": list(Q.shape)})
    _check_distribution(Q, _axis(Q, axis), "Q")
    log_q = ops.log(ops.clamp(Q, eps))
    return kl_div_log_input(log_q, P, axis=axis, reduction=reduction)


def binary_entropy(p: np.ndarray, eps: float = PROB_EPS) -> np.ndarray:
    """Elementwise entropy of Bernoulli(p) with the same clamp as ``bce``."""
    pc = np.clip(p, eps, 1.0 - eps)
    return -(p * np.log(pc) + (1.0 - p) * np.log(1.0 - pc))
