"""Element-wise regression losses for landmark coordinates.

Every loss here maps a residual ``x = s_i - s'_i`` to a non-negative penalty
``f(x)`` and exposes the analytic derivative ``f'(x)``.  The shape-level loss
sums ``f`` over all ``2L`` coordinates of a shape vector.

Conventions at non-differentiable points:

* the subgradient at ``x = 0`` is 0 for every loss;
* at ``|x| = w`` the Wing value comes from the logarithmic branch and the
  slope from the linear one.  Both branches agree there by construction of
  the offset ``c``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

MIN_EPSILON = 1e-6


class LossDomainError(ValueError):
    """Raised for non-finite residuals."""


class ShapeMismatchError(ValueError):
    """Raised when predicted and ground-truth shapes differ in size."""


@dataclass(frozen=True)
class WingParams:
    """Parameters of the Wing loss.

    Parameters
    ----------
    w : float
        Half-width of the logarithmic region, in residual units.
    epsilon : float
        Curvature limiter of the logarithmic region.  Very small values make
        the slope near zero (``w / epsilon``) explode, so anything below
        ``1e-6`` is rejected.

    The offset ``c = w - w * ln(1 + w / epsilon)`` is derived here and cannot
    be supplied by the caller.
    """

    w: float
    epsilon: float
    c: float = field(init=False)

    def __post_init__(self):
        w = float(self.w)
        eps = float(self.epsilon)
        if not (math.isfinite(w) and w > 0):
            raise ValueError(f"Wing w must be positive and finite, got {self.w!r}")
        if not (math.isfinite(eps) and eps >= MIN_EPSILON):
            raise ValueError(f"Wing epsilon must be >= {MIN_EPSILON}, got {self.epsilon!r}")
        object.__setattr__(self, "w", w)
        object.__setattr__(self, "epsilon", eps)
        object.__setattr__(self, "c", w - w * math.log1p(w / eps))


def _check_finite(x):
    x = np.asarray(x, dtype=float)
    if not np.all(np.isfinite(x)):
        raise LossDomainError("residuals must be finite")
    return x


class Loss:
    """Base class; subclasses implement ``_value`` and ``_grad`` on arrays."""

    name = "loss"

    def value(self, x):
        """Element-wise loss.  Accepts scalars or arrays."""
        x = _check_finite(x)
        out = self._value(x)
        return float(out) if out.ndim == 0 else out

    def grad(self, x):
        """Element-wise derivative (subgradient 0 at the origin)."""
        x = _check_finite(x)
        out = self._grad(x)
        return float(out) if out.ndim == 0 else out

    def __eq__(self, other):
        return type(self) is type(other) and self.__dict__ == other.__dict__

    def __hash__(self):
        return hash((type(self).__name__, tuple(sorted(self.__dict__.items()))))

    def __repr__(self):
        return f"{type(self).__name__}()"


class L2Loss(Loss):
    name = "l2"

    def _value(self, x):
        return 0.5 * x * x

    def _grad(self, x):
        return x.copy()


class L1Loss(Loss):
    name = "l1"

    def _value(self, x):
        return np.abs(x)

    def _grad(self, x):
        return np.sign(x)


class SmoothL1Loss(Loss):
    """Quadratic on (-1, 1), shifted absolute value elsewhere."""

    name = "smooth_l1"

    def _value(self, x):
        ax = np.abs(x)
        return np.where(ax < 1.0, 0.5 * x * x, ax - 0.5)

    def _grad(self, x):
        return np.where(np.abs(x) < 1.0, x, np.sign(x))


class WingLoss(Loss):
    """``w ln(1 + |x|/epsilon)`` inside ``(-w, w)``, ``|x| - c`` outside."""

    name = "wing"

    def __init__(self, w=10.0, epsilon=2.0):
        self.params = WingParams(w, epsilon)

    @property
    def w(self):
        return self.params.w

    @property
    def epsilon(self):
        return self.params.epsilon

    def _value(self, x):
        p = self.params
        ax = np.abs(x)
        return np.where(ax <= p.w, p.w * np.log1p(ax / p.epsilon), ax - p.c)

    def _grad(self, x):
        p = self.params
        ax = np.abs(x)
        return np.sign(x) * np.where(ax < p.w, p.w / (p.epsilon + ax), 1.0)

    def __repr__(self):
        return f"WingLoss(w={self.w:g}, epsilon={self.epsilon:g})"


LOSSES = {cls.name: cls for cls in (L2Loss, L1Loss, SmoothL1Loss, WingLoss)}


def make_loss(name, w=10.0, epsilon=2.0) -> Loss:
    """Build a loss by name: ``l2``, ``l1``, ``smooth_l1`` or ``wing``."""
    key = name.lower().replace("-", "_")
    if key == "smoothl1":
        key = "smooth_l1"
    if key not in LOSSES:
        raise ValueError(f"unknown loss {name!r}; choose from {sorted(LOSSES)}")
    if key == "wing":
        return WingLoss(w, epsilon)
    return LOSSES[key]()


def loss_elem(kind: Loss, x) -> float:
    return kind.value(x)


def grad_elem(kind: Loss, x) -> float:
    return kind.grad(x)


def _residual(predicted, truth):
    predicted = np.asarray(predicted, dtype=float)
    truth = np.asarray(truth, dtype=float)
    if predicted.shape != truth.shape:
        raise ShapeMismatchError(
            f"predicted shape {predicted.shape} does not match truth {truth.shape}"
        )
    return predicted - truth


def loss_shape(kind: Loss, predicted, truth) -> float:
    """Sum of element losses over every coordinate residual."""
    return float(np.sum(kind.value(_residual(predicted, truth))))


def grad_shape(kind: Loss, predicted, truth) -> np.ndarray:
    """Gradient of :func:`loss_shape` with respect to ``predicted``."""
    return np.asarray(kind.grad(_residual(predicted, truth)), dtype=float)


def batch_loss(kind: Loss, predicted, truth):
    """Mean over samples of the per-sample shape loss, and its gradient.

    ``predicted`` and ``truth`` are ``(N, 2L)`` arrays.  The batch reduction is
    the mean, so the gradient carries a ``1/N`` factor.
    """
    r = _residual(predicted, truth)
    if r.ndim != 2:
        raise ShapeMismatchError("batch_loss expects (N, 2L) arrays")
    n = r.shape[0]
    value = float(np.sum(kind.value(r))) / n
    grad = np.asarray(kind.grad(r), dtype=float) / n
    return value, grad
