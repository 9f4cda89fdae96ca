"""Bilevel problem interface: first-order oracles with optional second-order
hooks, nonsmooth regularizers with proximal maps, and the smoothness
constants that feed the step-size rules.

Oracles are plain bundles of pure callables over numpy arrays; they must be
safe for concurrent read-only evaluation. Regularizers and constants are
immutable.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Callable, Optional

import numpy as np

Array = np.ndarray
ValueFn = Callable[[Array, Array], float]
GradFn = Callable[[Array, Array], Array]
MatFn = Callable[[Array, Array], Array]


@dataclass(frozen=True)
class BilevelOracle:
    """Evaluation interface for an upper objective f and lower objective g.

    ``dim_x``/``dim_y`` fix the variable sizes. The four partial gradients
    are required; the second-order evaluators and the closed-form lower
    solution (``y_star``, ``lower_value`` = g(x, y*(x))) are optional and
    only used by the verification layer. ``hess_g_yy`` must return a
    symmetric (dim_y, dim_y) matrix, ``cross_g_xy`` a (dim_x, dim_y) matrix
    of mixed second derivatives.
    """

    dim_x: int
    dim_y: int
    f: ValueFn
    g: ValueFn
    grad_f_x: GradFn
    grad_f_y: GradFn
    grad_g_x: GradFn
    grad_g_y: GradFn
    hess_g_yy: Optional[MatFn] = None
    cross_g_xy: Optional[MatFn] = None
    y_star: Optional[Callable[[Array], Array]] = None
    lower_value: Optional[Callable[[Array], float]] = None

    @property
    def has_second_order(self) -> bool:
        return self.hess_g_yy is not None and self.cross_g_xy is not None

    @property
    def has_lower_solution(self) -> bool:
        return self.y_star is not None and self.lower_value is not None


class GradientCallCounter:
    """Mutable counter of first-order gradient evaluations."""

    __slots__ = ("calls",)

    def __init__(self) -> None:
        self.calls = 0


def counting_oracle(oracle: BilevelOracle) -> tuple[BilevelOracle, GradientCallCounter]:
    """Wrap the four partial-gradient evaluators with a shared call counter.

    Values, second-order evaluators and closed forms are passed through
    uncounted: the counter measures the algorithm's first-order budget only.
    """
    counter = GradientCallCounter()

    def wrap(fn: GradFn) -> GradFn:
        def counted(x: Array, y: Array) -> Array:
            counter.calls += 1
            return fn(x, y)

        return counted

    wrapped = replace(
        oracle,
        grad_f_x=wrap(oracle.grad_f_x),
        grad_f_y=wrap(oracle.grad_f_y),
        grad_g_x=wrap(oracle.grad_g_x),
        grad_g_y=wrap(oracle.grad_g_y),
    )
    return wrapped, counter


class Zero:
    """No regularizer: value 0 everywhere, prox is the identity."""

    def value(self, x: Array) -> float:
        return 0.0

    def prox(self, gamma: float, x: Array) -> Array:
        return np.asarray(x, dtype=float)

    def __repr__(self) -> str:
        return "Zero()"


class BoxIndicator:
    """Indicator of the box [lo, hi]: 0 inside, +inf outside; prox clips."""

    def __init__(self, lo, hi) -> None:
        lo = np.asarray(lo, dtype=float)
        hi = np.asarray(hi, dtype=float)
        if np.any(lo > hi):
            raise ValueError("box requires lo <= hi elementwise")
        self.lo = lo
        self.hi = hi

    def value(self, x: Array) -> float:
        x = np.asarray(x, dtype=float)
        if np.all(x >= self.lo) and np.all(x <= self.hi):
            return 0.0
        return float("inf")

    def prox(self, gamma: float, x: Array) -> Array:
        return np.clip(np.asarray(x, dtype=float), self.lo, self.hi)

    def __repr__(self) -> str:
        return f"BoxIndicator(lo={self.lo!r}, hi={self.hi!r})"


class L1:
    """Weighted l1 norm; prox is soft thresholding (exact ties map to 0)."""

    def __init__(self, weight: float) -> None:
        if weight < 0:
            raise ValueError("l1 weight must be nonnegative")
        self.weight = float(weight)

    def value(self, x: Array) -> float:
        return self.weight * float(np.abs(x).sum())

    def prox(self, gamma: float, x: Array) -> Array:
        x = np.asarray(x, dtype=float)
        thr = gamma * self.weight
        return np.sign(x) * np.maximum(np.abs(x) - thr, 0.0)

    def __repr__(self) -> str:
        return f"L1(weight={self.weight})"


def prox_step(x: Array, w: Array, gamma: float, reg) -> Array:
    """Proximal descent step: argmin_z <w, z> + ||z - x||^2 / (2 gamma) + phi(z).

    Equals ``reg.prox(gamma, x - gamma * w)``; with the Zero regularizer this
    is the plain gradient step x - gamma * w. ``gamma == 0`` is accepted as
    the degenerate limit (the prox of the anchor itself).
    """
    if gamma < 0:
        raise ValueError(f"gamma must be nonnegative, got {gamma}")
    x = np.asarray(x, dtype=float)
    w = np.asarray(w, dtype=float)
    return reg.prox(gamma, x - gamma * w)


def gradient_mapping(x: Array, grad: Array, gamma: float, reg) -> Array:
    """Composite stationarity measure: (x - prox_step(x, grad, gamma)) / gamma.

    For the Zero regularizer the mapping collapses to ``grad`` and is
    returned directly, avoiding the cancellation of the subtract-divide form
    at tiny step sizes.
    """
    if gamma <= 0:
        raise ValueError(f"gamma must be positive, got {gamma}")
    if isinstance(reg, Zero):
        return np.array(grad, dtype=float, copy=True)
    x = np.asarray(x, dtype=float)
    return (x - prox_step(x, grad, gamma, reg)) / gamma


@dataclass(frozen=True)
class SmoothnessConstants:
    """Problem smoothness/boundedness constants, user supplied per problem.

    ``mu`` is the gradient-dominance constant of the lower objective, ``l_f``
    and ``l_g`` Lipschitz constants of the partial gradients of f and g,
    ``c_fy``/``c_fx`` bounds on the partial gradients of f, ``c_gxy``/``c_gy``
    bounds on the mixed second derivative and lower gradient of g, and
    ``l_gxy``/``l_gyy`` Lipschitz constants of the second derivatives of g.
    Derived quantities are recomputed on access, never stored.
    """

    mu: float
    l_f: float
    l_g: float
    c_fy: float
    c_fx: float
    c_gxy: float
    c_gy: float
    l_gxy: float
    l_gyy: float

    def __post_init__(self) -> None:
        if not self.mu > 0:
            raise ValueError("mu must be positive")
        if self.l_g < self.mu:
            raise ValueError("l_g must be at least mu")
        for name in ("l_f", "c_fy", "c_fx", "c_gxy", "c_gy", "l_gxy", "l_gyy"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")

    @property
    def kappa(self) -> float:
        return self.c_gxy / self.mu

    @property
    def _second_order_mix(self) -> float:
        # shared factor C_gxy * L_gyy / mu^2 + L_gxy / mu
        return self.c_gxy * self.l_gyy / self.mu**2 + self.l_gxy / self.mu

    @property
    def l_y(self) -> float:
        return self._second_order_mix * (1.0 + self.kappa)

    @property
    def l_F(self) -> float:
        return (self.l_f + self.l_f * self.kappa + self.c_fy * self._second_order_mix) * (1.0 + self.kappa)

    @property
    def l_G(self) -> float:
        return (self.l_g + self.l_g * self.kappa + self.c_gy * self._second_order_mix) * (1.0 + self.kappa)

    @property
    def l_hat_sq(self) -> float:
        return 4.0 * (
            self.l_f**2
            + self.l_gxy**2 * self.c_fy**2 / self.mu**2
            + self.l_gyy**2 * self.c_gxy**2 * self.c_fy**2 / self.mu**4
            + self.l_f**2 * self.c_gxy**2 / self.mu**2
        )

    @property
    def l_breve_sq(self) -> float:
        return self.l_f**2 / self.mu**2 + self.l_gyy**2 * self.c_fx**2 / self.mu**4
