"""Exact second-order verification quantities.

These routines form the clamped-spectrum surrogate Hessian, the auxiliary
target v*, the exact hypergradient and the potential function used to audit
solver runs. They are test/diagnostic machinery: the solver's core path
never calls them.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import sym_eigen
from .problem import BilevelOracle, gradient_mapping

Array = np.ndarray


class SecondOrderUnavailable(ValueError):
    """The oracle lacks an evaluator this computation needs."""


@dataclass(frozen=True)
class ClampedSpectrum:
    """Eigendecomposition of a symmetric matrix with eigenvalues clamped
    into [lo, hi], giving an invertible positive definite surrogate.

    ``eigvals_raw`` are the original eigenvalues (ascending), ``eigvals`` the
    clamped ones, ``vecs`` the shared orthogonal eigenvector columns.
    """

    eigvals_raw: Array
    eigvals: Array
    vecs: Array
    lo: float
    hi: float

    def matrix(self) -> Array:
        m = (self.vecs * self.eigvals) @ self.vecs.T
        return (m + m.T) / 2.0

    def apply(self, w: Array) -> Array:
        return self.vecs @ (self.eigvals * (self.vecs.T @ w))

    def solve(self, w: Array) -> Array:
        return self.vecs @ ((self.vecs.T @ w) / self.eigvals)

    @property
    def condition(self) -> float:
        return float(np.max(self.eigvals) / np.min(self.eigvals))


def clamp_spectrum(h: Array, lo: float, hi: float, *, keep_sign: bool = False) -> ClampedSpectrum:
    """Clamp the spectrum of a symmetric matrix into [lo, hi].

    Default behaviour maps each signed eigenvalue e to min(max(e, lo), hi),
    so negative curvature is raised to ``lo`` and the surrogate is positive
    definite with condition number at most hi/lo. ``keep_sign=True`` instead
    clamps |e| into [lo, hi] and restores the sign; that variant exists for
    sensitivity experiments only and loses positive definiteness.
    """
    if not (0 < lo <= hi):
        raise ValueError(f"need 0 < lo <= hi, got lo={lo}, hi={hi}")
    w, vecs = sym_eigen(h)
    if keep_sign:
        clamped = np.sign(np.where(w == 0.0, 1.0, w)) * np.clip(np.abs(w), lo, hi)
    else:
        clamped = np.clip(w, lo, hi)
    return ClampedSpectrum(eigvals_raw=w, eigvals=clamped, vecs=vecs, lo=float(lo), hi=float(hi))


def _require(oracle: BilevelOracle, attr: str) -> None:
    if getattr(oracle, attr) is None:
        raise SecondOrderUnavailable(f"oracle does not provide {attr}")


def v_star(oracle: BilevelOracle, x: Array, y: Array, mu: float, l_g: float) -> Array:
    """Auxiliary target: clamped-Hessian inverse applied to grad_f_y(x, y)."""
    _require(oracle, "hess_g_yy")
    spec = clamp_spectrum(oracle.hess_g_yy(x, y), mu, l_g)
    return spec.solve(oracle.grad_f_y(x, y))


def exact_hypergrad(oracle: BilevelOracle, x: Array, y: Array, mu: float, l_g: float) -> Array:
    """Hypergradient with the clamped-Hessian inverse.

    grad_f_x(x, y) - cross_g_xy(x, y) @ v_star(x, y). Evaluated at
    y = y*(x) on a problem whose lower Hessian spectrum at minimizers lies
    inside [mu, l_g], this equals the true gradient of F(x) = f(x, y*(x)).
    """
    _require(oracle, "hess_g_yy")
    _require(oracle, "cross_g_xy")
    vs = v_star(oracle, x, y, mu, l_g)
    return oracle.grad_f_x(x, y) - oracle.cross_g_xy(x, y) @ vs


def exact_total_grad(oracle: BilevelOracle, x: Array, mu: float, l_g: float) -> Array:
    """Gradient of F(x) = f(x, y*(x)) via the closed-form lower solution."""
    _require(oracle, "y_star")
    return exact_hypergrad(oracle, x, oracle.y_star(x), mu, l_g)


def lower_gap(oracle: BilevelOracle, x: Array, y: Array) -> float:
    """Lower-level suboptimality g(x, y) - g(x, y*(x))."""
    _require(oracle, "lower_value")
    return float(oracle.g(x, y)) - float(oracle.lower_value(x))


def lyapunov(oracle: BilevelOracle, x: Array, y: Array, v: Array, mu: float, l_g: float, reg) -> float:
    """Potential function audited for per-step descent.

    F(x) + phi(x) + [g(x, y) - g(x, y*(x))] + ||v - v*(x, y)||^2, with
    F(x) = f(x, y*(x)). With the Zero regularizer the phi term vanishes and
    this is the unregularized potential.
    """
    _require(oracle, "y_star")
    _require(oracle, "lower_value")
    ys = oracle.y_star(x)
    upper = float(oracle.f(x, ys)) + reg.value(x)
    gap = float(oracle.g(x, y)) - float(oracle.lower_value(x))
    resid = v - v_star(oracle, x, y, mu, l_g)
    return upper + gap + float(resid @ resid)


def hypergrad_gap_bound(oracle: BilevelOracle, x: Array, y: Array, constants) -> tuple[float, float]:
    """Both sides of the hypergradient error bound.

    Returns (lhs, rhs) with
    lhs = ||exact_hypergrad(x, y) - grad F(x)||^2 and
    rhs = (2 L_hat^2 / mu) * (g(x, y) - g(x, y*(x))),
    so callers can assert lhs <= rhs * (1 + slack).
    """
    _require(oracle, "y_star")
    _require(oracle, "lower_value")
    mu, l_g = constants.mu, constants.l_g
    est = exact_hypergrad(oracle, x, y, mu, l_g)
    grad_f = exact_total_grad(oracle, x, mu, l_g)
    diff = est - grad_f
    lhs = float(diff @ diff)
    rhs = (2.0 * constants.l_hat_sq / mu) * (float(oracle.g(x, y)) - float(oracle.lower_value(x)))
    return lhs, rhs


def exact_grad_map_norm_sq(oracle: BilevelOracle, x: Array, mu: float, l_g: float, gamma: float, reg) -> float:
    """Squared norm of the gradient mapping driven by the exact hypergradient."""
    grad_f = exact_total_grad(oracle, x, mu, l_g)
    gm = gradient_mapping(x, grad_f, gamma, reg)
    return float(gm @ gm)


__all__ = [
    "ClampedSpectrum",
    "SecondOrderUnavailable",
    "clamp_spectrum",
    "v_star",
    "exact_hypergrad",
    "exact_total_grad",
    "lower_gap",
    "lyapunov",
    "hypergrad_gap_bound",
    "exact_grad_map_norm_sq",
]
