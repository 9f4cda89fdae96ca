"""Finite-difference second-order estimators and the two ball projections.

Each estimator costs exactly two gradient evaluations of the lower objective
(a central difference along the probe vector), so the combined solver step
stays at seven first-order gradients per iteration. The calls are made even
for a zero probe, keeping the budget invariant.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .problem import BilevelOracle

Array = np.ndarray


@dataclass(frozen=True)
class FdConfig:
    """Finite-difference step size for the central-difference estimators."""

    step: float = 1e-5

    def __post_init__(self) -> None:
        if not self.step > 0:
            raise ValueError(f"finite-difference step must be positive, got {self.step}")
        if self.step < 1e-9:
            warnings.warn(
                f"finite-difference step {self.step:g} is below 1e-9; "
                "expect cancellation noise in float64",
                stacklevel=2,
            )


def fd_hvp(oracle: BilevelOracle, x: Array, y: Array, v: Array, cfg: FdConfig = FdConfig()) -> Array:
    """Hessian-vector product estimate along v via a central difference.

    [grad_g_y(x, y + step*v) - grad_g_y(x, y - step*v)] / (2*step); exact up
    to rounding when g is quadratic in y.
    """
    d = cfg.step
    return (oracle.grad_g_y(x, y + d * v) - oracle.grad_g_y(x, y - d * v)) / (2.0 * d)


def fd_jvp(oracle: BilevelOracle, x: Array, y: Array, v: Array, cfg: FdConfig = FdConfig()) -> Array:
    """Mixed-derivative product estimate along v via a central difference.

    [grad_g_x(x, y + step*v) - grad_g_x(x, y - step*v)] / (2*step); exact up
    to rounding for bilinear coupling.
    """
    d = cfg.step
    return (oracle.grad_g_x(x, y + d * v) - oracle.grad_g_x(x, y - d * v)) / (2.0 * d)


def project_ball(v: Array, radius: float) -> Array:
    """Euclidean projection onto the ball of the given radius."""
    if radius <= 0:
        raise ValueError(f"radius must be positive, got {radius}")
    v = np.asarray(v, dtype=float)
    nv = float(np.linalg.norm(v))
    if nv <= radius:
        return v.copy()
    return v * (radius / nv)


def cap_norm(h: Array, cap: float) -> Array:
    """Norm cap applied to an estimated Hessian-vector product.

    Same Euclidean ball projection as ``project_ball``; kept as its own name
    because it plays a different role (bounding the estimated product rather
    than constraining an iterate).
    """
    return project_ball(h, cap)


def surrogate_hypergrad(oracle: BilevelOracle, x: Array, y: Array, v: Array, cfg: FdConfig = FdConfig()) -> Array:
    """Hypergradient surrogate: grad_f_x(x, y) - fd_jvp(oracle, x, y, v)."""
    return oracle.grad_f_x(x, y) - fd_jvp(oracle, x, y, v, cfg)


def r_grad_estimate(
    oracle: BilevelOracle,
    x: Array,
    y: Array,
    v: Array,
    cfg: FdConfig = FdConfig(),
    cap: float = np.inf,
) -> Array:
    """Residual direction for the auxiliary variable.

    cap_norm(fd_hvp(...), cap) - grad_f_y(x, y): the gradient, in v, of the
    quadratic model whose minimizer is the inverse-Hessian-vector product the
    auxiliary variable tracks.
    """
    if np.isinf(cap):
        h = fd_hvp(oracle, x, y, v, cfg)
    else:
        h = cap_norm(fd_hvp(oracle, x, y, v, cfg), cap)
    return h - oracle.grad_f_y(x, y)
