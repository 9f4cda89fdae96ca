"""Single-loop bilevel solver.

One iteration evaluates three directions at the current triple (x, y, v) and
commits all three updates simultaneously:

    u = grad_g_y(x, y)                          lower descent direction
    w = grad_f_x(x, y) - fd_jvp(x, y, v)        hypergradient surrogate
    h = cap_norm(fd_hvp(x, y, v)) - grad_f_y    auxiliary residual

    y' = y - lr_y * u
    x' = prox_step(x, w, lr_x, reg)
    v' = project_ball(v - lr_v * h, v_radius)

Cost: exactly seven first-order gradient evaluations per iteration, tracked
by a call counter on the oracle. Optional trace columns (lower gap,
potential, exact gradient mapping) are computed through the raw, uncounted
oracle so the budget stays meaningful.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import exact
from .estimators import FdConfig, project_ball, r_grad_estimate, surrogate_hypergrad
from .numerics import make_rng
from .problem import (
    BilevelOracle,
    SmoothnessConstants,
    Zero,
    counting_oracle,
    gradient_mapping,
    prox_step,
)

Array = np.ndarray

DIVERGENCE_NORM_CAP = 1e12


class DivergenceError(RuntimeError):
    """A non-finite or runaway iterate; carries the partial trace in .rows."""

    def __init__(self, message: str, iteration: int, quantity: str):
        super().__init__(message)
        self.iteration = iteration
        self.quantity = quantity
        self.rows: list[TraceRow] = []


@dataclass
class HyperParams:
    """Tuning constants of the solver.

    ``lr_y``/``lr_x``/``lr_v`` are the three step sizes, ``fd_step`` the
    finite-difference probe length, ``v_radius`` the ball radius of the
    auxiliary variable and ``hvp_cap`` the norm cap on the estimated
    Hessian-vector product (at most v_radius * lip_g when lip_g is known).
    ``mu``/``lip_g`` are the curvature clamp bounds, only needed for the
    optional exact trace columns.
    """

    lr_y: float = 0.01
    lr_x: float = 0.01
    lr_v: float = 0.01
    fd_step: float = 1e-5
    v_radius: float = 10.0
    hvp_cap: float = 100.0
    mu: Optional[float] = None
    lip_g: Optional[float] = None
    iters: int = 1000
    seed: int = 0

    def validate(self) -> None:
        for name in ("lr_y", "lr_x", "lr_v", "fd_step", "v_radius", "hvp_cap"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if self.iters < 1:
            raise ValueError(f"iters must be at least 1, got {self.iters}")
        if self.mu is not None and not self.mu > 0:
            raise ValueError(f"mu must be positive, got {self.mu}")
        if self.lip_g is not None:
            if self.mu is not None and self.lip_g < self.mu:
                raise ValueError("lip_g must be at least mu")
            if self.hvp_cap > self.v_radius * self.lip_g * (1 + 1e-12):
                raise ValueError(
                    f"hvp_cap={self.hvp_cap} exceeds v_radius * lip_g = "
                    f"{self.v_radius * self.lip_g}"
                )


@dataclass
class SolverState:
    """Iterate triple at the start of iteration t (1-based)."""

    t: int
    x: Array
    y: Array
    v: Array


@dataclass
class TraceRow:
    """Per-iteration metrics, all evaluated at the pre-step state."""

    t: int
    grad_map_norm_sq: float
    surrogate_norm: float
    lower_grad_norm: float
    v_residual_norm: float
    f_val: float
    g_val: float
    lower_gap: Optional[float] = None
    lyapunov: Optional[float] = None
    exact_grad_map_norm_sq: Optional[float] = None
    extras: dict = field(default_factory=dict)
    gradient_calls: int = 0
    wall_time_ns: Optional[int] = None


@dataclass(frozen=True)
class TraceOptions:
    """Which optional trace columns to record.

    ``lower_gap`` needs a closed-form lower value (empty otherwise);
    ``lyapunov`` and ``exact_grad_map`` additionally need second-order
    evaluators and the mu/lip_g clamp bounds. ``timing`` appends cumulative
    wall time and makes the trace non-reproducible byte for byte.
    """

    lower_gap: bool = False
    lyapunov: bool = False
    exact_grad_map: bool = False
    timing: bool = False


@dataclass
class RunResult:
    rows: list
    x_out: Array
    t_out: int
    x_final: Array
    y_final: Array
    final_state: SolverState
    gradient_calls: int


def _check_finite(name: str, arr: Array, iteration: int) -> None:
    if not np.all(np.isfinite(arr)):
        raise DivergenceError(
            f"{name} became non-finite at iteration {iteration}", iteration, name
        )


def step(state: SolverState, hp: HyperParams, oracle: BilevelOracle, reg) -> tuple[SolverState, TraceRow]:
    """One iteration; reads (x, y, v) and returns the updated state plus the
    metrics row for the pre-step point. Does not validate hp."""
    x, y, v = state.x, state.y, state.v
    t = state.t
    cfg = FdConfig(hp.fd_step)

    u = oracle.grad_g_y(x, y)
    w = surrogate_hypergrad(oracle, x, y, v, cfg)
    h = r_grad_estimate(oracle, x, y, v, cfg, hp.hvp_cap)
    _check_finite("lower gradient u", u, t)
    _check_finite("hypergradient surrogate w", w, t)
    _check_finite("auxiliary residual h", h, t)

    y_new = y - hp.lr_y * u
    x_new = prox_step(x, w, hp.lr_x, reg)
    v_new = project_ball(v - hp.lr_v * h, hp.v_radius)
    _check_finite("iterate x", x_new, t)
    _check_finite("iterate y", y_new, t)
    _check_finite("iterate v", v_new, t)
    if float(np.linalg.norm(y_new)) > DIVERGENCE_NORM_CAP:
        raise DivergenceError(
            f"iterate y exceeded norm cap {DIVERGENCE_NORM_CAP:g} at iteration {t}",
            t,
            "iterate y",
        )
    if float(np.linalg.norm(v_new)) > hp.v_radius * (1 + 1e-12):
        raise RuntimeError("ball projection failed to bound v")  # pragma: no cover

    if isinstance(reg, Zero):
        gm = w
    elif hp.lr_x > 0:
        gm = (x - x_new) / hp.lr_x
    else:
        gm = np.full_like(x, np.nan)  # mapping undefined at the zero-step limit

    row = TraceRow(
        t=t,
        grad_map_norm_sq=float(gm @ gm),
        surrogate_norm=float(np.linalg.norm(w)),
        lower_grad_norm=float(np.linalg.norm(u)),
        v_residual_norm=float(np.linalg.norm(h)),
        f_val=float(oracle.f(x, y)),
        g_val=float(oracle.g(x, y)),
    )
    return SolverState(t + 1, x_new, y_new, v_new), row


def _validate_options(oracle: BilevelOracle, hp: HyperParams, options: TraceOptions) -> None:
    if options.lyapunov or options.exact_grad_map:
        if not oracle.has_lower_solution:
            raise exact.SecondOrderUnavailable(
                "lyapunov/exact_grad_map columns need closed-form y_star and lower_value"
            )
        if oracle.hess_g_yy is None:
            raise exact.SecondOrderUnavailable(
                "lyapunov/exact_grad_map columns need the lower Hessian evaluator"
            )
        if hp.mu is None or hp.lip_g is None:
            raise ValueError("lyapunov/exact_grad_map columns need hp.mu and hp.lip_g")
    if options.exact_grad_map and oracle.cross_g_xy is None:
        raise exact.SecondOrderUnavailable("exact_grad_map column needs the mixed-derivative evaluator")


def run(
    oracle: BilevelOracle,
    hp: HyperParams,
    reg=None,
    x0: Optional[Array] = None,
    y0: Optional[Array] = None,
    v0: Optional[Array] = None,
    options: Optional[TraceOptions] = None,
    extra_metrics: Optional[Callable[[Array, Array], dict]] = None,
    callback: Optional[Callable[[SolverState, TraceRow], None]] = None,
) -> RunResult:
    """Run ``hp.iters`` iterations from (x0, y0, v0).

    Defaults start from zeros; v0 is projected onto the v_radius ball. The
    returned ``x_out`` is the iterate at an index drawn uniformly from
    {1..iters} with ``hp.seed`` (the randomized output rule); ``x_final`` and
    ``y_final`` are the iterates at the start of the last iteration, and
    ``final_state`` holds the post-update triple. The trace has exactly
    ``hp.iters`` rows. On divergence the partial trace rides on the raised
    ``DivergenceError.rows``.
    """
    hp.validate()
    reg = Zero() if reg is None else reg
    options = TraceOptions() if options is None else options
    _validate_options(oracle, hp, options)

    x = np.zeros(oracle.dim_x) if x0 is None else np.array(x0, dtype=float, copy=True)
    y = np.zeros(oracle.dim_y) if y0 is None else np.array(y0, dtype=float, copy=True)
    v = np.zeros(oracle.dim_y) if v0 is None else np.array(v0, dtype=float, copy=True)
    if x.shape != (oracle.dim_x,) or y.shape != (oracle.dim_y,) or v.shape != (oracle.dim_y,):
        raise ValueError(
            f"initial shapes {x.shape}/{y.shape}/{v.shape} do not match oracle dims "
            f"({oracle.dim_x},)/({oracle.dim_y},)"
        )
    v = project_ball(v, hp.v_radius)

    counted, counter = counting_oracle(oracle)
    t_out = 1 + int(make_rng(hp.seed).integers(hp.iters))

    rows: list[TraceRow] = []
    x_out = x_final = y_final = None
    state = SolverState(1, x, y, v)
    start_ns = time.perf_counter_ns()

    for t in range(1, hp.iters + 1):
        if t == t_out:
            x_out = state.x.copy()
        if t == hp.iters:
            x_final = state.x.copy()
            y_final = state.y.copy()

        try:
            next_state, row = step(state, hp, counted, reg)
        except DivergenceError as err:
            err.rows = rows
            raise

        row.gradient_calls = counter.calls
        if options.lower_gap:
            row.lower_gap = (
                exact.lower_gap(oracle, state.x, state.y) if oracle.lower_value is not None else None
            )
        if options.lyapunov:
            row.lyapunov = exact.lyapunov(oracle, state.x, state.y, state.v, hp.mu, hp.lip_g, reg)
        if options.exact_grad_map:
            row.exact_grad_map_norm_sq = exact.exact_grad_map_norm_sq(
                oracle, state.x, hp.mu, hp.lip_g, hp.lr_x, reg
            )
        if extra_metrics is not None:
            row.extras = extra_metrics(state.x, state.y)
        if options.timing:
            row.wall_time_ns = time.perf_counter_ns() - start_ns

        rows.append(row)
        if callback is not None:
            callback(state, row)
        state = next_state

    return RunResult(
        rows=rows,
        x_out=x_out,
        t_out=t_out,
        x_final=x_final,
        y_final=y_final,
        final_state=state,
        gradient_calls=counter.calls,
    )


def gamma_bound(
    lam: float,
    tau: float,
    *,
    l_F: float,
    l_G: float,
    l_g: float,
    mu: float,
    l_breve_sq: float,
    c_gxy: float,
    l_f: float,
    l_gxy: float,
    r_v: float,
) -> float:
    """Six-way ceiling on the upper step size for the O(1/T) guarantee.

    min(1/(2 L_F), lam*mu/(16 L_G), mu/(16 L_g^2), 3/(160 Lbreve^2),
        mu*tau/(30 C_gxy^2), mu^2*lam/(30 (L_f^2 + r_v^2 L_gxy^2))).
    """
    return min(
        1.0 / (2.0 * l_F),
        lam * mu / (16.0 * l_G),
        mu / (16.0 * l_g**2),
        3.0 / (160.0 * l_breve_sq),
        mu * tau / (30.0 * c_gxy**2),
        mu**2 * lam / (30.0 * (l_f**2 + r_v**2 * l_gxy**2)),
    )


def lambda_bound(*, l_g: float, l_breve_sq: float) -> float:
    """Ceiling on the lower step size: min(1/(2 L_g), 3/(80 Lbreve^2))."""
    return min(1.0 / (2.0 * l_g), 3.0 / (80.0 * l_breve_sq))


def tau_bound(*, l_g: float) -> float:
    """Ceiling on the auxiliary step size: 1/(6 L_g)."""
    return 1.0 / (6.0 * l_g)


def step_size_bounds(
    constants: SmoothnessConstants,
    lam: float,
    tau: float,
    r_v: Optional[float] = None,
) -> float:
    """Largest guarantee-compliant upper step for chosen (lam, tau).

    Validates lam and tau against their own ceilings first and raises a
    descriptive ValueError on violation. ``r_v`` defaults to c_fy / mu.
    """
    if r_v is None:
        r_v = constants.c_fy / constants.mu
    lam_max = lambda_bound(l_g=constants.l_g, l_breve_sq=constants.l_breve_sq)
    tau_max = tau_bound(l_g=constants.l_g)
    if not 0 < lam <= lam_max:
        raise ValueError(f"lam={lam:g} violates 0 < lam <= {lam_max:g}")
    if not 0 < tau <= tau_max:
        raise ValueError(f"tau={tau:g} violates 0 < tau <= {tau_max:g}")
    return gamma_bound(
        lam,
        tau,
        l_F=constants.l_F,
        l_G=constants.l_G,
        l_g=constants.l_g,
        mu=constants.mu,
        l_breve_sq=constants.l_breve_sq,
        c_gxy=constants.c_gxy,
        l_f=constants.l_f,
        l_gxy=constants.l_gxy,
        r_v=r_v,
    )
