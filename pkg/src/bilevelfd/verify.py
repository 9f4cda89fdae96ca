"""Self-contained verification checks behind the ``verify`` CLI command.

Each check compares an observed quantity against a bound and reports
pass/fail; the suite never fails fast. The quick level covers the scalar
problem and small random instances in a few seconds; the full level adds the
benchmark-scale properties (gradient-dominance constant, end-to-end solve,
potential descent, rate ratio).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import exact, solver
from .benchmarks import gen_matsense, gen_plgame, toy_problem
from .estimators import FdConfig, cap_norm, fd_hvp, fd_jvp, project_ball
from .numerics import make_rng, random_orthogonal, sym_eigen, symmetrize
from .problem import BilevelOracle, Zero


@dataclass
class CheckResult:
    name: str
    observed: float
    bound: float
    passed: bool
    note: str = ""


def _leq(name: str, observed: float, bound: float, note: str = "") -> CheckResult:
    return CheckResult(name, float(observed), float(bound), bool(observed <= bound), note)


def _geq(name: str, observed: float, bound: float, note: str = "") -> CheckResult:
    return CheckResult(name, float(observed), float(bound), bool(observed >= bound), note)


def _random_quadratic(rng, d: int, p: int) -> tuple[BilevelOracle, np.ndarray, np.ndarray]:
    """g = y'Ay/2 + x'By with random symmetric A and dense B."""
    A = symmetrize(rng.standard_normal((p, p)))
    B = rng.standard_normal((d, p))
    oracle = BilevelOracle(
        dim_x=d,
        dim_y=p,
        f=lambda x, y: 0.0,
        g=lambda x, y: float(0.5 * y @ (A @ y) + x @ (B @ y)),
        grad_f_x=lambda x, y: np.zeros(d),
        grad_f_y=lambda x, y: np.zeros(p),
        grad_g_x=lambda x, y: B @ y,
        grad_g_y=lambda x, y: A @ y + B.T @ x,
        hess_g_yy=lambda x, y: A,
        cross_g_xy=lambda x, y: B,
    )
    return oracle, A, B


def _toy_points(rng, count: int, y_lo: float = -3.0, y_hi: float = 3.0):
    xs = rng.uniform(1.0, 2.0, count)
    ys = rng.uniform(y_lo, y_hi, count)
    return xs, ys


def check_eigen_reconstruction() -> CheckResult:
    rng = make_rng(42)
    m = symmetrize(rng.standard_normal((8, 8)))
    w, vecs = sym_eigen(m)
    err = np.linalg.norm((vecs * w) @ vecs.T - m)
    bound = 1e-10 * (1.0 + np.linalg.norm(m))
    return _leq("eigen_reconstruction", err, bound, "random 8x8, seed 42")


def check_clamp_properties() -> list[CheckResult]:
    rng = make_rng(7)
    results = []

    spec = exact.clamp_spectrum(np.diag([-1.0, 0.5, 3.0]), 1.0, 2.0)
    results.append(
        _leq(
            "clamp_elementwise",
            float(np.max(np.abs(np.sort(spec.eigvals) - np.array([1.0, 1.0, 2.0])))),
            1e-12,
            "diag(-1, 0.5, 3) into [1, 2]",
        )
    )

    h = symmetrize(rng.standard_normal((10, 10)))
    once = exact.clamp_spectrum(h, 0.5, 2.0).matrix()
    twice = exact.clamp_spectrum(once, 0.5, 2.0).matrix()
    results.append(_leq("clamp_idempotent", float(np.linalg.norm(twice - once)), 1e-9))

    q = random_orthogonal(rng, 10)
    conj = exact.clamp_spectrum(symmetrize(q @ h @ q.T), 0.5, 2.0).matrix()
    direct = q @ once @ q.T
    results.append(_leq("clamp_conjugation", float(np.linalg.norm(conj - direct)), 1e-9))

    vals = rng.uniform(0.6, 1.9, 6)
    q6 = random_orthogonal(rng, 6)
    spd = symmetrize(q6 @ np.diag(vals) @ q6.T)  # spectrum strictly inside the clamp range
    spec = exact.clamp_spectrum(spd, 0.5, 2.0)
    results.append(
        _leq(
            "clamp_identity_on_range",
            float(np.linalg.norm(spec.matrix() - spd)),
            1e-9,
            "spectrum already inside [mu, L]",
        )
    )

    grad = rng.standard_normal(6)
    vs = spec.solve(grad)
    resid = np.linalg.norm(spec.apply(vs) - grad)
    results.append(_leq("vstar_residual", float(resid), 1e-9 * (1.0 + float(np.linalg.norm(grad)))))
    return results


def check_quadratic_exactness() -> list[CheckResult]:
    rng = make_rng(1)
    oracle, A, B = _random_quadratic(rng, 10, 10)
    x = rng.standard_normal(10)
    y = rng.standard_normal(10)
    v = rng.standard_normal(10)
    results = []
    for step_size in (1e-3, 1e-5):
        cfg = FdConfig(step_size)
        hv_err = np.linalg.norm(fd_hvp(oracle, x, y, v, cfg) - A @ v) / np.linalg.norm(A @ v)
        jv_err = np.linalg.norm(fd_jvp(oracle, x, y, v, cfg) - B @ v) / np.linalg.norm(B @ v)
        results.append(_leq(f"hvp_quadratic_rel_{step_size:g}", float(hv_err), 1e-8))
        results.append(_leq(f"jvp_quadratic_rel_{step_size:g}", float(jv_err), 1e-8))
    return results


def check_fd_consistency(fd_step: float) -> CheckResult:
    """Absolute accuracy of the Hessian-vector estimate at the configured step."""
    oracle = toy_problem().oracle()
    x = np.array([1.5])
    y = np.array([0.3])
    v = np.array([1.0])
    est = fd_hvp(oracle, x, y, v, FdConfig(fd_step))
    truth = oracle.hess_g_yy(x, y) @ v
    return _leq(
        "fd_consistency_at_step",
        float(np.abs(est - truth)[0]),
        5e-9,
        f"toy point, step {fd_step:g}",
    )


def check_fd_halving_order() -> CheckResult:
    """Halving the probe step must cut the estimate error by >= 1.8x."""
    oracle = toy_problem().oracle()
    rng = make_rng(3)
    worst = np.inf
    for _ in range(20):
        x = np.array([rng.uniform(1.0, 2.0)])
        y = np.array([rng.uniform(0.2, 0.6)])
        v = np.array([rng.uniform(0.5, 1.5)])
        truth = oracle.hess_g_yy(x, y) @ v
        errs = [
            float(np.abs(fd_hvp(oracle, x, y, v, FdConfig(s)) - truth)[0])
            for s in (1e-3, 5e-4, 2.5e-4)
        ]
        for big, small in zip(errs, errs[1:]):
            worst = min(worst, big / small)
    return _geq("fd_halving_order", worst, 1.8, "20 toy points, ladder 1e-3 / 5e-4 / 2.5e-4")


def check_estimator_bias_bound(fd_step: float = 1e-5) -> CheckResult:
    """Capped estimate vs clamped analytic product within L_gyy * r_v^2 * step."""
    prob = toy_problem()
    oracle = prob.oracle()
    c = prob.constants()
    hp = prob.default_hyperparams()
    rng = make_rng(11)
    worst = 0.0
    for _ in range(20):
        x = np.array([rng.uniform(1.0, 2.0)])
        y = np.array([rng.uniform(-0.4, 0.4)])  # curvature inside [mu, l_g] here
        v = np.array([rng.uniform(-2.0, 2.0)])
        est = cap_norm(fd_hvp(oracle, x, y, v, FdConfig(fd_step)), hp.hvp_cap)
        spec = exact.clamp_spectrum(oracle.hess_g_yy(x, y), c.mu, c.l_g)
        worst = max(worst, float(np.abs(est - spec.apply(v))[0]))
    return _leq("estimator_bias_bound", worst, c.l_gyy * hp.v_radius**2 * fd_step)


def check_projection_properties() -> list[CheckResult]:
    rng = make_rng(5)
    worst_idem = 0.0
    worst_expand = 0.0
    for _ in range(50):
        a = rng.standard_normal(6) * rng.uniform(0.1, 5.0)
        b = rng.standard_normal(6) * rng.uniform(0.1, 5.0)
        r = rng.uniform(0.5, 3.0)
        pa, pb = project_ball(a, r), project_ball(b, r)
        worst_idem = max(worst_idem, float(np.linalg.norm(project_ball(pa, r) - pa)))
        da = float(np.linalg.norm(pa - pb))
        db = float(np.linalg.norm(a - b))
        worst_expand = max(worst_expand, da - db)
    return [
        _leq("projection_idempotent", worst_idem, 1e-12),
        _leq("projection_nonexpansive", worst_expand, 1e-12),
    ]


def check_hypergrad_match() -> CheckResult:
    """Exact hypergradient at (x, y*(x)) vs the analytic 2x on a 50-point grid."""
    prob = toy_problem()
    oracle = prob.oracle()
    c = prob.constants()
    worst = 0.0
    for x in np.linspace(1.0, 2.0, 50):
        xv = np.array([x])
        hg = exact.exact_hypergrad(oracle, xv, oracle.y_star(xv), c.mu, c.l_g)
        worst = max(worst, float(np.abs(hg[0] - 2.0 * x)))
    return _leq("hypergrad_match_at_lower_solution", worst, 1e-8)


def check_hypergrad_gap_bound() -> CheckResult:
    prob = toy_problem()
    oracle = prob.oracle()
    c = prob.constants()
    rng = make_rng(13)
    worst = -np.inf
    xs, ys = _toy_points(rng, 100)
    for x, y in zip(xs, ys):
        lhs, rhs = exact.hypergrad_gap_bound(oracle, np.array([x]), np.array([y]), c)
        worst = max(worst, lhs - rhs * (1.0 + 1e-9))
    return _leq("hypergrad_gap_bound", worst, 0.0, "100 random toy points")


def check_gradient_budget() -> CheckResult:
    prob = toy_problem()
    hp = prob.default_hyperparams(iters=50)
    x0, y0, v0 = prob.default_init()
    result = solver.run(prob.oracle(), hp, prob.regularizer(), x0, y0, v0)
    return _leq(
        "gradient_budget",
        abs(result.gradient_calls - 7 * hp.iters),
        0,
        "7 first-order gradients per iteration",
    )


def check_toy_solve() -> list[CheckResult]:
    prob = toy_problem()
    hp = prob.default_hyperparams(iters=2000)
    x0, y0, v0 = prob.default_init()
    result = solver.run(prob.oracle(), hp, prob.regularizer(), x0, y0, v0)
    return [
        _leq("toy_solve_x_error", float(abs(result.x_final[0] - 1.0)), 1e-3),
        _leq("toy_solve_y_error", float(abs(result.y_final[0])), 1e-3),
    ]


def check_plgame_pl_inequality() -> CheckResult:
    prob = gen_plgame(d=10, seed=0, project_coupling=True)
    oracle = prob.oracle()
    mu = prob.pl_constant()
    rng = make_rng(17)
    worst = np.inf
    for _ in range(100):
        x = rng.standard_normal(prob.d)
        y = rng.standard_normal(prob.d)
        grad = oracle.grad_g_y(x, y)
        gap = oracle.g(x, y) - oracle.lower_value(x)
        if gap <= 1e-12:
            continue
        worst = min(worst, float(grad @ grad) / (2.0 * mu * gap))
    return _geq("plgame_pl_inequality", worst, 1.0 - 1e-9, "d=10, projected coupling")


def check_plgame_rank() -> CheckResult:
    prob = gen_plgame(d=20, l=10, seed=0)
    rank_p = int(np.sum(np.linalg.eigvalsh(prob.P) > 1e-8))
    rank_q = int(np.sum(np.linalg.eigvalsh(prob.Q) > 1e-8))
    return _leq("plgame_rank_deficiency", max(rank_p, rank_q), prob.l, "eigenvalues above 1e-8")


def check_sensing_gradient() -> CheckResult:
    prob = gen_matsense(d=6, r=2, n=60, seed=0)
    oracle = prob.oracle()
    rng = make_rng(19)
    x = rng.standard_normal(oracle.dim_x)
    y = rng.standard_normal(oracle.dim_y)
    grad = np.concatenate([oracle.grad_g_x(x, y), oracle.grad_g_y(x, y)])
    z0 = np.concatenate([x, y])
    fd = np.zeros_like(z0)
    eps = 1e-6
    for i in range(z0.size):
        zp, zm = z0.copy(), z0.copy()
        zp[i] += eps
        zm[i] -= eps
        fd[i] = (
            oracle.g(zp[: x.size], zp[x.size :]) - oracle.g(zm[: x.size], zm[x.size :])
        ) / (2 * eps)
    rel = float(np.linalg.norm(grad - fd) / np.linalg.norm(fd))
    return _leq("sensing_gradient_vs_fd", rel, 1e-6)


def check_potential_descent() -> CheckResult:
    prob = toy_problem()
    c = prob.constants()
    lam = solver.lambda_bound(l_g=c.l_g, l_breve_sq=c.l_breve_sq)
    tau = solver.tau_bound(l_g=c.l_g)
    gamma = solver.step_size_bounds(c, lam, tau)
    hp = prob.default_hyperparams(iters=1000)
    hp.lr_y, hp.lr_x, hp.lr_v = lam, gamma, tau
    hp.fd_step = 1e-6
    x0, y0, v0 = prob.default_init()
    result = solver.run(
        prob.oracle(),
        hp,
        prob.regularizer(),
        x0,
        y0,
        v0,
        options=solver.TraceOptions(lyapunov=True),
    )
    values = np.array([row.lyapunov for row in result.rows])
    worst = float(np.max(np.diff(values))) if len(values) > 1 else 0.0
    return _leq("potential_descent", worst, 1e-6, "guarantee-compliant steps, fd 1e-6")


def check_rate_ratio() -> list[CheckResult]:
    sums = {500: [], 1000: [], 2000: []}
    for seed in range(3):
        prob = gen_plgame(d=20, seed=seed)
        hp = prob.default_hyperparams(iters=2000, seed=seed)
        x0, y0, v0 = prob.default_init()
        result = solver.run(prob.oracle(), hp, prob.regularizer(), x0, y0, v0)
        gm = np.array([row.grad_map_norm_sq for row in result.rows])
        for horizon in sums:
            sums[horizon].append(gm[:horizon].mean())
    s = {h: float(np.mean(vals)) for h, vals in sums.items()}
    results = []
    for horizon in (500, 1000):
        ratio = s[2 * horizon] / s[horizon]
        results.append(
            CheckResult(
                f"rate_ratio_T{horizon}",
                ratio,
                0.75,
                0.35 <= ratio <= 0.75,
                "seed-averaged mean-square gradient mapping, bound is the upper edge",
            )
        )
    return results


def run_checks(level: str = "quick", fd_step: float = 1e-5) -> list[CheckResult]:
    if level not in ("quick", "full"):
        raise ValueError(f"unknown verify level {level!r}")
    results: list[CheckResult] = []
    results.append(check_eigen_reconstruction())
    results.extend(check_clamp_properties())
    results.extend(check_quadratic_exactness())
    results.append(check_fd_consistency(fd_step))
    results.append(check_fd_halving_order())
    results.append(check_estimator_bias_bound())
    results.extend(check_projection_properties())
    results.append(check_hypergrad_match())
    results.append(check_hypergrad_gap_bound())
    results.append(check_gradient_budget())
    if level == "full":
        results.extend(check_toy_solve())
        results.append(check_plgame_pl_inequality())
        results.append(check_plgame_rank())
        results.append(check_sensing_gradient())
        results.append(check_potential_descent())
        results.extend(check_rate_ratio())
    return results


def format_table(results: list[CheckResult]) -> str:
    name_w = max(len(r.name) for r in results)
    lines = [f"{'check':<{name_w}}  {'observed':>13}  {'bound':>13}  status"]
    for r in results:
        status = "pass" if r.passed else "FAIL"
        note = f"  ({r.note})" if r.note else ""
        lines.append(
            f"{r.name:<{name_w}}  {r.observed:>13.6g}  {r.bound:>13.6g}  {status}{note}"
        )
    return "\n".join(lines)
