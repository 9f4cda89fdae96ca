"""Acceptance suite: one test per criterion, each printing a pass/fail line.

Run with ``pytest tests/test_acceptance.py -v -s`` to see the per-criterion
lines; every check also asserts, so a plain pytest run gates on them.
"""

import time

import numpy as np

from bilevelfd.benchmarks import gen_matsense, gen_plgame, sensing_metrics, toy_problem
from bilevelfd.cli import main
from bilevelfd.estimators import FdConfig, fd_hvp, fd_jvp
from bilevelfd.exact import exact_hypergrad, hypergrad_gap_bound
from bilevelfd.numerics import make_rng, symmetrize
from bilevelfd.problem import BilevelOracle
from bilevelfd.solver import (
    TraceOptions,
    lambda_bound,
    run,
    step_size_bounds,
    tau_bound,
)


def _report(num: int, name: str, ok: bool, detail: str, elapsed: float, budget: float):
    status = "PASS" if ok and elapsed < budget else "FAIL"
    print(f"[criterion {num:2d}] {status} {name}: {detail} ({elapsed:.2f}s / budget {budget:g}s)")
    assert ok, f"criterion {num} failed: {detail}"
    assert elapsed < budget, f"criterion {num} exceeded runtime budget: {elapsed:.2f}s"


def test_criterion_1_quadratic_exactness():
    started = time.perf_counter()
    rng = make_rng(100)
    p = d = 10
    A = symmetrize(rng.standard_normal((p, p)))
    B = rng.standard_normal((d, p))
    oracle = BilevelOracle(
        dim_x=d, dim_y=p,
        f=lambda x, y: 0.0,
        g=lambda x, y: float(0.5 * y @ (A @ y) + x @ (B @ y)),
        grad_f_x=lambda x, y: np.zeros(d),
        grad_f_y=lambda x, y: np.zeros(p),
        grad_g_x=lambda x, y: B @ y,
        grad_g_y=lambda x, y: A @ y + B.T @ x,
    )
    x, y, v = rng.standard_normal(d), rng.standard_normal(p), rng.standard_normal(p)
    worst = 0.0
    for step in (1e-3, 1e-5):
        cfg = FdConfig(step)
        hv = fd_hvp(oracle, x, y, v, cfg)
        jv = fd_jvp(oracle, x, y, v, cfg)
        worst = max(
            worst,
            float(np.linalg.norm(hv - A @ v) / np.linalg.norm(A @ v)),
            float(np.linalg.norm(jv - B @ v) / np.linalg.norm(B @ v)),
        )
    _report(1, "quadratic exactness", worst <= 1e-8,
            f"worst relative error {worst:.3e} <= 1e-8",
            time.perf_counter() - started, 1.0)


def test_criterion_2_estimator_order():
    started = time.perf_counter()
    oracle = toy_problem().oracle()
    rng = make_rng(101)
    worst_ratio = np.inf
    for _ in range(20):
        x = np.array([rng.uniform(1.0, 2.0)])
        y = np.array([rng.uniform(0.2, 0.6)])
        v = np.array([rng.uniform(0.5, 1.5)])
        truth = oracle.hess_g_yy(x, y) @ v
        errs = [
            float(abs(fd_hvp(oracle, x, y, v, FdConfig(s)) - truth)[0])
            for s in (1e-3, 5e-4, 2.5e-4)
        ]
        worst_ratio = min(worst_ratio, errs[0] / errs[1], errs[1] / errs[2])
    _report(2, "estimator order", worst_ratio >= 1.8,
            f"worst halving ratio {worst_ratio:.2f} >= 1.8",
            time.perf_counter() - started, 1.0)


def test_criterion_3_exact_hypergradient():
    started = time.perf_counter()
    prob = toy_problem()
    oracle = prob.oracle()
    c = prob.constants()
    worst = 0.0
    for x in np.linspace(1.0, 2.0, 50):
        xv = np.array([x])
        hg = exact_hypergrad(oracle, xv, oracle.y_star(xv), c.mu, c.l_g)
        worst = max(worst, float(abs(hg[0] - 2.0 * x)))
    _report(3, "exact hypergradient at the lower solution", worst <= 1e-8,
            f"max |error| {worst:.3e} <= 1e-8 on the 50-point grid",
            time.perf_counter() - started, 1.0)


def test_criterion_4_gap_bound_inequality():
    started = time.perf_counter()
    prob = toy_problem()
    oracle = prob.oracle()
    c = prob.constants()
    rng = make_rng(102)
    worst = -np.inf
    for _ in range(100):
        x = np.array([rng.uniform(1.0, 2.0)])
        y = np.array([rng.uniform(-3.0, 3.0)])
        lhs, rhs = hypergrad_gap_bound(oracle, x, y, c)
        worst = max(worst, lhs - rhs * (1 + 1e-9))
    _report(4, "hypergradient gap bound", worst <= 0.0,
            f"max lhs - rhs*(1+1e-9) = {worst:.3e} <= 0 over 100 points",
            time.perf_counter() - started, 1.0)


def test_criterion_5_toy_solve():
    started = time.perf_counter()
    prob = toy_problem()
    hp = prob.default_hyperparams(iters=2000)  # base rates 0.01, fd step 1e-5
    x0, y0, v0 = prob.default_init()
    res = run(prob.oracle(), hp, prob.regularizer(), x0, y0, v0)
    x_err = float(abs(res.x_final[0] - 1.0))
    y_err = float(abs(res.y_final[0]))
    _report(5, "end-to-end toy solve", x_err <= 1e-3 and y_err <= 1e-3,
            f"|x_T - 1| = {x_err:.2e}, |y_T| = {y_err:.2e} (tol 1e-3)",
            time.perf_counter() - started, 1.0)


def test_criterion_6_rate_ratio():
    started = time.perf_counter()
    sums = {500: [], 1000: [], 2000: []}
    for seed in range(3):
        prob = gen_plgame(d=20, seed=seed)
        hp = prob.default_hyperparams(iters=2000, seed=seed)
        x0, y0, v0 = prob.default_init()
        res = run(prob.oracle(), hp, prob.regularizer(), x0, y0, v0)
        gm = np.array([row.grad_map_norm_sq for row in res.rows])
        for horizon in sums:
            sums[horizon].append(gm[:horizon].mean())
    s = {h: float(np.mean(v)) for h, v in sums.items()}
    r1, r2 = s[1000] / s[500], s[2000] / s[1000]
    ok = 0.35 <= r1 <= 0.75 and 0.35 <= r2 <= 0.75
    _report(6, "sublinear rate ratio", ok,
            f"S(1000)/S(500) = {r1:.3f}, S(2000)/S(1000) = {r2:.3f} in [0.35, 0.75]",
            time.perf_counter() - started, 30.0)


def test_criterion_7_potential_descent():
    started = time.perf_counter()
    prob = toy_problem()
    c = prob.constants()
    lam = lambda_bound(l_g=c.l_g, l_breve_sq=c.l_breve_sq)
    tau = tau_bound(l_g=c.l_g)
    gamma = step_size_bounds(c, lam, tau)
    hp = prob.default_hyperparams(iters=1000)
    hp.lr_y, hp.lr_x, hp.lr_v = lam, gamma, tau
    hp.fd_step = 1e-6
    x0, y0, v0 = prob.default_init()
    res = run(prob.oracle(), hp, prob.regularizer(), x0, y0, v0,
              options=TraceOptions(lyapunov=True))
    vals = np.array([row.lyapunov for row in res.rows])
    worst = float(np.max(np.diff(vals)))
    _report(7, "potential descent", worst <= 1e-6,
            f"max per-step increase {worst:.3e} <= 1e-6 over 1000 iterations",
            time.perf_counter() - started, 5.0)


def test_criterion_8_gradient_budget():
    started = time.perf_counter()
    prob = toy_problem()
    hp = prob.default_hyperparams(iters=123)
    x0, y0, v0 = prob.default_init()
    res = run(prob.oracle(), hp, prob.regularizer(), x0, y0, v0)
    per_iter_ok = all(row.gradient_calls == 7 * i for i, row in enumerate(res.rows, 1))
    ok = res.gradient_calls == 7 * 123 and per_iter_ok
    _report(8, "gradient budget", ok,
            f"{res.gradient_calls} calls over {hp.iters} iterations (7 per step)",
            time.perf_counter() - started, 5.0)


def test_criterion_9_matrix_sensing_progress():
    started = time.perf_counter()
    prob = gen_matsense(d=20, r=3, n=600, seed=0)
    hp = prob.default_hyperparams(iters=5000, seed=0)  # base rates 0.01
    x0, y0, v0 = prob.default_init()
    _, dist0 = sensing_metrics(prob, prob.U0)
    res = run(prob.oracle(), hp, prob.regularizer(), x0, y0, v0)
    U_final = prob.unflatten(res.final_state.x, res.final_state.y)
    _, dist_final = sensing_metrics(prob, U_final)
    ok = dist0 >= 0.5 and dist_final <= 1e-2
    _report(9, "matrix sensing progress", ok,
            f"distance {dist0:.3f} -> {dist_final:.3e} (target < 1e-2 within 5000 iters)",
            time.perf_counter() - started, 60.0)


def test_criterion_10_determinism(tmp_path):
    started = time.perf_counter()
    out1, out2 = tmp_path / "a", tmp_path / "b"
    for out in (out1, out2):
        rc = main(["run", "--problem", "plgame", "--d", "10", "--T", "100",
                   "--seed", "7", "--out", str(out), "--no-figures"])
        assert rc == 0
    same = (out1 / "trace.csv").read_bytes() == (out2 / "trace.csv").read_bytes()
    _report(10, "determinism", same,
            "repeated runs produce byte-identical trace CSVs",
            time.perf_counter() - started, 30.0)
