import math

import numpy as np
import pytest

from bilevelfd.benchmarks import gen_plgame, toy_problem
from bilevelfd.numerics import make_rng
from bilevelfd.problem import BilevelOracle, BoxIndicator, SmoothnessConstants, Zero
from bilevelfd.solver import (
    DivergenceError,
    HyperParams,
    SolverState,
    TraceOptions,
    gamma_bound,
    lambda_bound,
    run,
    step,
    step_size_bounds,
    tau_bound,
)


def scalar_reference_step(x, y, v, lam, gamma, tau, delta, r_v, r_h, lo, hi):
    """Independent scalar transcription of one iteration on the toy problem."""

    def grad_g_x(yy):
        return yy**2 + math.sin(yy) ** 2

    def grad_g_y(yy):
        return 2.0 * x * yy + x * math.sin(2.0 * yy)

    u = grad_g_y(y)
    j_est = (grad_g_x(y + delta * v) - grad_g_x(y - delta * v)) / (2.0 * delta)
    w = (2.0 * x + 3.0 * math.sin(y) ** 2) - j_est
    h_est = (grad_g_y(y + delta * v) - grad_g_y(y - delta * v)) / (2.0 * delta)
    if abs(h_est) > r_h:
        h_est = math.copysign(r_h, h_est)
    h = h_est - (2.0 * y + 3.0 * x * math.sin(2.0 * y))

    y2 = y - lam * u
    x2 = min(max(x - gamma * w, lo), hi)
    v2 = v - tau * h
    if abs(v2) > r_v:
        v2 = math.copysign(r_v, v2)
    return x2, y2, v2


class TestStep:
    def _toy_setup(self, **hp_kwargs):
        prob = toy_problem()
        hp = prob.default_hyperparams(iters=1)
        for key, value in hp_kwargs.items():
            setattr(hp, key, value)
        return prob.oracle(), hp, prob.regularizer()

    def test_one_step_matches_scalar_transcription(self):
        oracle, hp, reg = self._toy_setup()
        state = SolverState(1, np.array([1.5]), np.array([0.3]), np.array([0.0]))
        new_state, row = step(state, hp, oracle, reg)
        x2, y2, v2 = scalar_reference_step(
            1.5, 0.3, 0.0, hp.lr_y, hp.lr_x, hp.lr_v, hp.fd_step,
            hp.v_radius, hp.hvp_cap, 1.0, 2.0,
        )
        assert abs(new_state.x[0] - x2) <= 1e-12
        assert abs(new_state.y[0] - y2) <= 1e-12
        assert abs(new_state.v[0] - v2) <= 1e-12
        # frozen values from the scalar transcription
        assert new_state.x[0] == pytest.approx(1.4673800342236452, abs=1e-12)
        assert new_state.y[0] == pytest.approx(0.28253036289907446, abs=1e-12)
        assert new_state.v[0] == pytest.approx(0.031408911302776593, abs=1e-12)
        assert new_state.t == 2
        assert row.t == 1

    def test_stationary_point_unchanged(self):
        # x at the active box edge, y at the lower solution, v at its target
        oracle, hp, reg = self._toy_setup()
        state = SolverState(1, np.array([1.0]), np.array([0.0]), np.array([0.0]))
        new_state, _ = step(state, hp, oracle, reg)
        assert abs(new_state.x[0] - 1.0) <= 1e-10
        assert abs(new_state.y[0]) <= 1e-10
        assert abs(new_state.v[0]) <= 1e-10

    def test_zero_rates_identity(self):
        # degenerate rates are rejected by validate(); step() itself must act
        # as the identity when all three rates are zero
        oracle, hp, _ = self._toy_setup(lr_x=0.0, lr_y=0.0, lr_v=0.0)
        with pytest.raises(ValueError):
            hp.validate()
        state = SolverState(1, np.array([1.5]), np.array([0.3]), np.array([0.2]))
        new_state, _ = step(state, hp, oracle, Zero())
        assert new_state.x[0] == 1.5
        assert new_state.y[0] == 0.3
        assert new_state.v[0] == 0.2

    def test_directions_use_pre_step_state(self):
        # y update must not see the already-updated x (simultaneous update)
        calls = []

        def grad_g_y(x, y):
            calls.append(x.copy())
            return y.copy()

        oracle = BilevelOracle(
            dim_x=1, dim_y=1,
            f=lambda x, y: 0.0, g=lambda x, y: 0.0,
            grad_f_x=lambda x, y: x.copy(),
            grad_f_y=lambda x, y: np.zeros(1),
            grad_g_x=lambda x, y: np.zeros(1),
            grad_g_y=grad_g_y,
        )
        hp = HyperParams(iters=1)
        state = SolverState(1, np.array([2.0]), np.array([1.0]), np.array([0.5]))
        step(state, hp, oracle, Zero())
        assert all(c[0] == 2.0 for c in calls)

    def test_grad_map_equals_surrogate_for_zero_reg(self):
        oracle, hp, _ = self._toy_setup()
        state = SolverState(1, np.array([1.5]), np.array([0.3]), np.array([0.1]))
        _, row = step(state, hp, oracle, Zero())
        assert row.grad_map_norm_sq == pytest.approx(row.surrogate_norm**2, rel=1e-12)

    def test_divergence_names_quantity_and_iteration(self):
        oracle = BilevelOracle(
            dim_x=1, dim_y=1,
            f=lambda x, y: 0.0, g=lambda x, y: 0.0,
            grad_f_x=lambda x, y: np.array([np.nan]),
            grad_f_y=lambda x, y: np.zeros(1),
            grad_g_x=lambda x, y: np.zeros(1),
            grad_g_y=lambda x, y: np.zeros(1),
        )
        hp = HyperParams(iters=1)
        state = SolverState(3, np.zeros(1), np.zeros(1), np.zeros(1))
        with pytest.raises(DivergenceError, match="iteration 3") as exc:
            step(state, hp, oracle, Zero())
        assert "surrogate" in exc.value.quantity


class TestRun:
    def test_single_iteration_output_is_first_iterate(self):
        prob = toy_problem()
        hp = prob.default_hyperparams(iters=1)
        x0, y0, v0 = prob.default_init()
        res = run(prob.oracle(), hp, prob.regularizer(), x0, y0, v0)
        assert res.t_out == 1
        np.testing.assert_array_equal(res.x_out, x0)
        np.testing.assert_array_equal(res.x_final, x0)
        assert len(res.rows) == 1

    def test_deterministic_given_seed(self):
        prob = gen_plgame(d=6, seed=4)
        hp = prob.default_hyperparams(iters=40, seed=4)
        x0, y0, v0 = prob.default_init()
        res1 = run(prob.oracle(), hp, prob.regularizer(), x0, y0, v0)
        res2 = run(prob.oracle(), hp, prob.regularizer(), x0, y0, v0)
        assert res1.t_out == res2.t_out
        np.testing.assert_array_equal(res1.x_out, res2.x_out)
        for a, b in zip(res1.rows, res2.rows):
            assert a.grad_map_norm_sq == b.grad_map_norm_sq
            assert a.f_val == b.f_val

    def test_output_index_depends_on_seed_only(self):
        prob = gen_plgame(d=6, seed=0)
        x0, y0, v0 = prob.default_init()
        indices = set()
        for seed in range(6):
            hp = prob.default_hyperparams(iters=200, seed=seed)
            res = run(prob.oracle(), hp, prob.regularizer(), x0, y0, v0)
            assert 1 <= res.t_out <= 200
            indices.add(res.t_out)
        assert len(indices) > 1

    def test_toy_converges_to_analytic_optimum(self):
        prob = toy_problem()
        hp = prob.default_hyperparams(iters=2000)
        x0, y0, v0 = prob.default_init()
        res = run(prob.oracle(), hp, prob.regularizer(), x0, y0, v0)
        assert abs(res.x_final[0] - 1.0) <= 1e-3
        assert abs(res.y_final[0]) <= 1e-3

    def test_gradient_budget_is_seven_per_iteration(self):
        prob = toy_problem()
        hp = prob.default_hyperparams(iters=37)
        x0, y0, v0 = prob.default_init()
        res = run(prob.oracle(), hp, prob.regularizer(), x0, y0, v0)
        assert res.gradient_calls == 7 * 37
        for i, row in enumerate(res.rows, start=1):
            assert row.gradient_calls == 7 * i

    def test_auxiliary_stays_in_ball(self):
        prob = gen_plgame(d=8, seed=2)
        hp = prob.default_hyperparams(iters=100, seed=2)
        hp.v_radius = 0.05  # force the projection to bind
        hp.hvp_cap = 0.05 * prob.lip_lower()
        x0, y0, v0 = prob.default_init()
        res = run(prob.oracle(), hp, prob.regularizer(), x0, y0, v0)
        state = res.final_state
        assert np.linalg.norm(state.v) <= hp.v_radius + 1e-12

    def test_initial_v_projected(self):
        prob = toy_problem()
        hp = prob.default_hyperparams(iters=1)
        hp.v_radius = 1.0
        hp.hvp_cap = 1.0
        res = run(prob.oracle(), hp, prob.regularizer(),
                  np.array([1.5]), np.array([0.3]), np.array([50.0]))
        # the first row's directions were computed from the projected v
        assert res.rows[0].v_residual_norm < 60.0

    def test_divergence_keeps_partial_trace(self):
        exploding = BilevelOracle(
            dim_x=1, dim_y=1,
            f=lambda x, y: 0.0, g=lambda x, y: 0.0,
            grad_f_x=lambda x, y: np.zeros(1),
            grad_f_y=lambda x, y: np.zeros(1),
            grad_g_x=lambda x, y: np.zeros(1),
            grad_g_y=lambda x, y: -1e11 * (np.abs(y) + 1.0),
        )
        hp = HyperParams(iters=50, lr_y=1.0)
        with pytest.raises(DivergenceError) as exc:
            run(exploding, hp, Zero())
        assert 0 < len(exc.value.rows) < 50

    def test_validates_dimensions(self):
        prob = toy_problem()
        hp = prob.default_hyperparams(iters=1)
        with pytest.raises(ValueError, match="shapes"):
            run(prob.oracle(), hp, prob.regularizer(), np.zeros(2), np.zeros(1), np.zeros(1))

    def test_optional_columns_require_support(self):
        prob = gen_plgame(d=5, seed=0)  # no closed-form lower solution
        hp = prob.default_hyperparams(iters=2)
        with pytest.raises(Exception, match="closed-form"):
            run(prob.oracle(), hp, prob.regularizer(),
                options=TraceOptions(lyapunov=True))

    def test_lower_gap_column_empty_when_unavailable(self):
        prob = gen_plgame(d=5, seed=0)
        hp = prob.default_hyperparams(iters=3)
        x0, y0, v0 = prob.default_init()
        res = run(prob.oracle(), hp, prob.regularizer(), x0, y0, v0,
                  options=TraceOptions(lower_gap=True))
        assert all(row.lower_gap is None for row in res.rows)

    def test_lower_gap_column_present_when_projected(self):
        prob = gen_plgame(d=5, seed=0, project_coupling=True)
        hp = prob.default_hyperparams(iters=3)
        x0, y0, v0 = prob.default_init()
        res = run(prob.oracle(), hp, prob.regularizer(), x0, y0, v0,
                  options=TraceOptions(lower_gap=True))
        assert all(row.lower_gap is not None and row.lower_gap >= -1e-9 for row in res.rows)


class TestHyperParams:
    def test_positivity(self):
        hp = HyperParams(lr_x=-0.1)
        with pytest.raises(ValueError):
            hp.validate()

    def test_cap_relation_enforced_when_lipschitz_known(self):
        hp = HyperParams(v_radius=1.0, hvp_cap=20.0, mu=1.0, lip_g=10.0)
        with pytest.raises(ValueError, match="hvp_cap"):
            hp.validate()
        hp.hvp_cap = 10.0
        hp.validate()

    def test_clamp_order(self):
        hp = HyperParams(mu=2.0, lip_g=1.0)
        with pytest.raises(ValueError):
            hp.validate()


class TestStepSizeBounds:
    def test_all_ones_arithmetic(self):
        # every symbol set to 1, lam = tau = 1/6, r_v = 1:
        # min(1/2, 1/96, 1/16, 3/160, 1/180, 1/360) = 1/360
        got = gamma_bound(
            1.0 / 6.0, 1.0 / 6.0,
            l_F=1.0, l_G=1.0, l_g=1.0, mu=1.0, l_breve_sq=1.0,
            c_gxy=1.0, l_f=1.0, l_gxy=1.0, r_v=1.0,
        )
        assert got == pytest.approx(1.0 / 360.0, rel=1e-15)

    def test_mu_scaling_of_curvature_term(self):
        # doubling mu with everything else fixed doubles the mu/(16 L_g^2) term
        kwargs = dict(l_F=1e-6, l_G=1e-9, l_g=1.0, l_breve_sq=1e-6,
                      c_gxy=1.0, l_f=1.0, l_gxy=1.0, r_v=1.0)
        lam = tau = 1e12  # push every other term far above the curvature one
        base = gamma_bound(lam, tau, mu=1.0, **kwargs)
        doubled = gamma_bound(lam, tau, mu=2.0, **kwargs)
        assert base == pytest.approx(1.0 / 16.0)
        assert doubled == pytest.approx(2.0 / 16.0)

    def test_breve_recomputed_from_primitives(self):
        c = SmoothnessConstants(mu=1.0, l_f=1.0, l_g=1.0, c_fy=1.0, c_fx=1.0,
                                c_gxy=1.0, c_gy=1.0, l_gxy=1.0, l_gyy=1.0)
        assert c.l_breve_sq == 2.0

    def test_validates_lam_tau_preconditions(self):
        c = toy_problem().constants()
        lam_max = lambda_bound(l_g=c.l_g, l_breve_sq=c.l_breve_sq)
        tau_max = tau_bound(l_g=c.l_g)
        with pytest.raises(ValueError, match="lam"):
            step_size_bounds(c, lam_max * 2, tau_max)
        with pytest.raises(ValueError, match="tau"):
            step_size_bounds(c, lam_max, tau_max * 2)
        gamma = step_size_bounds(c, lam_max, tau_max)
        assert gamma > 0

    def test_compliant_gamma_below_individual_terms(self):
        c = toy_problem().constants()
        lam = lambda_bound(l_g=c.l_g, l_breve_sq=c.l_breve_sq)
        tau = tau_bound(l_g=c.l_g)
        gamma = step_size_bounds(c, lam, tau)
        assert gamma <= 1.0 / (2.0 * c.l_F)
        assert gamma <= lam * c.mu / (16.0 * c.l_G)


class TestToyPotentialDescent:
    def test_descent_with_compliant_steps(self):
        prob = toy_problem()
        c = prob.constants()
        lam = lambda_bound(l_g=c.l_g, l_breve_sq=c.l_breve_sq)
        tau = tau_bound(l_g=c.l_g)
        gamma = step_size_bounds(c, lam, tau)
        hp = prob.default_hyperparams(iters=300)
        hp.lr_y, hp.lr_x, hp.lr_v = lam, gamma, tau
        hp.fd_step = 1e-6
        x0, y0, v0 = prob.default_init()
        res = run(prob.oracle(), hp, prob.regularizer(), x0, y0, v0,
                  options=TraceOptions(lyapunov=True))
        vals = np.array([row.lyapunov for row in res.rows])
        assert np.all(np.diff(vals) <= 1e-6)


class TestRateRatio:
    def test_mean_square_mapping_halves_with_horizon(self):
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
        assert 0.35 <= s[1000] / s[500] <= 0.75
        assert 0.35 <= s[2000] / s[1000] <= 0.75
