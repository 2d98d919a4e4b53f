import json

import numpy as np
import pytest
from numpy.testing import assert_allclose

from relaxqp.bench import FamilySpec, generate
from relaxqp.engine import (
    DiagParams,
    FixedPolicy,
    SolverConfig,
    apply_policy,
    config_from_dict,
    config_to_dict,
    init_state,
    iterate_once,
    maybe_update_rho,
    rho_pattern,
    solve,
    splitting_residuals,
)
from relaxqp.errors import DivergenceError, InputError, PolicyError
from relaxqp.problem import ConstraintKind, QpProblem, osqp_residuals

from oracles import random_box_qp, relaxed_admm_transcription

INF = np.inf


def one_dim_box():
    # min 0.5 x^2  s.t.  0 <= x <= 1
    return QpProblem(P=np.eye(1), q=np.zeros(1), A=np.eye(1),
                     l=np.zeros(1), u=np.ones(1), name="1d")


class TestDiagParams:
    def test_bounds_enforced(self):
        with pytest.raises(InputError):
            DiagParams(np.array([0.5]), lo=1.0, hi=2.0)
        with pytest.raises(InputError):
            DiagParams(np.array([1.0]), lo=-1.0, hi=2.0)

    def test_rho_pattern(self):
        kinds = np.array(
            [ConstraintKind.INEQUALITY, ConstraintKind.EQUALITY, ConstraintKind.LOOSE],
            dtype=np.int8,
        )
        assert_allclose(rho_pattern(kinds, 0.1), [0.1, 100.0, 0.1])


class TestInitState:
    def test_defaults(self):
        prob = one_dim_box()
        st = init_state(prob, SolverConfig())
        assert_allclose(st.Gamma.values, [1.6])
        assert_allclose(st.R.values, [0.1])
        assert st.alpha_x == 1.6
        assert st.n_factorizations == 1
        assert st.iter == 0
        assert not st.frozen

    def test_equality_row_weight(self):
        prob = QpProblem(P=np.eye(1), q=np.zeros(1),
                         A=np.array([[1.0], [1.0]]),
                         l=np.array([0.0, -1.0]), u=np.array([0.0, 1.0]))
        st = init_state(prob, SolverConfig(rho0=0.1))
        assert_allclose(st.R.values, [100.0, 0.1])

    def test_loose_row_uses_plain_rho(self):
        prob = QpProblem(P=np.eye(1), q=np.zeros(1), A=np.array([[1.0]]),
                         l=np.array([-INF]), u=np.array([INF]))
        st = init_state(prob, SolverConfig(rho0=0.1))
        assert_allclose(st.R.values, [0.1])


class TestIterateOnce:
    def test_fixed_point_at_origin(self):
        prob = one_dim_box()
        cfg = SolverConfig(adaptive_rho=False)
        st = init_state(prob, cfg)
        iterate_once(st, prob, cfg)
        res = osqp_residuals(prob, st.x, st.z, st.y)
        assert res.r_prim_inf <= 1e-12
        assert res.r_dual_inf <= 1e-12

    def test_projection_feasibility_every_iteration(self):
        prob = generate(FamilySpec("random_qp", 10, 4))
        cfg = SolverConfig(adaptive_rho=False, max_iter=50)
        st = init_state(prob, cfg)
        for _ in range(50):
            iterate_once(st, prob, cfg)
            assert np.all(st.z >= prob.l) and np.all(st.z <= prob.u)

    @pytest.mark.parametrize("seed", [0, 1])
    def test_matches_transcription_oracle_three_steps(self, seed):
        rng = np.random.default_rng(seed)
        prob = random_box_qp(rng, 8, 5, name="transcript")
        cfg = SolverConfig(adaptive_rho=False, rho0=0.1, alpha0=1.6)
        st = init_state(prob, cfg)
        traj = relaxed_admm_transcription(
            prob, st.R.values, alpha=1.6, sigma=cfg.sigma, n_iters=3
        )
        for x_ref, z_ref, y_ref in traj:
            iterate_once(st, prob, cfg)
            assert np.max(np.abs(st.x - x_ref)) <= 1e-12 * (1 + np.max(np.abs(x_ref)))
            assert np.max(np.abs(st.z - z_ref)) <= 1e-12 * (1 + np.max(np.abs(z_ref)))
            assert np.max(np.abs(st.y - y_ref)) <= 1e-12 * (1 + np.max(np.abs(y_ref)))

    def test_unrelaxed_reduction(self):
        # relaxation = 1 on all coordinates reproduces the unrelaxed iteration
        rng = np.random.default_rng(7)
        prob = random_box_qp(rng, 6, 4)
        cfg = SolverConfig(adaptive_rho=False, alpha0=1.0, alpha_min=1.0, alpha_max=1.0)
        st = init_state(prob, cfg)
        traj = relaxed_admm_transcription(
            prob, st.R.values, alpha=1.0, sigma=cfg.sigma, n_iters=20
        )
        for x_ref, z_ref, y_ref in traj:
            iterate_once(st, prob, cfg)
            scale = 1 + np.max(np.abs(x_ref))
            assert np.max(np.abs(st.x - x_ref)) <= 1e-12 * scale
            assert np.max(np.abs(st.z - z_ref)) <= 1e-12 * scale
            assert np.max(np.abs(st.y - y_ref)) <= 1e-12 * scale

    def test_divergence_detected(self):
        prob = one_dim_box()
        cfg = SolverConfig(adaptive_rho=False)
        st = init_state(prob, cfg)
        st.x = np.array([np.inf])
        with pytest.raises(DivergenceError) as exc:
            iterate_once(st, prob, cfg)
        assert exc.value.iteration == 1


class TestTheoremResiduals:
    def test_zero_change_gives_zero_dual_part(self):
        prob = one_dim_box()
        cfg = SolverConfig(adaptive_rho=False)
        st = init_state(prob, cfg)
        iterate_once(st, prob, cfg)
        r_vec, s_vec = splitting_residuals(st, cfg.sigma)
        # the 1-d instance is solved in one step from the origin: no movement
        assert np.max(np.abs(s_vec)) <= 1e-15
        assert np.max(np.abs(r_vec)) <= 1e-15

    def test_hand_computed_step(self):
        # min 0.5 x^2 s.t. 0.5 <= x <= 1, rho = 1, alpha = 1, sigma = 1e-6
        prob = QpProblem(P=np.eye(1), q=np.zeros(1), A=np.eye(1),
                         l=np.array([0.5]), u=np.array([1.0]))
        cfg = SolverConfig(adaptive_rho=False, rho0=1.0, alpha0=1.0,
                           alpha_min=1.0, alpha_max=1.0, sigma=1e-6)
        st = init_state(prob, cfg)
        iterate_once(st, prob, cfg)
        s = cfg.sigma
        # KKT: (1 + s) xt - nu = 0; xt - nu = 0  =>  xt = nu = 0
        # zt = 0; w = 0; z1 = clip(0, 0.5, 1) = 0.5; y1 = 1 * (0 - 0.5) = -0.5
        assert st.x[0] == pytest.approx(0.0, abs=1e-12)
        assert st.z[0] == pytest.approx(0.5)
        assert st.y[0] == pytest.approx(-0.5)
        r_vec, s_vec = splitting_residuals(st, s)
        # r = (xt - x1, zt - z1) = (0, -0.5); s = (-s*(x1-x0), -rho*(z1-z0))
        assert_allclose(r_vec, [0.0, -0.5], atol=1e-12)
        assert_allclose(s_vec, [0.0, -0.5], atol=1e-12)

    def test_small_at_convergence(self):
        prob = generate(FamilySpec("random_qp", 10, 6))
        cfg = SolverConfig(adaptive_rho=True, eps_abs=1e-9, eps_rel=1e-9)
        final = {}

        def observer(state, res):
            if state.iter > 0:
                final["state"] = state

        solve(prob, cfg, observer=observer)
        r_vec, s_vec = splitting_residuals(final["state"], cfg.sigma)
        assert np.max(np.abs(r_vec)) <= 1e-6
        assert np.max(np.abs(s_vec)) <= 1e-6

    @pytest.mark.parametrize("family,size", [("random_qp", 20), ("portfolio", 10),
                                             ("lasso", 10), ("svm", 10), ("control", 10)])
    @pytest.mark.parametrize("adaptive", [False, True])
    def test_bounded_by_stopping_tolerance_at_termination(self, family, size, adaptive):
        prob = generate(FamilySpec(family, size, 1))
        cfg = SolverConfig(adaptive_rho=adaptive)
        final = {}

        def observer(state, res):
            final["state"] = state

        rep = solve(prob, cfg, observer=observer)
        assert rep.status == "solved"
        st = final["state"]
        r_vec, s_vec = splitting_residuals(st, cfg.sigma)
        prim_scale = max(np.max(np.abs(prob.A @ st.x)), np.max(np.abs(st.z)))
        dual_scale = max(
            np.max(np.abs(prob.P @ st.x)), np.max(np.abs(prob.A.T @ st.y)),
            np.max(np.abs(prob.q)),
        )
        bound = 10.0 * (cfg.eps_abs + cfg.eps_rel * max(prim_scale, dual_scale))
        assert np.max(np.abs(r_vec)) <= bound
        assert np.max(np.abs(s_vec)) <= bound


class TestRhoUpdate:
    def _state_with_residuals(self, rp, rd):
        prob = generate(FamilySpec("random_qp", 8, 2))
        cfg = SolverConfig()
        st = init_state(prob, cfg)
        for _ in range(3):
            iterate_once(st, prob, cfg)
        res = osqp_residuals(prob, st.x, st.z, st.y)
        return prob, cfg, st, res

    def test_balanced_residuals_no_update(self):
        prob, cfg, st, res = self._state_with_residuals(1.0, 1.0)
        forced = type(res)(res.r_prim, res.r_dual, 1.0, 1.0)
        # equalize the scale-normalized residuals by construction: ratio sqrt(1) = 1
        prim_scale = max(np.max(np.abs(prob.A @ st.x)), np.max(np.abs(st.z)), 1e-10)
        dual_scale = max(
            np.max(np.abs(prob.P @ st.x)), np.max(np.abs(prob.A.T @ st.y)),
            np.max(np.abs(prob.q)), 1e-10,
        )
        forced = type(res)(res.r_prim, res.r_dual, prim_scale, dual_scale)
        _, refactored = maybe_update_rho(st, forced, prob, cfg)
        assert not refactored
        assert st.rho_updates == 0

    def test_hundredfold_imbalance_fires(self):
        prob, cfg, st, res = self._state_with_residuals(1.0, 1.0)
        prim_scale = max(np.max(np.abs(prob.A @ st.x)), np.max(np.abs(st.z)), 1e-10)
        dual_scale = max(
            np.max(np.abs(prob.P @ st.x)), np.max(np.abs(prob.A.T @ st.y)),
            np.max(np.abs(prob.q)), 1e-10,
        )
        rho_before = st.rho_scalar
        facts_before = st.n_factorizations
        forced = type(res)(res.r_prim, res.r_dual, 100.0 * prim_scale, dual_scale)
        _, refactored = maybe_update_rho(st, forced, prob, cfg)
        assert refactored
        assert st.rho_scalar == pytest.approx(10.0 * rho_before)
        assert st.rho_updates == 1
        assert st.n_factorizations == facts_before + 1

    def test_disabled_means_zero_updates(self):
        prob = generate(FamilySpec("random_qp", 10, 7))
        rep = solve(prob, SolverConfig(adaptive_rho=False))
        assert rep.rho_updates == 0
        assert rep.factorizations == 1


class TestApplyPolicy:
    def test_fixed_policy_forever(self):
        prob = generate(FamilySpec("random_qp", 8, 8))
        cfg = SolverConfig(adaptive_rho=False, max_iter=200, eps_abs=1e-300, eps_rel=1e-300)
        gammas = []

        def observer(state, res):
            gammas.append(state.Gamma.values.copy())

        solve(prob, cfg, policy=FixedPolicy(1.6), observer=observer)
        assert all(np.all(g == 1.6) for g in gammas)

    def test_freeze_after_limit(self):
        prob = generate(FamilySpec("random_qp", 8, 9))
        cfg = SolverConfig(adaptive_rho=False, max_iter=520, freeze_iter=500,
                           eps_abs=1e-300, eps_rel=1e-300)

        class Wobble:
            def propose(self, ctx):
                a = 1.5 + 0.1 * np.sin(ctx.iteration)
                return np.full(ctx.prob.m, a), a

        snap = {}

        def observer(state, res):
            if state.iter == 499:
                snap["at499"] = state.Gamma.values.copy()
            if state.iter >= 500:
                snap.setdefault("after", []).append(state.Gamma.values.copy())
            snap["frozen"] = state.frozen

        solve(prob, cfg, policy=Wobble(), observer=observer)
        for g in snap["after"]:
            assert np.array_equal(g, snap["at499"])
        assert snap["frozen"]

    def test_nonfinite_policy_raises_and_preserves_gamma(self):
        prob = generate(FamilySpec("random_qp", 8, 10))
        cfg = SolverConfig(adaptive_rho=False)
        st = init_state(prob, cfg)
        st.iter = 10
        before = st.Gamma.values.copy()

        class Bad:
            def propose(self, ctx):
                return np.full(prob.m, np.nan), np.nan

        with pytest.raises(PolicyError):
            apply_policy(st, Bad(), None, cfg)
        assert np.array_equal(st.Gamma.values, before)

    def test_policy_outputs_clamped(self):
        prob = generate(FamilySpec("random_qp", 8, 11))
        cfg = SolverConfig(adaptive_rho=False)
        st = init_state(prob, cfg)
        st.iter = 10

        class Wild:
            def propose(self, ctx):
                return np.full(prob.m, 5.0), 0.1

        apply_policy(st, Wild(), None, cfg)
        assert np.all(st.Gamma.values == cfg.alpha_max)
        assert st.alpha_x == cfg.alpha_min


class TestSolve:
    def test_trivial_solves(self):
        rep = solve(one_dim_box(), SolverConfig(adaptive_rho=False))
        assert rep.status == "solved"
        assert rep.iterations >= 1
        assert rep.objective == pytest.approx(0.0, abs=1e-12)

    def test_max_iter_status(self):
        prob = generate(FamilySpec("random_qp", 20, 12))
        rep = solve(prob, SolverConfig(max_iter=1))
        assert rep.status == "max_iter"
        assert rep.iterations == 1

    def test_residual_history_every_iteration(self):
        prob = generate(FamilySpec("random_qp", 10, 13))
        rep = solve(prob, SolverConfig(adaptive_rho=False))
        iters = [row[0] for row in rep.residual_history]
        assert iters == list(range(rep.iterations + 1))

    def test_gamma_bounds_always_respected(self):
        prob = generate(FamilySpec("random_qp", 10, 14))
        cfg = SolverConfig(max_iter=300, eps_abs=1e-300, eps_rel=1e-300)

        class Runaway:
            def propose(self, ctx):
                a = 1.6 + 10.0 * np.sin(3.0 * ctx.iteration)
                return np.full(ctx.prob.m, a), a

        seen = []

        def observer(state, res):
            seen.append(state.Gamma.values.copy())

        solve(prob, cfg, policy=Runaway(), observer=observer)
        allg = np.concatenate(seen)
        assert np.all(allg >= cfg.alpha_min) and np.all(allg <= cfg.alpha_max)

    def test_refactorization_accounting(self):
        prob = generate(FamilySpec("portfolio", 20, 3))
        rep = solve(prob, SolverConfig(adaptive_rho=True))
        assert rep.factorizations == 1 + rep.rho_updates

    def test_time_varying_gamma_with_summable_drift_solves(self):
        rng = np.random.default_rng(2)
        prob = random_box_qp(rng, 30, 18)
        cfg = SolverConfig(adaptive_rho=False, max_iter=10000)

        class SinDrift:
            # bounded per-step change 0.5/(k+1)^2 around a sinusoidal target
            def __init__(self):
                self.curr = 1.6

            def propose(self, ctx):
                k = ctx.iteration
                target = 1.6 + 0.3 * np.sin(0.1 * k)
                step = np.clip(target - self.curr, -0.5 / (k + 1) ** 2, 0.5 / (k + 1) ** 2)
                self.curr = float(np.clip(self.curr + step, 1.25, 1.95))
                return np.full(ctx.prob.m, self.curr), self.curr

        rep = solve(prob, cfg, policy=SinDrift())
        assert rep.status == "solved"


class TestConfigFile:
    def test_roundtrip(self):
        cfg = SolverConfig(rho0=0.2, adaptive_rho=False, max_iter=77)
        again = config_from_dict(json.loads(json.dumps(config_to_dict(cfg))))
        assert again == cfg

    def test_unknown_field_rejected(self):
        with pytest.raises(InputError):
            config_from_dict({"rho_zero": 1.0})

    def test_validation(self):
        with pytest.raises(InputError):
            SolverConfig(max_iter=0)
        with pytest.raises(InputError):
            SolverConfig(alpha_min=0.5, alpha_max=2.5)
