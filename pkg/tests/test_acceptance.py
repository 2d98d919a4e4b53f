"""Acceptance suite: every release criterion at its stated tolerance.

Each test prints one PASS line when its criterion holds (run with -s to see
them); a failing criterion fails the test.  The random suites and the
trained checkpoint are module-scoped so the expensive work runs once.
"""

import numpy as np
import pytest

from relaxqp.bench import (
    FamilySpec,
    default_desk_manifest,
    generate,
    reference_solution,
)
from relaxqp.engine import FixedPolicy, SolverConfig, solve
from relaxqp.policy import (
    flatten_params,
    init_checkpoint,
    mlp_forward,
    policy_step_vector,
    with_params,
)
from relaxqp.policy import ScalarPolicy
from relaxqp.training import TrainConfig, collect_norm_stats, train
from relaxqp.verify import (
    DriftSchedule,
    check_descent,
    reconstruct_drs,
    record_trajectory,
    run_drift_experiment,
)

from oracles import random_box_qp, relaxed_admm_transcription


def report(criterion: int, text: str):
    print(f"ACCEPTANCE {criterion}: PASS - {text}")


class RandomGammaPolicy:
    """Per-stage random relaxation within the configured box (seeded)."""

    def __init__(self, lo, hi, seed):
        self.lo, self.hi = lo, hi
        self.rng = np.random.default_rng(seed)

    def propose(self, ctx):
        g = self.rng.uniform(self.lo, self.hi, size=ctx.prob.m)
        return g, float(self.rng.uniform(self.lo, self.hi))


@pytest.fixture(scope="module")
def identity_suite():
    """50 random instances (n <= 20, m <= 30) with tight references."""
    rng = np.random.default_rng(12345)
    suite = []
    for i in range(50):
        n = int(rng.integers(4, 21))
        m = int(rng.integers(2, 31))
        prob = random_box_qp(rng, n, m, name=f"suite_{i}")
        suite.append((prob, reference_solution(prob)))
    return suite


@pytest.fixture(scope="module")
def desk_reports():
    """Every bundled desk instance solved in both penalty modes."""
    out = []
    for spec in default_desk_manifest():
        prob = generate(spec)
        for adaptive in (False, True):
            cfg = SolverConfig(adaptive_rho=adaptive)
            out.append((spec, adaptive, solve(prob, cfg)))
    return out


@pytest.fixture(scope="module")
def trained_scalar():
    """Criterion-7 training run: scalar policy, 40 train / 20 held-out, n=50."""
    cfg = SolverConfig(adaptive_rho=False, rho0=0.1)
    train_set = []
    for s in range(1, 41):
        p = generate(FamilySpec("random_qp", 50, s, "train"))
        train_set.append((p, reference_solution(p)))
    heldout = []
    for s in range(100, 120):
        p = generate(FamilySpec("random_qp", 50, s, "val"))
        heldout.append((p, reference_solution(p)))

    norm_stats = collect_norm_stats([p for p, _ in train_set[:10]], "scalar", cfg)
    ckpt0 = init_checkpoint("scalar", seed=7, norm_stats=norm_stats,
                            metadata={"family": "random_qp"})
    tcfg = TrainConfig(epochs=120, batch_size=16, seed=5,
                       step_size=0.2, perturbation=0.05)
    result = train(train_set, [h for h in heldout], ckpt0, tcfg, cfg)

    baseline = np.mean(
        [solve(p, cfg, policy=FixedPolicy(1.6)).iterations for p, _ in heldout]
    )
    trained_mean = np.mean(
        [solve(p, cfg, policy=ScalarPolicy(result.ckpt_iter)).iterations for p, _ in heldout]
    )
    return result.ckpt_iter, float(baseline), float(trained_mean)


def test_criterion_1_theory_identities(identity_suite):
    """Eq. (9)/(10) reconstruction <= 1e-9 relative on 200 adaptive-penalty
    iterations of each of the 50 random instances."""
    cfg = SolverConfig(adaptive_rho=True)
    worst_trans = worst_pert = 0.0
    for prob, _ref in identity_suite:
        steps = record_trajectory(prob, cfg, 200)
        assert len(steps) == 200
        chk = reconstruct_drs(steps, prob)  # raises above 1e-9 relative
        worst_trans = max(worst_trans, chk.max_transition_violation)
        worst_pert = max(worst_pert, chk.max_perturbation_violation)
    assert worst_trans <= 1e-9
    assert worst_pert <= 1e-9
    report(1, f"identity violations transition={worst_trans:.2e} perturbation={worst_pert:.2e} over 50x200 steps")


def test_criterion_2_descent_inequality(identity_suite):
    """Per-step descent slack >= -1e-8 relative for alpha_max in
    {1.0, 1.6, 1.95} with per-stage random relaxation and adaptive penalty."""
    worst = np.inf
    for alpha_max in (1.0, 1.6, 1.95):
        kappa = 2.0 / alpha_max - 1.0
        assert kappa > 0
        cfg = SolverConfig(
            adaptive_rho=True,
            alpha0=alpha_max,
            alpha_min=0.6 * alpha_max,
            alpha_max=alpha_max,
        )
        for i, (prob, ref) in enumerate(identity_suite):
            policy = RandomGammaPolicy(cfg.alpha_min, cfg.alpha_max, seed=1000 + i)
            steps = record_trajectory(prob, cfg, 200, policy=policy)
            z_star = np.clip(prob.A @ ref.x_star, prob.l, prob.u)
            slacks = check_descent(
                steps, ref.x_star, z_star, ref.lambda_star, alpha_max
            )  # raises below the relative floor
            worst = min(worst, float(slacks.min()))
    assert worst >= -1e-8
    report(2, f"min descent slack {worst:.2e} across alpha_max in {{1.0, 1.6, 1.95}}")


def test_criterion_3_drift_convergence():
    """Summable drift 0.5/(k+1)^2 on both parameter vectors: theory residuals
    below 1e-6 and objective gap below 1e-5 within 10000 iterations on 20
    random instances (n <= 50)."""
    rng = np.random.default_rng(777)
    schedule = DriftSchedule.inverse_square(10000)
    for i in range(20):
        n = int(rng.integers(10, 51))
        m = max(2, n // 2)
        prob = random_box_qp(rng, n, m, name=f"drift_{i}")
        ref = reference_solution(prob)
        res = run_drift_experiment(
            prob, schedule, 10000, SolverConfig(), ref.objective, seed=i,
            r_tol=1e-6, s_tol=1e-6, gap_tol=1e-5,
        )
        assert res.converged, f"instance {i} did not converge under summable drift"
        assert res.r_inf[-1] <= 1e-6
        assert res.s_inf[-1] <= 1e-6
        assert res.objective_gap[-1] <= 1e-5
    report(3, "20/20 summable-drift runs reached r,s <= 1e-6 and gap <= 1e-5")


def test_criterion_4_baseline_solvability(desk_reports):
    """All bundled desk instances of the six families solve to 1e-3 with the
    default relaxation in both fixed and adaptive penalty modes."""
    assert len(desk_reports) == 2 * len(default_desk_manifest())
    families = set()
    for spec, adaptive, rep in desk_reports:
        assert rep.status == "solved", f"{spec.name} ({'adaptive' if adaptive else 'fixed'})"
        families.add(spec.family)
    assert families == {"random_qp", "portfolio", "lasso", "svm", "control", "mpc"}
    report(4, f"{len(desk_reports)} solves across 6 families all reached 1e-3")


def test_criterion_5_reduction_equivalence():
    """Uniform relaxation trajectories match the straight-line transcription
    oracle to 1e-12 over 100 iterations on 10 instances."""
    rng = np.random.default_rng(2024)
    alphas = [1.0, 1.3, 1.6, 1.9, 1.95, 1.0, 1.3, 1.6, 1.9, 1.95]
    worst = 0.0
    for i, alpha in enumerate(alphas):
        n = int(rng.integers(5, 16))
        m = int(rng.integers(3, 12))
        prob = random_box_qp(rng, n, m, name=f"reduction_{i}")
        cfg = SolverConfig(
            adaptive_rho=False, alpha0=alpha, alpha_min=alpha, alpha_max=alpha,
        )
        steps = record_trajectory(prob, cfg, 100)
        r_vals = steps[0].r_values
        oracle = relaxed_admm_transcription(prob, r_vals, alpha, cfg.sigma, 100)
        for st, (x_ref, z_ref, y_ref) in zip(steps, oracle):
            for got, ref in ((st.x_next, x_ref), (st.z_next, z_ref), (st.y_next, y_ref)):
                d = np.max(np.abs(got - ref)) / (1.0 + np.max(np.abs(ref)))
                worst = max(worst, d)
                assert d <= 1e-12
    report(5, f"10 instances x 100 iterations, worst trajectory gap {worst:.2e}")


def test_criterion_6_policy_contract(trained_scalar):
    """Untrained checkpoints predict exactly 1.6; outputs stay inside
    [1.25, 1.95]; the vector policy is row-equivariant; a checkpoint trained
    at n=50 evaluates unchanged at n=500."""
    # exact midpoint at zero initialization, both variants
    ck_s = init_checkpoint("scalar", seed=0)
    assert float(mlp_forward(ck_s, np.random.default_rng(0).normal(size=6))) == 1.6
    ck_v = init_checkpoint("vector", seed=0)
    rows = np.random.default_rng(1).normal(size=(4, 8))
    g, ax = policy_step_vector(ck_v, np.zeros(5), rows)
    assert np.all(g == 1.6) and ax == 1.6

    # saturation bounds
    rng = np.random.default_rng(9)
    theta = flatten_params(ck_v)
    ck_wild = with_params(ck_v, theta + 3.0 * rng.standard_normal(theta.size))
    outs = mlp_forward(ck_wild, rng.normal(size=(256, 13)))
    assert np.all(outs >= 1.25) and np.all(outs <= 1.95)

    # row equivariance
    phi = rng.normal(size=5)
    rows = rng.normal(size=(9, 8))
    perm = rng.permutation(9)
    g1, _ = policy_step_vector(ck_wild, phi, rows)
    g2, _ = policy_step_vector(ck_wild, phi, rows[perm])
    np.testing.assert_allclose(g2, g1[perm], rtol=1e-13)

    # size transfer: the checkpoint trained at n=50 drives an n=500 solve
    trained_ckpt, _, _ = trained_scalar
    big = generate(FamilySpec("random_qp", 500, 900))
    rep = solve(big, SolverConfig(adaptive_rho=True), policy=ScalarPolicy(trained_ckpt))
    assert rep.status == "solved"
    report(6, f"contract holds; n=50-trained checkpoint solved n=500 in {rep.iterations} iters")


def test_criterion_7_learning_improvement(trained_scalar):
    """Trained scalar policy (fixed penalty 0.1) beats the 1.6 baseline by at
    least 5% mean iterations on 20 held-out instances; fallback: never more
    than 1% worse, with the shortfall reported."""
    _, baseline, trained_mean = trained_scalar
    ratio = trained_mean / baseline
    if trained_mean <= 0.95 * baseline:
        report(
            7,
            f"trained {trained_mean:.2f} vs baseline {baseline:.2f} mean iterations "
            f"({100 * (1 - ratio):.1f}% reduction)",
        )
    else:
        # fallback property: never materially worse
        print(
            f"ACCEPTANCE 7: FALLBACK - 5% bar missed: trained {trained_mean:.2f} "
            f"vs baseline {baseline:.2f} (ratio {ratio:.4f})"
        )
        assert trained_mean <= 1.01 * baseline
    assert trained_mean <= 1.01 * baseline


def test_criterion_8_freeze_safeguard():
    """Past iteration 500 the relaxation vector is bitwise frozen, making the
    total relaxation drift finite by construction."""
    prob = generate(FamilySpec("lasso", 10, 1))  # slow enough to pass 500 iters
    cfg = SolverConfig(adaptive_rho=False, max_iter=700)

    class Wobble:
        def propose(self, ctx):
            a = 1.6 + 0.3 * np.sin(0.37 * ctx.iteration)
            return np.full(ctx.prob.m, a), a

    gammas = {}
    drift = []
    prev = [None]

    def observer(state, res):
        if prev[0] is not None:
            drift.append((state.iter, float(np.sum(np.abs(state.Gamma.values - prev[0])))))
        prev[0] = state.Gamma.values.copy()
        if state.iter >= 500:
            gammas[state.iter] = state.Gamma.values.copy()

    rep = solve(prob, cfg, policy=Wobble(), observer=observer)
    assert rep.iterations > 500, "instance must exceed the freeze point"
    frozen_at_500 = gammas[500]
    for it, g in gammas.items():
        assert np.array_equal(g, frozen_at_500), f"relaxation changed at iteration {it}"
    late_drift = sum(d for it, d in drift if it > 500)
    assert late_drift == 0.0
    total_drift = sum(d for _, d in drift)
    assert np.isfinite(total_drift)
    report(8, f"relaxation bitwise constant beyond iter 500; total drift {total_drift:.3f}")


def test_criterion_9_refactorization_accounting(desk_reports):
    """Factorization count is 1 + penalty-update count in every report, and
    fixed-penalty runs factor exactly once."""
    for spec, adaptive, rep in desk_reports:
        assert rep.factorizations == 1 + rep.rho_updates, spec.name
        if not adaptive:
            assert rep.factorizations == 1, spec.name
            assert rep.rho_updates == 0, spec.name
    report(9, f"accounting exact on {len(desk_reports)} reports")
