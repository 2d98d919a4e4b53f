"""Deterministic benchmark-family generators and reference solutions.

Six families, all emitted in the one problem form (P, q, A, l, u):

  random_qp  sparse-Gram cost, dense constraints, symmetric unit-scale boxes
  portfolio  factor-model risk with budget equality and long-only bounds
  lasso      least-squares + l1 via the epigraph reformulation
  svm        hinge-loss classifier on two Gaussian clouds
  control    condensed finite-horizon regulator (decision = input sequence)
  mpc        sparse-form regulator with fixed plant data; only the initial
             state differs between instances

Instance randomness comes from a splittable stream keyed by
(family, size, seed, field-tag), so every field has its own substream and
adding fields never reshuffles existing ones.  The mpc family draws its
shared plant data from a fixed key independent of the instance seed.
"""

import hashlib
import json
import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .engine import SolverConfig, solve
from .errors import InputError, ReferenceFailureError
from .problem import QpProblem, load_problem, osqp_residuals, save_problem

FAMILIES = ("random_qp", "portfolio", "lasso", "svm", "control", "mpc")

# Training/validation sizes and test-size grids of the published protocol.
TRAIN_SIZES = {"random_qp": 250, "portfolio": 20, "lasso": 20, "svm": 20, "control": 100}
TEST_GRIDS = {
    "random_qp": (500, 501, 503, 507, 515, 531, 562, 625, 750, 999),
    "control": (200, 201, 203, 205, 210, 219, 235, 262, 311, 399),
    "portfolio": (50, 51, 52, 54, 58, 63, 72, 87, 110, 149),
    "lasso": (50, 51, 52, 54, 58, 63, 72, 87, 110, 149),
    "svm": (50, 51, 52, 54, 58, 63, 72, 87, 110, 149),
}

# Small sizes for this package's own test and verification harness.
DESK_SIZES = {
    "random_qp": (5, 8, 10, 15, 20, 30, 50),
    "portfolio": (10, 15, 20, 30, 50),
    "lasso": (10, 15, 20, 30, 50),
    "svm": (10, 15, 20, 30, 50),
    "control": (5, 10, 15, 20, 30, 50),
    "mpc": (100,),
}

MPC_HORIZON = 10
MPC_STATE_DIM = 100
MPC_INPUT_DIM = 50


def documented_grid(family: str) -> tuple:
    if family not in FAMILIES:
        raise InputError(f"unknown family {family!r} (choose from {FAMILIES})")
    sizes = set(DESK_SIZES[family])
    sizes.update(TEST_GRIDS.get(family, ()))
    if family in TRAIN_SIZES:
        sizes.add(TRAIN_SIZES[family])
    return tuple(sorted(sizes))


@dataclass(frozen=True)
class FamilySpec:
    family: str
    size: int
    seed: int
    split: str = "test"

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise InputError(f"unknown family {self.family!r}")
        if self.size not in documented_grid(self.family):
            raise InputError(
                f"size {self.size} not in the documented grid for {self.family!r}: "
                f"{documented_grid(self.family)}"
            )
        if self.split not in ("train", "val", "test"):
            raise InputError(f"unknown split {self.split!r}")

    @property
    def name(self) -> str:
        return f"{self.family}_n{self.size}_s{self.seed}"


def _rng(family: str, size: int, seed: int, tag: str) -> np.random.Generator:
    key = f"relaxqp|{family}|{size}|{seed}|{tag}".encode()
    digest = hashlib.sha256(key).digest()
    words = np.frombuffer(digest, dtype=np.uint32)
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(words.tolist())))


def _stable_matrix(rng: np.random.Generator, dim: int, radius: float = 0.98) -> np.ndarray:
    A = rng.uniform(-1.0, 1.0, size=(dim, dim))
    s = np.linalg.svd(A, compute_uv=False)
    return A * (radius / s[0])


def _gen_random_qp(size: int, seed: int) -> QpProblem:
    n = size
    m = math.ceil(n / 2)
    g = lambda tag: _rng("random_qp", size, seed, tag)
    M = g("P").standard_normal((n, n))
    M *= g("Pmask").uniform(size=(n, n)) < 0.15
    P = M.T @ M + 1e-2 * np.eye(n)
    q = g("q").standard_normal(n)
    A = g("A").standard_normal((m, n))
    l = -g("l").uniform(size=m)
    u = g("u").uniform(size=m)
    return QpProblem(P, q, A, l, u, name=f"random_qp_n{size}_s{seed}", seed=seed)


def _gen_portfolio(size: int, seed: int) -> QpProblem:
    n = size
    k = math.ceil(size / 10)
    g = lambda tag: _rng("portfolio", size, seed, tag)
    d_diag = g("D").uniform(0.0, 1.0, size=n) * np.sqrt(k)
    F = g("F").standard_normal((n, k))
    F *= g("Fmask").uniform(size=(n, k)) < 0.5
    mu = g("mu").standard_normal(n)

    dim = n + k
    P = np.zeros((dim, dim))
    P[:n, :n] = 2.0 * np.diag(d_diag)
    P[n:, n:] = 2.0 * np.eye(k)
    q = np.concatenate((-mu, np.zeros(k)))

    m = k + 1 + n
    A = np.zeros((m, dim))
    A[:k, :n] = F.T
    A[:k, n:] = -np.eye(k)
    A[k, :n] = 1.0
    A[k + 1 :, :n] = np.eye(n)
    l = np.concatenate((np.zeros(k), [1.0], np.zeros(n)))
    u = np.concatenate((np.zeros(k), [1.0], np.ones(n)))
    return QpProblem(P, q, A, l, u, name=f"portfolio_n{size}_s{seed}", seed=seed)


def _gen_lasso(size: int, seed: int) -> QpProblem:
    n = size
    md = 10 * n
    g = lambda tag: _rng("lasso", size, seed, tag)
    Ad = g("design").standard_normal((md, n))
    x_true = g("truth").standard_normal(n)
    x_true *= g("support").uniform(size=n) < 0.1
    b = Ad @ x_true + 0.01 * g("noise").standard_normal(md)
    lam = 0.2 * np.max(np.abs(Ad.T @ b))

    dim = n + md + n  # (x, residual, epigraph bound)
    P = np.zeros((dim, dim))
    P[n : n + md, n : n + md] = np.eye(md)
    q = np.concatenate((np.zeros(n + md), lam * np.ones(n)))

    m = md + 2 * n
    A = np.zeros((m, dim))
    A[:md, :n] = Ad
    A[:md, n : n + md] = -np.eye(md)
    A[md : md + n, :n] = np.eye(n)
    A[md : md + n, n + md :] = -np.eye(n)
    A[md + n :, :n] = np.eye(n)
    A[md + n :, n + md :] = np.eye(n)
    l = np.concatenate((b, np.full(n, -np.inf), np.zeros(n)))
    u = np.concatenate((b, np.zeros(n), np.full(n, np.inf)))
    return QpProblem(P, q, A, l, u, name=f"lasso_n{size}_s{seed}", seed=seed)


def _gen_svm(size: int, seed: int) -> QpProblem:
    n = size
    md = 3 * n
    g = lambda tag: _rng("svm", size, seed, tag)
    center = g("center").standard_normal(n)
    center /= np.linalg.norm(center)
    labels = np.where(np.arange(md) < md // 2, 1.0, -1.0)
    X = labels[:, None] * center + g("X").standard_normal((md, n))
    c_hinge = 1.0 / md

    dim = n + md
    P = np.zeros((dim, dim))
    P[:n, :n] = np.eye(n)
    q = np.concatenate((np.zeros(n), c_hinge * np.ones(md)))

    m = 2 * md
    A = np.zeros((m, dim))
    A[:md, :n] = labels[:, None] * X
    A[:md, n:] = np.eye(md)
    A[md:, n:] = np.eye(md)
    l = np.concatenate((np.ones(md), np.zeros(md)))
    u = np.full(m, np.inf)
    return QpProblem(P, q, A, l, u, name=f"svm_n{size}_s{seed}", seed=seed)


def _gen_control(size: int, seed: int) -> QpProblem:
    nx = size
    nu = math.ceil(size / 2)
    T = 10
    g = lambda tag: _rng("control", size, seed, tag)
    Ad = _stable_matrix(g("A"), nx)
    Bd = g("B").uniform(-1.0, 1.0, size=(nx, nu))
    Q = np.eye(nx)
    Rcost = 0.1 * np.eye(nu)
    x0 = g("x0").uniform(-0.5, 0.5, size=nx)
    u_lim = 0.8
    x_lim = 5.0

    # Prediction matrices: states x_1..x_T = Phi x0 + G U.
    n = T * nu
    Phi = np.zeros((T * nx, nx))
    G = np.zeros((T * nx, n))
    Ak = np.eye(nx)
    for t in range(T):
        Ak = Ad @ Ak
        Phi[t * nx : (t + 1) * nx] = Ak
    for t in range(T):
        block = Bd
        for s in range(t, T):
            G[s * nx : (s + 1) * nx, t * nu : (t + 1) * nu] = block
            block = Ad @ block
    Qbar = np.kron(np.eye(T), Q)
    Rbar = np.kron(np.eye(T), Rcost)

    P = G.T @ Qbar @ G + Rbar
    P = 0.5 * (P + P.T)
    q = G.T @ (Qbar @ (Phi @ x0))

    m = n + T * nx
    A = np.zeros((m, n))
    A[:n] = np.eye(n)
    A[n:] = G
    l = np.concatenate((-u_lim * np.ones(n), -x_lim * np.ones(T * nx) - Phi @ x0))
    u = np.concatenate((u_lim * np.ones(n), x_lim * np.ones(T * nx) - Phi @ x0))
    return QpProblem(P, q, A, l, u, name=f"control_n{size}_s{seed}", seed=seed)


def _mpc_shared_data():
    nx, nu = MPC_STATE_DIM, MPC_INPUT_DIM
    g = lambda tag: _rng("mpc", nx, 0, "shared-" + tag)
    Ad = _stable_matrix(g("A"), nx)
    Bd = g("B").uniform(-1.0, 1.0, size=(nx, nu))
    q_diag = g("Q").uniform(0.5, 1.5, size=nx)
    r_diag = g("R").uniform(0.05, 0.15, size=nu)
    qt_diag = q_diag.copy()
    # u = 0 keeps the contracting state inside the (loose) state box from any
    # admissible x0, so the input box can be tight enough to be active at the
    # optimum without risking infeasibility.
    x_lim = 5.0
    u_lim = 0.02
    return Ad, Bd, q_diag, r_diag, qt_diag, x_lim, u_lim


def _gen_mpc(size: int, seed: int) -> QpProblem:
    nx, nu, T = MPC_STATE_DIM, MPC_INPUT_DIM, MPC_HORIZON
    Ad, Bd, q_diag, r_diag, qt_diag, x_lim, u_lim = _mpc_shared_data()
    x0 = _rng("mpc", size, seed, "x0").uniform(-0.5, 0.5, size=nx)

    # Decision: (x_0 .. x_T, u_0 .. u_{T-1}).
    n = (T + 1) * nx + T * nu
    off_u = (T + 1) * nx
    p_diag = np.concatenate((np.tile(q_diag, T), qt_diag, np.tile(r_diag, T)))
    P = np.diag(p_diag)
    q = np.zeros(n)

    m = nx + T * nx + T * nx + T * nu
    A = np.zeros((m, n))
    l = np.empty(m)
    u = np.empty(m)
    A[:nx, :nx] = np.eye(nx)
    l[:nx] = u[:nx] = x0
    row = nx
    for t in range(T):
        A[row : row + nx, (t + 1) * nx : (t + 2) * nx] = np.eye(nx)
        A[row : row + nx, t * nx : (t + 1) * nx] = -Ad
        A[row : row + nx, off_u + t * nu : off_u + (t + 1) * nu] = -Bd
        l[row : row + nx] = u[row : row + nx] = 0.0
        row += nx
    for t in range(T):
        A[row : row + nx, (t + 1) * nx : (t + 2) * nx] = np.eye(nx)
        l[row : row + nx] = -x_lim
        u[row : row + nx] = x_lim
        row += nx
    A[row:, off_u:] = np.eye(T * nu)
    l[row:] = -u_lim
    u[row:] = u_lim
    return QpProblem(P, q, A, l, u, name=f"mpc_n{size}_s{seed}", seed=seed)


_GENERATORS = {
    "random_qp": _gen_random_qp,
    "portfolio": _gen_portfolio,
    "lasso": _gen_lasso,
    "svm": _gen_svm,
    "control": _gen_control,
    "mpc": _gen_mpc,
}


def generate(spec: FamilySpec) -> QpProblem:
    """Deterministic instance for (family, size, seed)."""
    return _GENERATORS[spec.family](spec.size, spec.seed)


@dataclass(frozen=True)
class ReferenceSolution:
    x_star: np.ndarray
    lambda_star: np.ndarray
    objective: float
    kkt_error: float


REFERENCE_KKT_TOL = 1e-8


def complementarity_inf(prob: QpProblem, z: np.ndarray, y: np.ndarray) -> float:
    """max_i min(|y_i|, distance of z_i to its nearest finite bound)."""
    dist = np.full(prob.m, np.inf)
    fin_l = np.isfinite(prob.l)
    fin_u = np.isfinite(prob.u)
    dist[fin_l] = z[fin_l] - prob.l[fin_l]
    dist[fin_u] = np.minimum(dist[fin_u], prob.u[fin_u] - z[fin_u])
    comp = np.minimum(np.abs(y), dist)
    return float(np.max(comp, initial=0.0))


def reference_solution(prob: QpProblem, cfg: SolverConfig | None = None) -> ReferenceSolution:
    """Tight solve (eps = 1e-9, adaptive penalty, fixed relaxation 1.6)
    providing the primal-dual optimum used for training and verification."""
    if cfg is None:
        cfg = SolverConfig()
    cfg = replace(
        cfg, eps_abs=1e-9, eps_rel=1e-9, adaptive_rho=True, max_iter=200000, fault_hook=""
    )
    final_z = [None]

    def observer(state, res):
        final_z[0] = state.z

    report = solve(prob, cfg, policy=None, observer=observer)
    if report.status != "solved":
        raise ReferenceFailureError(
            f"reference solve hit max_iter={cfg.max_iter} on {prob.name!r}"
        )
    z = final_z[0]
    res = osqp_residuals(prob, report.x, z, report.y)
    kkt_error = max(res.r_prim_inf, res.r_dual_inf, complementarity_inf(prob, z, report.y))
    if kkt_error > REFERENCE_KKT_TOL:
        raise ReferenceFailureError(
            f"reference KKT error {kkt_error:.3e} above {REFERENCE_KKT_TOL} on {prob.name!r}"
        )
    return ReferenceSolution(
        x_star=report.x, lambda_star=report.y, objective=report.objective, kkt_error=kkt_error
    )


def reference_to_dict(ref: ReferenceSolution) -> dict:
    return {
        "x_star": ref.x_star.tolist(),
        "lambda_star": ref.lambda_star.tolist(),
        "objective": ref.objective,
        "kkt_error": ref.kkt_error,
    }


def reference_from_dict(doc: dict) -> ReferenceSolution:
    return ReferenceSolution(
        x_star=np.asarray(doc["x_star"], dtype=np.float64),
        lambda_star=np.asarray(doc["lambda_star"], dtype=np.float64),
        objective=float(doc["objective"]),
        kkt_error=float(doc["kkt_error"]),
    )


# ---------------------------------------------------------------------------
# Instance store and manifests


def spec_to_dict(spec: FamilySpec) -> dict:
    return {"family": spec.family, "size": spec.size, "seed": spec.seed, "split": spec.split}


def spec_from_dict(doc: dict) -> FamilySpec:
    try:
        return FamilySpec(
            family=doc["family"], size=int(doc["size"]), seed=int(doc["seed"]),
            split=doc.get("split", "test"),
        )
    except (KeyError, TypeError) as exc:
        raise InputError(f"malformed family spec: {exc}") from exc


def load_manifest(path) -> list:
    """Read a manifest file and enforce split seed disjointness per family."""
    with open(path) as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise InputError(f"invalid manifest {path}: {exc}") from exc
    specs = [spec_from_dict(d) for d in doc.get("specs", [])]
    seeds: dict = {}
    for s in specs:
        seeds.setdefault((s.family, s.split), set()).add(s.seed)
    for family in {s.family for s in specs}:
        splits = [seeds.get((family, sp), set()) for sp in ("train", "val", "test")]
        for i in range(3):
            for j in range(i + 1, 3):
                overlap = splits[i] & splits[j]
                if overlap:
                    raise InputError(
                        f"family {family!r}: splits share seeds {sorted(overlap)}"
                    )
    return specs


def save_manifest(specs: list, path) -> None:
    with open(path, "w") as fh:
        json.dump({"specs": [spec_to_dict(s) for s in specs]}, fh, indent=1)


def instance_dir(root, spec: FamilySpec) -> Path:
    return Path(root) / spec.family / f"size{spec.size}" / f"seed{spec.seed}"


def store_instance(root, spec: FamilySpec, prob: QpProblem, ref: ReferenceSolution | None) -> Path:
    d = instance_dir(root, spec)
    d.mkdir(parents=True, exist_ok=True)
    save_problem(prob, d / "problem.json")
    if ref is not None:
        with open(d / "reference.json", "w") as fh:
            json.dump(reference_to_dict(ref), fh)
    return d


def ensure_instance(root, spec: FamilySpec, with_reference: bool = False):
    """Load the stored instance, generating (and reference-solving) on demand."""
    d = instance_dir(root, spec)
    prob_path = d / "problem.json"
    ref_path = d / "reference.json"
    if prob_path.exists():
        prob = load_problem(prob_path)
    else:
        prob = generate(spec)
        store_instance(root, spec, prob, None)
    ref = None
    if with_reference:
        if ref_path.exists():
            with open(ref_path) as fh:
                ref = reference_from_dict(json.load(fh))
        else:
            ref = reference_solution(prob)
            with open(ref_path, "w") as fh:
                json.dump(reference_to_dict(ref), fh)
    return prob, ref


def default_desk_manifest() -> list:
    """The bundled desk-scale instance set covering all six families."""
    specs = []
    for family, picks in (
        ("random_qp", ((20, 1), (20, 2), (30, 3))),
        ("portfolio", ((10, 1), (10, 2), (20, 3))),
        ("lasso", ((10, 1), (10, 2), (20, 3))),
        ("svm", ((10, 1), (10, 2), (20, 3))),
        ("control", ((10, 1), (10, 2), (20, 3))),
        ("mpc", ((100, 1), (100, 2))),
    ):
        for size, seed in picks:
            specs.append(FamilySpec(family=family, size=size, seed=seed, split="test"))
    return specs
