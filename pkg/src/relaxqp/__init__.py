"""relaxqp: dense OSQP-form ADMM solver with adaptive per-constraint relaxation."""

from .bench import FamilySpec, ReferenceSolution, generate, reference_solution
from .engine import (
    DiagParams,
    FixedPolicy,
    SolveReport,
    SolverConfig,
    SolverState,
    init_state,
    iterate_once,
    solve,
    splitting_residuals,
)
from .errors import (
    DivergenceError,
    InfeasibleBoundsError,
    InputError,
    PolicyError,
    ReferenceFailureError,
    SingularKktError,
    SolverError,
    TheoryViolationError,
)
from .linalg import LdltFactor, assemble_kkt, ldlt_factor, ldlt_solve
from .policy import (
    NormStats,
    PolicyCheckpoint,
    ScalarPolicy,
    VectorPolicy,
    init_checkpoint,
    load_checkpoint,
    mlp_forward,
    save_checkpoint,
)
from .problem import (
    ConstraintKind,
    QpProblem,
    Residuals,
    classify,
    load_problem,
    objective,
    osqp_residuals,
    save_problem,
    terminated,
)
from .training import RolloutRecord, TrainConfig, rollout, shaping, stage_loss, train
from .verify import DriftSchedule, check_descent, reconstruct_drs, run_drift_experiment

__version__ = "0.1.0"

__all__ = [
    "ConstraintKind",
    "DiagParams",
    "DivergenceError",
    "DriftSchedule",
    "FamilySpec",
    "FixedPolicy",
    "InfeasibleBoundsError",
    "InputError",
    "LdltFactor",
    "NormStats",
    "PolicyCheckpoint",
    "PolicyError",
    "QpProblem",
    "ReferenceFailureError",
    "ReferenceSolution",
    "Residuals",
    "RolloutRecord",
    "ScalarPolicy",
    "SingularKktError",
    "SolveReport",
    "SolverConfig",
    "SolverError",
    "SolverState",
    "TheoryViolationError",
    "TrainConfig",
    "VectorPolicy",
    "assemble_kkt",
    "check_descent",
    "classify",
    "generate",
    "init_checkpoint",
    "init_state",
    "iterate_once",
    "ldlt_factor",
    "ldlt_solve",
    "load_checkpoint",
    "load_problem",
    "mlp_forward",
    "objective",
    "osqp_residuals",
    "reconstruct_drs",
    "reference_solution",
    "rollout",
    "run_drift_experiment",
    "save_checkpoint",
    "save_problem",
    "shaping",
    "solve",
    "splitting_residuals",
    "stage_loss",
    "terminated",
    "train",
]
