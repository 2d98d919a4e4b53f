"""Learned relaxation policies: features, normalization, MLP, checkpoints.

Two policy variants share one MLP architecture (input -> 64 -> 64 -> 1 with
layer normalization and ELU after each hidden layer, sigmoid-scaled output
in [alpha_min, alpha_max]):

  * scalar: one forward pass on 6 solver-level features, broadcast to every
    constraint row;
  * vector: one forward pass per row on 5 solver-level features concatenated
    with 8 per-row features (13 inputs); weight sharing across rows makes the
    policy row-equivariant and size-transferable.

The solver-level feature with the penalty scalar is dropped in the vector
variant because the per-row features already carry the per-row penalty.
"""

import json
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from .engine import PolicyContext
from .errors import InputError, PolicyError
from .problem import QpProblem, Residuals

FEATURE_EPS = 1e-8
FEATURE_CLAMP = 6.0
LAYERNORM_EPS = 1e-5
HIDDEN_WIDTH = 64
SCALAR_INPUT_DIM = 6
VECTOR_INPUT_DIM = 13  # 5 solver-level + 8 per-row
STD_FLOOR = 1e-6


def _clamped_log(v):
    with np.errstate(divide="ignore"):
        return np.clip(np.log(v), -FEATURE_CLAMP, FEATURE_CLAMP)


def extract_global(res_now: Residuals, res_prev: Residuals, rho: float, variant: str) -> np.ndarray:
    """Solver-level feature vector (6 entries scalar, 5 vector)."""
    rn, sn = res_now.r_prim_inf, res_now.r_dual_inf
    rp, sp = res_prev.r_prim_inf, res_prev.r_dual_inf
    vals = [
        rn,
        sn,
        rn / (rp + FEATURE_EPS),
        sn / (sp + FEATURE_EPS),
        rn / (sn + FEATURE_EPS),
    ]
    if variant == "scalar":
        vals.append(rho)
    elif variant != "vector":
        raise InputError(f"unknown policy variant {variant!r}")
    return _clamped_log(np.asarray(vals, dtype=np.float64))


def row_inf_norms(A: np.ndarray) -> np.ndarray:
    return np.max(np.abs(A), axis=1) if A.size else np.zeros(A.shape[0])


def extract_rows(
    prob: QpProblem,
    z: np.ndarray,
    r_prim: np.ndarray,
    y: np.ndarray,
    r_prim_prev: np.ndarray,
    rho_values: np.ndarray,
    a_row_norms: np.ndarray | None = None,
) -> np.ndarray:
    """Per-constraint feature matrix of shape (m, 8).

    Slack features hit the +clamp on infinite bounds and the -clamp on active
    finite bounds; the row norm of the constraint matrix is the one entry
    that is not log-scaled.
    """
    if a_row_norms is None:
        a_row_norms = row_inf_norms(prob.A)
    feats = np.empty((prob.m, 8), dtype=np.float64)
    feats[:, 0] = _clamped_log(z - prob.l)
    feats[:, 1] = _clamped_log(prob.u - z)
    feats[:, 2] = _clamped_log(np.abs(r_prim))
    feats[:, 3] = np.sign(r_prim)
    feats[:, 4] = _clamped_log(np.abs(y))
    feats[:, 5] = _clamped_log(np.abs(r_prim) / (np.abs(r_prim_prev) + FEATURE_EPS))
    feats[:, 6] = _clamped_log(rho_values)
    feats[:, 7] = a_row_norms
    return feats


@dataclass(frozen=True)
class NormStats:
    """Frozen per-feature normalization statistics."""

    mean: np.ndarray
    std: np.ndarray
    source: str = ""

    def normalize(self, feats: np.ndarray) -> np.ndarray:
        return (feats - self.mean) / self.std

    @classmethod
    def identity(cls, dim: int) -> "NormStats":
        return cls(np.zeros(dim), np.ones(dim), source="identity")


def fit_norm_stats(batches: list, source: str = "baseline-rollout") -> NormStats:
    """Population mean/std over stacked feature batches, std floored at 1e-6."""
    if not batches:
        raise InputError("no rollout features to fit normalization statistics")
    stacked = np.vstack([np.atleast_2d(b) for b in batches])
    if stacked.shape[0] < 1:
        raise InputError("no rollout features to fit normalization statistics")
    mean = stacked.mean(axis=0)
    std = np.maximum(stacked.std(axis=0), STD_FLOOR)
    return NormStats(mean=mean, std=std, source=source)


@dataclass
class PolicyCheckpoint:
    """MLP weights plus everything needed to evaluate the policy."""

    variant: str
    W1: np.ndarray
    b1: np.ndarray
    ln1_gain: np.ndarray
    ln1_offset: np.ndarray
    W2: np.ndarray
    b2: np.ndarray
    ln2_gain: np.ndarray
    ln2_offset: np.ndarray
    w_out: np.ndarray
    b_out: float
    alpha_min: float
    alpha_max: float
    norm_stats: NormStats
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        d_in = SCALAR_INPUT_DIM if self.variant == "scalar" else VECTOR_INPUT_DIM
        if self.variant not in ("scalar", "vector"):
            raise InputError(f"unknown policy variant {self.variant!r}")
        if self.W1.shape != (HIDDEN_WIDTH, d_in) or self.W2.shape != (HIDDEN_WIDTH, HIDDEN_WIDTH):
            raise InputError("hidden layer shapes must be (64, d_in) and (64, 64)")
        if self.w_out.shape != (HIDDEN_WIDTH,):
            raise InputError("output layer must map 64 -> 1")
        mid = 0.5 * (self.alpha_min + self.alpha_max)
        if abs(mid - 1.6) > 1e-12:
            raise InputError(f"relaxation box must be centered at 1.6, got midpoint {mid}")
        if self.norm_stats.mean.shape != (d_in,):
            raise InputError("normalization statistics do not match the input dimension")

    @property
    def input_dim(self) -> int:
        return self.W1.shape[1]


def init_checkpoint(
    variant: str,
    seed: int = 0,
    alpha_min: float = 1.25,
    alpha_max: float = 1.95,
    norm_stats: NormStats | None = None,
    metadata: dict | None = None,
) -> PolicyCheckpoint:
    """Fresh checkpoint: fan-in-scaled uniform hidden weights, zero output
    layer, so the first prediction is exactly the box midpoint 1.6."""
    d_in = SCALAR_INPUT_DIM if variant == "scalar" else VECTOR_INPUT_DIM
    rng = np.random.default_rng(seed)
    s1 = 1.0 / np.sqrt(d_in)
    s2 = 1.0 / np.sqrt(HIDDEN_WIDTH)
    meta = {"init_seed": seed}
    if metadata:
        meta.update(metadata)
    return PolicyCheckpoint(
        variant=variant,
        W1=rng.uniform(-s1, s1, size=(HIDDEN_WIDTH, d_in)),
        b1=np.zeros(HIDDEN_WIDTH),
        ln1_gain=np.ones(HIDDEN_WIDTH),
        ln1_offset=np.zeros(HIDDEN_WIDTH),
        W2=rng.uniform(-s2, s2, size=(HIDDEN_WIDTH, HIDDEN_WIDTH)),
        b2=np.zeros(HIDDEN_WIDTH),
        ln2_gain=np.ones(HIDDEN_WIDTH),
        ln2_offset=np.zeros(HIDDEN_WIDTH),
        w_out=np.zeros(HIDDEN_WIDTH),
        b_out=0.0,
        alpha_min=alpha_min,
        alpha_max=alpha_max,
        norm_stats=norm_stats if norm_stats is not None else NormStats.identity(d_in),
        metadata=meta,
    )


def _layer(x, W, b, gain, offset):
    h = x @ W.T + b
    mu = h.mean(axis=-1, keepdims=True)
    var = h.var(axis=-1, keepdims=True)
    h = (h - mu) / np.sqrt(var + LAYERNORM_EPS) * gain + offset
    return np.where(h > 0, h, np.expm1(h))  # ELU


def mlp_forward(ckpt: PolicyCheckpoint, x: np.ndarray) -> np.ndarray:
    """Forward pass on normalized features; x is (d,) or (rows, d).

    Returns relaxation values in [alpha_min, alpha_max].
    """
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != ckpt.input_dim:
        raise InputError(f"input dim {x.shape[-1]} does not match variant {ckpt.variant!r}")
    h = _layer(x, ckpt.W1, ckpt.b1, ckpt.ln1_gain, ckpt.ln1_offset)
    h = _layer(h, ckpt.W2, ckpt.b2, ckpt.ln2_gain, ckpt.ln2_offset)
    pre = h @ ckpt.w_out + ckpt.b_out
    out = ckpt.alpha_min + (ckpt.alpha_max - ckpt.alpha_min) * expit(pre)
    if not np.all(np.isfinite(out)):
        raise PolicyError("relaxation policy produced non-finite output")
    return out


def policy_step_scalar(ckpt: PolicyCheckpoint, phi: np.ndarray, m: int):
    """One scalar prediction broadcast over all m constraint rows."""
    if ckpt.variant != "scalar":
        raise InputError("scalar step requires a scalar-variant checkpoint")
    alpha = float(mlp_forward(ckpt, ckpt.norm_stats.normalize(phi)))
    return np.full(m, alpha), alpha


def policy_step_vector(ckpt: PolicyCheckpoint, phi: np.ndarray, rows: np.ndarray):
    """Row-wise predictions; the decision-space relaxation is their mean."""
    if ckpt.variant != "vector":
        raise InputError("vector step requires a vector-variant checkpoint")
    rows = np.atleast_2d(rows)
    inputs = np.hstack((np.broadcast_to(phi, (rows.shape[0], phi.size)), rows))
    gamma = mlp_forward(ckpt, ckpt.norm_stats.normalize(inputs))
    return gamma, float(np.mean(gamma))


class ScalarPolicy:
    """Engine adapter for the scalar variant."""

    def __init__(self, ckpt: PolicyCheckpoint):
        if ckpt.variant != "scalar":
            raise InputError("ScalarPolicy needs a scalar-variant checkpoint")
        self.ckpt = ckpt

    def propose(self, ctx: PolicyContext):
        phi = extract_global(ctx.res, ctx.res_prev, ctx.rho_scalar, "scalar")
        return policy_step_scalar(self.ckpt, phi, ctx.prob.m)


class VectorPolicy:
    """Engine adapter for the vector variant; caches constraint row norms."""

    def __init__(self, ckpt: PolicyCheckpoint):
        if ckpt.variant != "vector":
            raise InputError("VectorPolicy needs a vector-variant checkpoint")
        self.ckpt = ckpt
        self._norms_for: int | None = None
        self._row_norms: np.ndarray | None = None

    def propose(self, ctx: PolicyContext):
        if self._norms_for != id(ctx.prob):
            self._row_norms = row_inf_norms(ctx.prob.A)
            self._norms_for = id(ctx.prob)
        phi = extract_global(ctx.res, ctx.res_prev, ctx.rho_scalar, "vector")
        rows = extract_rows(
            ctx.prob, ctx.z, ctx.res.r_prim, ctx.y, ctx.r_prim_prev, ctx.rho_values,
            self._row_norms,
        )
        return policy_step_vector(self.ckpt, phi, rows)


def policy_from_checkpoint(ckpt: PolicyCheckpoint):
    return ScalarPolicy(ckpt) if ckpt.variant == "scalar" else VectorPolicy(ckpt)


# Checkpoint parameters in a fixed flattening order, for gradient-free search.
_PARAM_FIELDS = ("W1", "b1", "ln1_gain", "ln1_offset", "W2", "b2", "ln2_gain", "ln2_offset",
                 "w_out")


def flatten_params(ckpt: PolicyCheckpoint) -> np.ndarray:
    parts = [np.asarray(getattr(ckpt, f)).ravel() for f in _PARAM_FIELDS]
    parts.append(np.array([ckpt.b_out]))
    return np.concatenate(parts)


def with_params(ckpt: PolicyCheckpoint, theta: np.ndarray) -> PolicyCheckpoint:
    """New checkpoint with the flattened parameter vector written back."""
    out = {}
    pos = 0
    for f in _PARAM_FIELDS:
        ref = np.asarray(getattr(ckpt, f))
        out[f] = theta[pos : pos + ref.size].reshape(ref.shape).copy()
        pos += ref.size
    b_out = float(theta[pos])
    pos += 1
    if pos != theta.size:
        raise InputError(f"parameter vector has {theta.size} entries, expected {pos}")
    return PolicyCheckpoint(
        variant=ckpt.variant,
        **out,
        b_out=b_out,
        alpha_min=ckpt.alpha_min,
        alpha_max=ckpt.alpha_max,
        norm_stats=ckpt.norm_stats,
        metadata=dict(ckpt.metadata),
    )


def checkpoint_to_dict(ckpt: PolicyCheckpoint) -> dict:
    return {
        "variant": ckpt.variant,
        "dims": [ckpt.input_dim, HIDDEN_WIDTH, HIDDEN_WIDTH, 1],
        "W1": ckpt.W1.ravel().tolist(),
        "b1": ckpt.b1.tolist(),
        "ln1_gain": ckpt.ln1_gain.tolist(),
        "ln1_offset": ckpt.ln1_offset.tolist(),
        "W2": ckpt.W2.ravel().tolist(),
        "b2": ckpt.b2.tolist(),
        "ln2_gain": ckpt.ln2_gain.tolist(),
        "ln2_offset": ckpt.ln2_offset.tolist(),
        "w_out": ckpt.w_out.tolist(),
        "b_out": ckpt.b_out,
        "alpha_min": ckpt.alpha_min,
        "alpha_max": ckpt.alpha_max,
        "norm_mean": ckpt.norm_stats.mean.tolist(),
        "norm_std": ckpt.norm_stats.std.tolist(),
        "norm_source": ckpt.norm_stats.source,
        "metadata": ckpt.metadata,
    }


def checkpoint_from_dict(doc: dict) -> PolicyCheckpoint:
    try:
        variant = doc["variant"]
        d_in = SCALAR_INPUT_DIM if variant == "scalar" else VECTOR_INPUT_DIM
        return PolicyCheckpoint(
            variant=variant,
            W1=np.asarray(doc["W1"], dtype=np.float64).reshape(HIDDEN_WIDTH, d_in),
            b1=np.asarray(doc["b1"], dtype=np.float64),
            ln1_gain=np.asarray(doc["ln1_gain"], dtype=np.float64),
            ln1_offset=np.asarray(doc["ln1_offset"], dtype=np.float64),
            W2=np.asarray(doc["W2"], dtype=np.float64).reshape(HIDDEN_WIDTH, HIDDEN_WIDTH),
            b2=np.asarray(doc["b2"], dtype=np.float64),
            ln2_gain=np.asarray(doc["ln2_gain"], dtype=np.float64),
            ln2_offset=np.asarray(doc["ln2_offset"], dtype=np.float64),
            w_out=np.asarray(doc["w_out"], dtype=np.float64),
            b_out=float(doc["b_out"]),
            alpha_min=float(doc["alpha_min"]),
            alpha_max=float(doc["alpha_max"]),
            norm_stats=NormStats(
                mean=np.asarray(doc["norm_mean"], dtype=np.float64),
                std=np.asarray(doc["norm_std"], dtype=np.float64),
                source=str(doc.get("norm_source", "")),
            ),
            metadata=dict(doc.get("metadata", {})),
        )
    except (KeyError, TypeError) as exc:
        raise InputError(f"malformed checkpoint document: {exc}") from exc


def save_checkpoint(ckpt: PolicyCheckpoint, path) -> None:
    with open(path, "w") as fh:
        json.dump(checkpoint_to_dict(ckpt), fh)


def load_checkpoint(path) -> PolicyCheckpoint:
    with open(path) as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise InputError(f"invalid checkpoint file {path}: {exc}") from exc
    return checkpoint_from_dict(doc)
