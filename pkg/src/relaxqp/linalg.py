"""Dense symmetric quasi-definite factorization for the ADMM KKT system.

The KKT matrix [[P + sigma*I, A^T], [A, -R^{-1}]] is symmetric quasi-definite:
its LDL^T factorization exists for any symmetric permutation and carries
exactly (n positive, m negative) pivots.  We factor with greedy 1x1 diagonal
pivoting (largest remaining |diagonal|) and a blocked right-looking update so
that the trailing work runs through BLAS; quasi-definite inputs never require
2x2 pivots.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import solve_triangular

from .errors import InputError, SingularKktError

PIVOT_THRESHOLD = 1e-12

# Panel width for the blocked trailing update.
_BLOCK = 64


def _as_matrix(a, name: str) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2:
        raise InputError(f"{name} must be a 2-d matrix, got ndim={a.ndim}")
    if not np.all(np.isfinite(a)):
        raise InputError(f"{name} contains non-finite entries")
    return a


@dataclass(frozen=True)
class LdltFactor:
    """Permuted unit-lower LDL^T factorization of a symmetric matrix.

    ``matrix[perm][:, perm] == unit_lower @ diag(diag) @ unit_lower.T``.
    The source matrix is kept to allow one step of iterative refinement
    inside :func:`ldlt_solve`.
    """

    permutation: np.ndarray
    unit_lower: np.ndarray
    diag: np.ndarray
    dim: int
    source: np.ndarray = field(repr=False)

    @property
    def inertia(self) -> tuple[int, int]:
        """(number of positive pivots, number of negative pivots)."""
        return int(np.sum(self.diag > 0)), int(np.sum(self.diag < 0))


def assemble_kkt(P: np.ndarray, A: np.ndarray, sigma: float, r_values: np.ndarray) -> np.ndarray:
    """Build the quasi-definite KKT matrix [[P + sigma*I, A^T], [A, -diag(1/r)]].

    Parameters
    ----------
    P : (n, n) symmetric positive semidefinite cost matrix.
    A : (m, n) constraint matrix.
    sigma : positive regularization added to the (1,1) block.
    r_values : (m,) positive per-constraint penalty entries.
    """
    P = _as_matrix(P, "P")
    A = _as_matrix(A, "A")
    r = np.asarray(r_values, dtype=np.float64)
    n = P.shape[0]
    m = A.shape[0]
    if P.shape[1] != n:
        raise InputError(f"P must be square, got {P.shape}")
    if A.shape[1] != n:
        raise InputError(f"A has {A.shape[1]} columns, expected {n}")
    if r.shape != (m,):
        raise InputError(f"penalty vector has shape {r.shape}, expected ({m},)")
    if sigma <= 0:
        raise InputError("sigma must be positive")
    if np.any(r <= 0):
        raise InputError("penalty entries must be positive")

    K = np.empty((n + m, n + m), dtype=np.float64)
    K[:n, :n] = P
    K[:n, :n].flat[:: n + 1] += sigma
    K[:n, n:] = A.T
    K[n:, :n] = A
    K[n:, n:] = 0.0
    K[n:, n:].flat[:: m + 1] = -1.0 / r
    return K


def ldlt_factor(M: np.ndarray, threshold: float = PIVOT_THRESHOLD) -> LdltFactor:
    """Factor a symmetric quasi-definite matrix as P M P^T = L D L^T.

    Greedy symmetric pivoting on the largest remaining |diagonal| entry;
    raises :class:`SingularKktError` when every remaining pivot candidate is
    below ``threshold`` in magnitude.
    """
    M = _as_matrix(M, "M")
    d = M.shape[0]
    if M.shape[1] != d:
        raise InputError(f"matrix must be square, got {M.shape}")
    if d and not np.allclose(M, M.T, rtol=1e-12, atol=1e-12):
        raise InputError("matrix must be symmetric")

    A = np.array(M, dtype=np.float64, copy=True)
    L = np.zeros((d, d), dtype=np.float64)
    D = np.zeros(d, dtype=np.float64)
    perm = np.arange(d, dtype=np.int64)
    # Diagonal of the trailing submatrix, kept current within each panel.
    dloc = A.diagonal().copy()

    for s in range(0, d, _BLOCK):
        e = min(s + _BLOCK, d)
        for j in range(s, e):
            p = j + int(np.argmax(np.abs(dloc[j:])))
            pivot_estimate = dloc[p]
            if abs(pivot_estimate) < threshold:
                raise SingularKktError(step=j, index=int(perm[p]), pivot=float(pivot_estimate))
            if p != j:
                A[[j, p], :] = A[[p, j], :]
                A[:, [j, p]] = A[:, [p, j]]
                L[[j, p], :j] = L[[p, j], :j]
                dloc[[j, p]] = dloc[[p, j]]
                perm[[j, p]] = perm[[p, j]]
            # Column j updated by the panel columns finalized so far.
            col = A[j:, j] - L[j:, s:j] @ (D[s:j] * L[j, s:j])
            piv = col[0]
            if abs(piv) < threshold:
                raise SingularKktError(step=j, index=int(perm[j]), pivot=float(piv))
            D[j] = piv
            L[j, j] = 1.0
            L[j + 1 :, j] = col[1:] / piv
            dloc[j + 1 :] -= piv * L[j + 1 :, j] ** 2
        if e < d:
            W = L[e:, s:e]
            A[e:, e:] -= (W * D[s:e]) @ W.T

    return LdltFactor(permutation=perm, unit_lower=L, diag=D, dim=d, source=M)


def _solve_factored(F: LdltFactor, b: np.ndarray) -> np.ndarray:
    u = b[F.permutation]
    c = solve_triangular(F.unit_lower, u, lower=True, unit_diagonal=True, check_finite=False)
    c /= F.diag
    w = solve_triangular(
        F.unit_lower, c, lower=True, unit_diagonal=True, trans="T", check_finite=False
    )
    v = np.empty_like(w)
    v[F.permutation] = w
    return v


def ldlt_solve(F: LdltFactor, b: np.ndarray) -> np.ndarray:
    """Solve M v = b for the factored M, with at most one step of iterative
    refinement (skipped when the raw solve is already at roundoff level)."""
    b = np.asarray(b, dtype=np.float64)
    if b.shape != (F.dim,):
        raise InputError(f"right-hand side has shape {b.shape}, expected ({F.dim},)")
    if F.dim == 0:
        return np.zeros(0)
    v = _solve_factored(F, b)
    r = b - F.source @ v
    scale = 1.0 + float(np.max(np.abs(b)))
    if float(np.max(np.abs(r))) > 1e-13 * scale:
        v = v + _solve_factored(F, r)
    return v


def reconstruct(F: LdltFactor) -> np.ndarray:
    """Undo the factorization: returns the matrix the factor represents."""
    S = (F.unit_lower * F.diag) @ F.unit_lower.T
    out = np.empty_like(S)
    out[np.ix_(F.permutation, F.permutation)] = S
    return out
