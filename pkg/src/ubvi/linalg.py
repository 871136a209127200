"""Nonnegative least squares and bordered-matrix inverse maintenance.

The fully-corrective weight step maximizes alignment with the target over
the nonnegative unit ball of the affinity metric Z.  Its dual is a plain
NNLS problem on a Cholesky factor of Z^-1; the resulting weights come out
nonnegative by the dual KKT conditions.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
import scipy.optimize

__all__ = [
    "NNLSError",
    "NearSingularError",
    "WeightProblem",
    "nnls",
    "solve_weights",
    "block_inverse_extend",
    "RIDGE",
]

NNLS_MAX_ITER = 30_000
RIDGE = 1e-10
SCHUR_FLOOR = 1e-12


class NNLSError(RuntimeError):
    """Active-set iteration cap exceeded without convergence."""


class NearSingularError(ValueError):
    """Bordered matrix extension has a vanishing Schur complement."""


def nnls(A: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Minimize ||A x - y|| subject to x >= 0 (Lawson-Hanson active set)."""
    A = np.asarray(A, dtype=float)
    y = np.asarray(y, dtype=float)
    try:
        x, _ = scipy.optimize.nnls(A, y, maxiter=NNLS_MAX_ITER)
    except RuntimeError as err:
        raise NNLSError(f"nnls did not converge in {NNLS_MAX_ITER} iterations") from err
    return x


@dataclass
class WeightProblem:
    """Dual weight-update instance over the affinity matrix Z.

    d holds the estimated alignments of the target with each component;
    solve_weights fills beta (dual solution) and lam (unit-norm weights).
    """

    Z: np.ndarray
    d: np.ndarray
    Z_inv: np.ndarray | None = None
    beta: np.ndarray | None = field(default=None)
    lam: np.ndarray | None = field(default=None)
    degenerate: bool = False


def solve_weights(problem: WeightProblem) -> np.ndarray:
    """Fully-corrective weights lam = Z^-1 (beta+d) / sqrt((beta+d)' Z^-1 (beta+d)).

    beta solves the dual ``min_{b>=0} b' Z^-1 b + 2 b' Z^-1 d``; nonnegativity
    of lam follows from the dual KKT conditions.  If beta + d vanishes, the
    target is estimated orthogonal to the component span and the problem is
    flagged degenerate with uniform-direction fallback weights of the last
    feasible kind (all mass on the first component).
    """
    Z = np.asarray(problem.Z, dtype=float)
    d = np.asarray(problem.d, dtype=float)
    n = d.shape[0]
    if Z.shape != (n, n):
        raise ValueError("Z and d shapes disagree")
    Z_inv = problem.Z_inv
    if Z_inv is None:
        Z_inv = _spd_inverse(Z)
    try:
        chol = np.linalg.cholesky(Z_inv)
    except np.linalg.LinAlgError:
        Z_inv = _spd_inverse(Z + RIDGE * np.eye(n))
        chol = np.linalg.cholesky(Z_inv)
    L = chol.T  # Z_inv = L' L
    beta = nnls(L, -L @ d)
    u = beta + d
    w = Z_inv @ u
    norm_sq = float(u @ w)
    # u vanishing relative to its parts means the target is estimated
    # orthogonal to the span (beta merely cancels an infeasible d)
    vanished = np.linalg.norm(u) <= 1e-7 * (
        np.linalg.norm(d) + np.linalg.norm(beta)
    )
    if vanished or norm_sq <= 0.0 or not np.isfinite(norm_sq):
        problem.beta = beta
        problem.degenerate = True
        lam = np.zeros(n)
        lam[0] = 1.0 / np.sqrt(Z[0, 0])
        problem.lam = lam
        return lam
    lam = w / np.sqrt(norm_sq)
    lam[(lam < 0.0) & (lam >= -1e-10)] = 0.0
    problem.beta = beta
    problem.lam = lam
    problem.degenerate = False
    return lam


def _spd_inverse(Z: np.ndarray) -> np.ndarray:
    try:
        c, low = scipy.linalg.cho_factor(Z)
        return scipy.linalg.cho_solve((c, low), np.eye(Z.shape[0]))
    except scipy.linalg.LinAlgError:
        return np.linalg.inv(Z + RIDGE * np.eye(Z.shape[0]))


def block_inverse_extend(
    Z_inv: np.ndarray, z_col: np.ndarray, z_diag: float
) -> np.ndarray:
    """Inverse of the matrix bordered by (z_col, z_diag), in O(n^2).

    Raises NearSingularError when the Schur complement falls below the
    floor; callers apply a ridge and recompute densely.
    """
    Z_inv = np.asarray(Z_inv, dtype=float)
    z_col = np.asarray(z_col, dtype=float)
    n = z_col.shape[0]
    if n == 0:
        return np.array([[1.0 / z_diag]])
    v = Z_inv @ z_col
    schur = float(z_diag - z_col @ v)
    if schur <= SCHUR_FLOOR:
        raise NearSingularError(f"Schur complement {schur:.3e} below floor")
    out = np.empty((n + 1, n + 1))
    out[:n, :n] = Z_inv + np.outer(v, v) / schur
    out[:n, n] = -v / schur
    out[n, :n] = -v / schur
    out[n, n] = 1.0 / schur
    return out
