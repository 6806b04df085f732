"""
Batched dense linear algebra and Newton kernels shared by the solvers
"""
import logging
from dataclasses import dataclass
from itertools import combinations
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy import linalg

from problem_model import EvalBatch, ParametricProblem, evaluate_batch
from settings import DEFAULT_TOLERANCES, Tolerances

logger = logging.getLogger(__name__)

# Newton row status codes
RUNNING, CONVERGED, NO_CONVERGE, SINGULAR = 0, 1, 2, 3

POLISH_SIGMA_FLOOR = 1e-154
POLISH_MAX_STEPS = 100
CONE_FEAS_TOL = 1e-10


def index_subsets(indices: Sequence[int], max_size: Optional[int] = None) -> List[Tuple[int, ...]]:
    """All subsets of indices, ordered by size then lexicographically."""
    indices = sorted(indices)
    top = len(indices) if max_size is None else min(max_size, len(indices))
    return [c for r in range(top + 1) for c in combinations(indices, r)]


def row_sigma_min(A: np.ndarray) -> np.ndarray:
    """
    Smallest singular value of each stacked row block.

    Args:
        A: (N, q, m) array of q gradient rows in R^m

    Returns:
        (N,) array; +inf when q == 0 and 0 when q > m (rows cannot be independent)
    """
    N, q, m = A.shape
    if q == 0:
        return np.full(N, np.inf)
    if q > m:
        return np.zeros(N)
    return np.linalg.svd(A, compute_uv=False)[:, -1]


def sigma_min(M: np.ndarray) -> float:
    """Smallest singular value of one matrix (+inf for an empty matrix)."""
    if M.size == 0:
        return np.inf
    return float(np.linalg.svd(M, compute_uv=False)[-1])


def _solve(K: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    try:
        return np.linalg.solve(K, rhs[..., None])[..., 0]
    except np.linalg.LinAlgError:
        return np.einsum("nij,nj->ni", np.linalg.pinv(K), rhs)


# =============================================================================
# Reduced KKT system
# =============================================================================

def reduced_residual(batch: EvalBatch, lam: np.ndarray, J: Sequence[int]) -> np.ndarray:
    """Psi = (grad g + grad h_J^T lam; h_J) for every row of an order>=1 batch."""
    J = list(J)
    A = batch.jac_y_h[:, J, :]
    stationarity = batch.grad_y_g + np.einsum("nj,njm->nm", lam, A)
    return np.concatenate([stationarity, batch.h[:, J]], axis=1)


def lagrangian_hessian(batch: EvalBatch, lam_full: np.ndarray) -> np.ndarray:
    """Hessian in y of g + sum_i lam_i h_i for every row."""
    return batch.hess_yy_g + np.einsum("nk,nkab->nab", lam_full, batch.hess_yy_h)


def reduced_system(batch: EvalBatch, lam: np.ndarray, J: Sequence[int]) -> Tuple[np.ndarray, np.ndarray]:
    """Psi and its Jacobian [[H_L, A^T], [A, 0]] for active set J."""
    J = list(J)
    N, m = batch.grad_y_g.shape
    q = len(J)
    A = batch.jac_y_h[:, J, :]
    HL = batch.hess_yy_g + np.einsum("nj,njab->nab", lam, batch.hess_yy_h[:, J])
    K = np.zeros((N, m + q, m + q))
    K[:, :m, :m] = HL
    K[:, :m, m:] = A.transpose(0, 2, 1)
    K[:, m:, :m] = A
    return reduced_residual(batch, lam, J), K


@dataclass
class NewtonBatch:
    """Per-row outcome of a batched reduced-KKT Newton solve."""
    y: np.ndarray
    lam: np.ndarray
    status: np.ndarray
    psi_norm: np.ndarray
    iterations: np.ndarray


def _line_search(problem, X, Y, L, rows, step, norm0, J, tol) -> np.ndarray:
    m = Y.shape[1]
    t = np.ones(len(rows))
    accepted = np.zeros(len(rows), dtype=bool)
    pending = np.arange(len(rows))
    for _ in range(tol.max_halvings + 1):
        r = rows[pending]
        Yt = Y[r] + t[pending, None] * step[pending, :m]
        Lt = L[r] + t[pending, None] * step[pending, m:]
        b = evaluate_batch(problem, X[r], Yt, order=1, tol=tol, check_domain=False, check_finite=False)
        trial = np.linalg.norm(reduced_residual(b, Lt, J), axis=1)
        ok = np.isfinite(trial) & (trial <= (1.0 - 1e-4 * t[pending]) * norm0[pending])
        Y[r[ok]] = Yt[ok]
        L[r[ok]] = Lt[ok]
        accepted[pending[ok]] = True
        pending = pending[~ok]
        if not pending.size:
            break
        t[pending] *= 0.5
    return accepted


def _polish(problem, X, Y, L, rows, J, tol, norms) -> None:
    """Keep stepping converged rows while steps shrink so degenerate roots settle."""
    m = Y.shape[1]
    last = np.full(len(rows), np.inf)
    live = np.arange(len(rows))
    for _ in range(POLISH_MAX_STEPS):
        if not live.size:
            return
        r = rows[live]
        b = evaluate_batch(problem, X[r], Y[r], order=2, tol=tol, check_domain=False, check_finite=False)
        psi, K = reduced_system(b, L[r], J)
        finite = np.all(np.isfinite(K), axis=(1, 2)) & np.all(np.isfinite(psi), axis=1)
        smin = np.zeros(len(r))
        smin[finite] = np.linalg.svd(K[finite], compute_uv=False)[:, -1]
        keep = finite & (smin > POLISH_SIGMA_FLOOR)
        step = np.zeros_like(psi)
        if np.any(keep):
            step[keep] = _solve(K[keep], -psi[keep])
        size = np.linalg.norm(step, axis=1)
        vnorm = np.linalg.norm(np.hstack([Y[r], L[r]]), axis=1)
        keep &= (size > 1e-16 * (1.0 + vnorm)) & (size < last[live])
        if not np.any(keep):
            return
        Yt = Y[r] + step[:, :m]
        Lt = L[r] + step[:, m:]
        b1 = evaluate_batch(problem, X[r], Yt, order=1, tol=tol, check_domain=False, check_finite=False)
        trial = np.linalg.norm(reduced_residual(b1, Lt, J), axis=1)
        keep &= np.isfinite(trial) & (trial <= tol.newton_tol)
        Y[r[keep]] = Yt[keep]
        L[r[keep]] = Lt[keep]
        norms[r[keep]] = trial[keep]
        last[live[keep]] = size[keep]
        live = live[keep]


def newton_reduced(problem: ParametricProblem, X, J: Sequence[int], Y0, L0,
                   tol: Tolerances = DEFAULT_TOLERANCES, polish: bool = True) -> NewtonBatch:
    """
    Damped Newton on the reduced KKT system for many seeds at once.

    Each row runs independently: convergence is tested before a step is taken,
    a step is rejected as SINGULAR when the Jacobian's smallest singular value
    drops below jac_sigma_tol, and the merit ||Psi|| must decrease within
    max_halvings step halvings.

    Args:
        problem: The problem
        X: (N, n) parameters (a single row is broadcast)
        J: Active index set (0-based)
        Y0: (N, m) primal seeds
        L0: (N, |J|) multiplier seeds
        tol: Tolerances
        polish: Continue stepping after convergence while steps shrink

    Returns:
        NewtonBatch with per-row status codes
    """
    J = list(J)
    m, q = problem.m, len(J)
    Y = np.array(Y0, dtype=float).reshape(-1, m).copy()
    N = len(Y)
    X = np.asarray(X, dtype=float).reshape(-1, problem.n)
    if len(X) == 1 and N > 1:
        X = np.repeat(X, N, axis=0)
    L = np.array(L0, dtype=float).reshape(N, q).copy()
    status = np.full(N, RUNNING)
    norms = np.full(N, np.inf)
    iters = np.zeros(N, dtype=int)

    with np.errstate(all="ignore"):
        for it in range(tol.max_newton + 1):
            rows = np.flatnonzero(status == RUNNING)
            if not rows.size:
                break
            b = evaluate_batch(problem, X[rows], Y[rows], order=2, tol=tol, check_domain=False, check_finite=False)
            psi, K = reduced_system(b, L[rows], J)
            norm = np.linalg.norm(psi, axis=1)
            bad = ~np.isfinite(norm) | ~np.all(np.isfinite(K), axis=(1, 2))
            norms[rows] = norm
            done = ~bad & (norm <= tol.newton_tol)
            status[rows[done]] = CONVERGED
            status[rows[bad]] = NO_CONVERGE
            go = ~done & ~bad
            if it == tol.max_newton:
                status[rows[go]] = NO_CONVERGE
                break
            if not np.any(go):
                continue
            rows, psi, K, norm = rows[go], psi[go], K[go], norm[go]
            smin = np.linalg.svd(K, compute_uv=False)[:, -1]
            singular = smin < tol.jac_sigma_tol
            status[rows[singular]] = SINGULAR
            rows, psi, K, norm = rows[~singular], psi[~singular], K[~singular], norm[~singular]
            if not rows.size:
                continue
            step = _solve(K, -psi)
            accepted = _line_search(problem, X, Y, L, rows, step, norm, J, tol)
            status[rows[~accepted]] = NO_CONVERGE
            iters[rows] += 1

        if polish:
            conv = np.flatnonzero(status == CONVERGED)
            if conv.size:
                _polish(problem, X, Y, L, conv, J, tol, norms)

    return NewtonBatch(y=Y, lam=L, status=status, psi_norm=norms, iterations=iters)


# =============================================================================
# Gauss-Newton on constraint subsets
# =============================================================================

def gauss_newton(problem: ParametricProblem, X, idx: Sequence[int], Y0,
                 tol: Tolerances = DEFAULT_TOLERANCES, max_iter: int = 40) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Minimize ||h_idx(x, y)|| over y for many seeds (Newton when |idx| == m).

    Returns:
        (Y, residual, sigma) with residual = ||h_idx|| at the result and sigma
        the smallest singular value of the idx gradient rows there
    """
    idx = list(idx)
    m = problem.m
    Y = np.array(Y0, dtype=float).reshape(-1, m).copy()
    N = len(Y)
    X = np.asarray(X, dtype=float).reshape(-1, problem.n)
    if len(X) == 1 and N > 1:
        X = np.repeat(X, N, axis=0)

    live = np.arange(N)
    with np.errstate(all="ignore"):
        for _ in range(max_iter):
            if not live.size:
                break
            b = evaluate_batch(problem, X[live], Y[live], order=1, tol=tol, check_domain=False, check_finite=False)
            r = b.h[:, idx]
            A = b.jac_y_h[:, idx, :]
            norm0 = np.linalg.norm(r, axis=1)
            ok = np.isfinite(norm0) & np.all(np.isfinite(A), axis=(1, 2)) & (norm0 > 1e-15)
            live = live[ok]
            if not live.size:
                break
            r, A, norm0 = r[ok], A[ok], norm0[ok]
            step = -np.einsum("nmq,nq->nm", np.linalg.pinv(A, rcond=1e-12), r)
            t = np.ones(len(live))
            moved = np.zeros(len(live), dtype=bool)
            pending = np.arange(len(live))
            for _ in range(tol.max_halvings + 1):
                rr = live[pending]
                Yt = Y[rr] + t[pending, None] * step[pending]
                bt = evaluate_batch(problem, X[rr], Yt, order=0, tol=tol, check_domain=False, check_finite=False)
                trial = np.linalg.norm(bt.h[:, idx], axis=1)
                better = np.isfinite(trial) & (trial < norm0[pending])
                Y[rr[better]] = Yt[better]
                moved[pending[better]] = True
                pending = pending[~better]
                if not pending.size:
                    break
                t[pending] *= 0.5
            size = np.linalg.norm(step, axis=1) * t
            live = live[moved & (size > 1e-15 * (1.0 + np.linalg.norm(Y[live], axis=1)))]

        b = evaluate_batch(problem, X, Y, order=1, tol=tol, check_domain=False, check_finite=False)
        residual = np.linalg.norm(b.h[:, idx], axis=1)
        sigma = row_sigma_min(b.jac_y_h[:, idx, :])
    residual[~np.isfinite(residual)] = np.inf
    return Y, residual, sigma


# =============================================================================
# Subspaces, cones and inertia
# =============================================================================

def null_basis(A: np.ndarray, m: int) -> np.ndarray:
    """Orthonormal basis (m, r) of the null space of the rows of A."""
    if A.shape[0] == 0:
        return np.eye(m)
    return linalg.null_space(A, rcond=1e-12)


def reduced_hessian(H: np.ndarray, A: np.ndarray) -> np.ndarray:
    """Z^T H Z for an orthonormal null basis Z of A."""
    Z = null_basis(A, H.shape[0])
    return Z.T @ H @ Z


def reduced_inertia(H: np.ndarray, A: np.ndarray) -> int:
    """Number of negative eigenvalues of the null-space-reduced Hessian."""
    R = reduced_hessian(H, A)
    if R.size == 0:
        return 0
    w = np.linalg.eigvalsh(R)
    return int(np.sum(w < -1e-12 * (1.0 + np.max(np.abs(w)))))


def critical_cone_modulus(H: np.ndarray, A_plus: np.ndarray, A_zero: np.ndarray,
                          feas_tol: float = CONE_FEAS_TOL) -> Tuple[float, Optional[np.ndarray]]:
    """
    min d^T H d over unit d with A_plus d = 0 and A_zero d <= 0.

    Every face of the cone (a subset S of the A_zero rows held at equality) is
    a subspace; the minimizer over the cone is a stationary direction of the
    compressed Hessian on the face whose relative interior contains it. Both
    signs of every face eigenvector are candidates, plus the projections of
    the remaining inward normals onto repeated eigenspaces. Candidates that
    violate the remaining rows are discarded.

    Returns:
        (modulus, witness direction); (+inf, None) when the cone is {0}
    """
    m = H.shape[0]
    A_plus = np.asarray(A_plus, dtype=float).reshape(-1, m)
    A_zero = np.asarray(A_zero, dtype=float).reshape(-1, m)
    n0 = A_zero.shape[0]
    best, best_d = np.inf, None

    for S in index_subsets(range(n0)):
        rest = [i for i in range(n0) if i not in S]
        Z = null_basis(np.vstack([A_plus, A_zero[list(S)]]), m)
        if Z.shape[1] == 0:
            continue
        w, V = np.linalg.eigh(Z.T @ H @ Z)
        candidates = [s * (Z @ V[:, j]) for j in range(len(w)) for s in (1.0, -1.0)]
        if rest:
            scale = 1e-12 * (1.0 + np.max(np.abs(w)))
            for j in range(len(w)):
                cluster = np.flatnonzero(np.abs(w - w[j]) <= scale)
                if len(cluster) < 2 or cluster[0] != j:
                    continue
                E = Z @ V[:, cluster]
                for i in rest:
                    d = -E @ (E.T @ A_zero[i])
                    nd = np.linalg.norm(d)
                    if nd > 1e-12:
                        candidates.append(d / nd)
        for d in candidates:
            if rest and np.any(A_zero[rest] @ d > feas_tol):
                continue
            value = float(d @ H @ d)
            if value < best:
                best, best_d = value, d
    return best, best_d
