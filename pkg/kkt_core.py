"""
KKT points of the lower-level problem at fixed x
"""
import logging
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from errors import InfeasibleError, NoConverge, NoStart, Rejected, SingularJacobian
from numerics import (
    CONVERGED, NO_CONVERGE, SINGULAR,
    critical_cone_modulus, index_subsets, newton_reduced,
)
from problem_model import (
    EvalBatch, ParametricProblem, _rows, clamp_x, evaluate, evaluate_batch, feasible_box, y_grid,
)
from settings import DEFAULT_TOLERANCES, Tolerances

logger = logging.getLogger(__name__)

STRICT_LOCAL_MIN = "STRICT_LOCAL_MIN"
NOT_LOCAL_MIN = "NOT_LOCAL_MIN"
UNDETERMINED = "UNDETERMINED"

# Rejection reasons, indexed by the codes _screen_rows returns
REJECT_REASONS = ("", "negative multiplier", "infeasible", "residual")

SEED_BOX_RES = 41
PROBE_RADII = (0.25, 0.5, 1.0)


# =============================================================================
# Result types
# =============================================================================

@dataclass(frozen=True, eq=False)
class KKTPoint:
    """A validated primal-dual pair; lam and h have k entries, lam is zero off the active set."""
    x: np.ndarray
    y: np.ndarray
    lam: np.ndarray
    h: np.ndarray
    active: Tuple[int, ...]
    residual: float

    def to_dict(self) -> Dict:
        return {
            "x": self.x.tolist(),
            "y": self.y.tolist(),
            "lambda": self.lam.tolist(),
            "h": self.h.tolist(),
            "active": list(self.active),
            "residual": self.residual,
        }


@dataclass(frozen=True)
class KKTClassification:
    label: str
    evidence: float
    witness: Optional[Tuple[float, ...]] = None

    def to_dict(self) -> Dict:
        return {"label": self.label, "evidence": self.evidence,
                "witness": list(self.witness) if self.witness is not None else None}


@dataclass
class EnumerationSummary:
    """Counters from one enumeration; failures are counted, never raised."""
    attempted: int = 0
    converged: int = 0
    rejected: int = 0
    singular: int = 0
    no_converge: int = 0
    patterns: int = 0

    def to_dict(self) -> Dict:
        return dict(vars(self))


class KKTPointList(list):
    """Enumerated KKT points in canonical order with solver counters attached."""

    def __init__(self, points=(), summary: Optional[EnumerationSummary] = None):
        super().__init__(points)
        self.summary = summary if summary is not None else EnumerationSummary()


# =============================================================================
# Residual and row screening
# =============================================================================

def _residual_rows(batch: EvalBatch, lam: np.ndarray) -> np.ndarray:
    stationarity = batch.grad_y_g + np.einsum("nk,nkm->nm", lam, batch.jac_y_h)
    h = batch.h
    return (np.linalg.norm(stationarity, axis=1)
            + np.sum(np.abs(lam * h) + np.abs(np.minimum(0.0, lam)) + np.abs(np.minimum(0.0, -h)), axis=1))


def kkt_residual(problem: ParametricProblem, x, y, lam,
                 tol: Tolerances = DEFAULT_TOLERANCES) -> float:
    """
    r(y, lam) = ||grad g + sum lam_i grad h_i|| + sum |lam_i h_i| + sum |min(0, lam_i)| + sum |min(0, -h_i)|

    Vanishes exactly at KKT pairs.

    Raises:
        NonFiniteError: The evaluation produced NaN/Inf
    """
    lam = np.asarray(lam, dtype=float).reshape(1, problem.k)
    b = evaluate_batch(problem, np.asarray(x, dtype=float).reshape(1, problem.n),
                       np.asarray(y, dtype=float).reshape(1, problem.m), order=1, tol=tol)
    return float(_residual_rows(b, lam)[0])


def _screen_rows(problem: ParametricProblem, X: np.ndarray, Y: np.ndarray, LJ: np.ndarray,
                 J: Sequence[int], tol: Tolerances):
    """
    Sign, feasibility and residual checks for converged reduced solves.

    Returns:
        (lam_full, residual, h, code, index) where code indexes REJECT_REASONS
        and index is the violated constraint (-1 when none applies)
    """
    J = list(J)
    N, k = len(Y), problem.k
    b = evaluate_batch(problem, X, Y, order=1, tol=tol, check_domain=False, check_finite=False)
    lam = np.zeros((N, k))
    lam[:, J] = LJ
    code = np.zeros(N, dtype=int)
    index = np.full(N, -1)

    if J:
        bad = np.any(LJ < -tol.act_tol, axis=1)
        index[bad] = np.asarray(J)[np.argmin(LJ, axis=1)][bad]
        code[bad] = 1
    inactive = [i for i in range(k) if i not in J]
    if inactive:
        slack = b.h[:, inactive]
        bad = np.any(slack > tol.act_tol, axis=1) & (code == 0)
        index[bad] = np.asarray(inactive)[np.argmax(slack, axis=1)][bad]
        code[bad] = 2

    lam = np.maximum(lam, 0.0)
    with np.errstate(all="ignore"):
        residual = _residual_rows(b, lam)
    bad = ~(residual <= tol.newton_tol) & (code == 0)
    if k:
        terms = np.abs(lam * b.h) + np.abs(np.minimum(0.0, -b.h))
        index[bad] = np.argmax(terms, axis=1)[bad]
    code[bad] = 3
    return lam, residual, b.h, code, index


def _multiplier_seeds(problem: ParametricProblem, X: np.ndarray, Y: np.ndarray,
                      J: Sequence[int], tol: Tolerances) -> np.ndarray:
    """Least-squares multipliers from stationarity at each seed."""
    J = list(J)
    if not J:
        return np.zeros((len(Y), 0))
    with np.errstate(all="ignore"):
        b = evaluate_batch(problem, X, Y, order=1, tol=tol, check_domain=False, check_finite=False)
        At = b.jac_y_h[:, J, :].transpose(0, 2, 1)
        ok = np.all(np.isfinite(At), axis=(1, 2)) & np.all(np.isfinite(b.grad_y_g), axis=1)
        lam = np.zeros((len(Y), len(J)))
        if np.any(ok):
            lam[ok] = -np.einsum("nqm,nm->nq", np.linalg.pinv(At[ok], rcond=1e-12), b.grad_y_g[ok])
    return lam


def _active_set(h: np.ndarray, tol: Tolerances) -> Tuple[int, ...]:
    return tuple(int(i) for i in np.flatnonzero(np.abs(h) <= tol.act_tol))


# =============================================================================
# Reduced solves
# =============================================================================

def solve_reduced_kkt(problem: ParametricProblem, x, J: Sequence[int], y0, lam0=None,
                      tol: Tolerances = DEFAULT_TOLERANCES) -> KKTPoint:
    """
    Newton on Psi = (grad g + grad h_J^T lam_J; h_J) followed by validation.

    Args:
        problem: The problem
        x: Parameter
        J: Index set (0-based), |J| <= m
        y0: Primal seed
        lam0: Multiplier seed of length |J| (least squares from stationarity when None)
        tol: Tolerances

    Returns:
        Validated KKTPoint

    Raises:
        NoConverge: Iteration cap or failed line search
        SingularJacobian: Reduced Jacobian smallest singular value below jac_sigma_tol
        Rejected: Converged but violates a sign, feasibility or residual check
    """
    J = tuple(sorted(int(i) for i in J))
    if len(J) > problem.m:
        raise ValueError(f"|J|={len(J)} exceeds m={problem.m}")
    X = clamp_x(problem, np.asarray(x, dtype=float).reshape(1, problem.n), tol)
    Y0 = np.asarray(y0, dtype=float).reshape(1, problem.m)
    if not np.all(np.isfinite(Y0)):
        raise ValueError("seed must be finite")
    L0 = (_multiplier_seeds(problem, X, Y0, J, tol) if lam0 is None
          else np.asarray(lam0, dtype=float).reshape(1, len(J)))

    res = newton_reduced(problem, X, J, Y0, L0, tol)
    status = int(res.status[0])
    if status == SINGULAR:
        raise SingularJacobian(f"Reduced KKT Jacobian singular for J={list(J)} at x={X[0].tolist()}")
    if status != CONVERGED:
        raise NoConverge(f"Newton did not converge for J={list(J)} at x={X[0].tolist()} "
                         f"(|Psi|={res.psi_norm[0]:.3e})")

    lam, residual, h, code, index = _screen_rows(problem, X, res.y, res.lam, J, tol)
    if code[0]:
        raise Rejected(int(index[0]), REJECT_REASONS[code[0]])
    return KKTPoint(x=X[0].copy(), y=res.y[0].copy(), lam=lam[0], h=h[0].copy(), active=_active_set(h[0], tol),
                    residual=float(residual[0]))


# =============================================================================
# Enumeration
# =============================================================================

def seed_points(problem: ParametricProblem, x, seeds_per_axis: int) -> np.ndarray:
    """Grid seeds over the inflated feasible bounding box (empty when infeasible)."""
    try:
        box = feasible_box(problem, x, grid_res=SEED_BOX_RES)
    except InfeasibleError:
        return np.zeros((0, problem.m))
    box[:, 0] = np.maximum(box[:, 0], problem.y_box[:, 0])
    box[:, 1] = np.minimum(box[:, 1], problem.y_box[:, 1])
    return y_grid(box, seeds_per_axis)


def _dedup(candidates: List[Tuple[np.ndarray, np.ndarray, float, np.ndarray]],
           tol: Tolerances) -> List[Tuple[np.ndarray, np.ndarray, float, np.ndarray]]:
    """Greedy dedup in (y, lam) max-norm, smaller residual first."""
    if not candidates:
        return []
    candidates = sorted(candidates, key=lambda c: c[2])
    V = np.array([np.concatenate([c[0], c[1]]) for c in candidates])
    # collapse exact repeats before the pairwise pass
    _, first = np.unique(np.round(V, 9), axis=0, return_index=True)
    first = np.sort(first)
    kept: List[int] = []
    for i in first:
        if kept and np.min(np.max(np.abs(V[kept] - V[i]), axis=1)) <= tol.dedup_tol:
            continue
        kept.append(int(i))
    return [candidates[i] for i in kept]


def enumerate_kkt_grid(problem: ParametricProblem, X_nodes, seeds_per_axis: Optional[int] = None,
                       tol: Tolerances = DEFAULT_TOLERANCES) -> List[KKTPointList]:
    """
    Enumerate KKT points at many x at once.

    For every active set J with |J| <= m, all (x node, seed) pairs are solved in
    a single batched Newton run. Converged rows are screened, deduplicated per
    node within dedup_tol and returned in canonical (active, y) order.

    Args:
        problem: The problem
        X_nodes: (N, n) parameters
        seeds_per_axis: Seeds per y axis (defaults to tol.seeds_per_axis)
        tol: Tolerances

    Returns:
        One KKTPointList per node
    """
    spa = tol.seeds_per_axis if seeds_per_axis is None else int(seeds_per_axis)
    if spa < 2:
        raise ValueError("seeds_per_axis must be at least 2")
    X_nodes = clamp_x(problem, _rows(X_nodes, problem.n), tol)
    n_nodes = len(X_nodes)

    seeds, owner = [], []
    for j, x in enumerate(X_nodes):
        s = seed_points(problem, x, spa)
        seeds.append(s)
        owner.append(np.full(len(s), j))
    S = np.vstack(seeds) if seeds else np.zeros((0, problem.m))
    owner = np.concatenate(owner) if owner else np.zeros(0, dtype=int)
    Xs = X_nodes[owner]

    summaries = [EnumerationSummary() for _ in range(n_nodes)]
    candidates: List[list] = [[] for _ in range(n_nodes)]
    patterns = index_subsets(range(problem.k), max_size=problem.m)

    for J in patterns:
        if not len(S):
            break
        L0 = _multiplier_seeds(problem, Xs, S, J, tol)
        res = newton_reduced(problem, Xs, J, S, L0, tol)
        conv = np.flatnonzero(res.status == CONVERGED)
        counts = {
            "attempted": np.bincount(owner, minlength=n_nodes),
            "converged": np.bincount(owner[conv], minlength=n_nodes),
            "singular": np.bincount(owner[res.status == SINGULAR], minlength=n_nodes),
            "no_converge": np.bincount(owner[res.status == NO_CONVERGE], minlength=n_nodes),
        }
        rejected = np.zeros(n_nodes, dtype=int)
        if conv.size:
            lam, residual, h, code, _ = _screen_rows(problem, Xs[conv], res.y[conv], res.lam[conv], J, tol)
            rejected = np.bincount(owner[conv[code > 0]], minlength=n_nodes)
            for r in np.flatnonzero(code == 0):
                row = conv[r]
                candidates[owner[row]].append((res.y[row].copy(), lam[r], float(residual[r]), h[r]))
        for j, summary in enumerate(summaries):
            summary.patterns += 1
            summary.attempted += int(counts["attempted"][j])
            summary.converged += int(counts["converged"][j])
            summary.singular += int(counts["singular"][j])
            summary.no_converge += int(counts["no_converge"][j])
            summary.rejected += int(rejected[j])

    out = []
    for j in range(n_nodes):
        points = [
            KKTPoint(x=X_nodes[j].copy(), y=y, lam=lam, h=h, active=_active_set(h, tol), residual=residual)
            for y, lam, residual, h in _dedup(candidates[j], tol)
        ]
        points.sort(key=lambda p: (p.active, tuple(p.y)))
        out.append(KKTPointList(points, summaries[j]))
        logger.debug(f"x={X_nodes[j].tolist()}: {len(points)} KKT point(s), {summaries[j].to_dict()}")
    return out


def enumerate_kkt_points(problem: ParametricProblem, x, seeds_per_axis: Optional[int] = None,
                         tol: Tolerances = DEFAULT_TOLERANCES) -> KKTPointList:
    """
    All KKT points found by active-set enumeration at one x.

    Every J with |J| <= m is tried from every grid seed; failed solves are
    counted in the attached summary and skipped.

    Returns:
        KKTPointList in canonical order (lexicographic in active set, then y)
    """
    return enumerate_kkt_grid(problem, np.asarray(x, dtype=float).reshape(1, problem.n),
                              seeds_per_axis, tol)[0]


# =============================================================================
# Classification
# =============================================================================

def lagrangian_hessian_at(problem: ParametricProblem, kkt: KKTPoint,
                          tol: Tolerances = DEFAULT_TOLERANCES) -> Tuple[np.ndarray, np.ndarray]:
    """(Hessian of the Lagrangian in y, constraint Jacobian in y) at a KKT point."""
    rec = evaluate(problem, kkt.x, kkt.y, tol)
    HL = rec.hess_yy_g + np.einsum("k,kab->ab", kkt.lam, rec.hess_yy_h)
    return HL, rec.jac_y_h


def critical_cone_rows(problem: ParametricProblem, kkt: KKTPoint,
                       tol: Tolerances = DEFAULT_TOLERANCES) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    (HL, A_plus, A_zero): active rows split at reg_tol on the multiplier.

    Positive-multiplier rows hold at equality on the critical cone; the
    zero-multiplier rows are inequalities d^T grad h_i <= 0.
    """
    HL, A = lagrangian_hessian_at(problem, kkt, tol)
    plus = [i for i in kkt.active if kkt.lam[i] > tol.reg_tol]
    zero = [i for i in kkt.active if kkt.lam[i] <= tol.reg_tol]
    return HL, A[plus], A[zero]


def sosc_modulus(problem: ParametricProblem, kkt: KKTPoint,
                 tol: Tolerances = DEFAULT_TOLERANCES) -> Tuple[float, Optional[np.ndarray]]:
    """Minimum curvature of the Lagrangian over unit critical-cone directions (+inf if the cone is {0})."""
    HL, A_plus, A_zero = critical_cone_rows(problem, kkt, tol)
    return critical_cone_modulus(HL, A_plus, A_zero)


def probe_directions(m: int, count: int) -> np.ndarray:
    """Deterministic unit directions in R^m."""
    if m == 1:
        return np.array([[1.0], [-1.0]])
    if m == 2:
        t = 2.0 * np.pi * np.arange(count) / count
        return np.column_stack([np.cos(t), np.sin(t)])
    rng = np.random.Generator(np.random.Philox(0))
    D = rng.standard_normal((count, m))
    return D / np.linalg.norm(D, axis=1, keepdims=True)


def _probe_descent(problem: ParametricProblem, kkt: KKTPoint, tol: Tolerances) -> Tuple[float, np.ndarray]:
    """Lowest g - g* over feasible probes in the probe_r ball, with its point."""
    D = probe_directions(problem.m, tol.probe_dirs)
    radii = tol.probe_r * np.asarray(PROBE_RADII)
    Y = (kkt.y[None, None, :] + radii[:, None, None] * D[None, :, :]).reshape(-1, problem.m)
    b = evaluate_batch(problem, kkt.x, Y, order=0, tol=tol)
    g0 = evaluate_batch(problem, kkt.x, kkt.y, order=0, tol=tol).g[0]
    feasible = np.max(b.h, axis=1) <= 0.0 if problem.k else np.ones(len(Y), dtype=bool)
    if not np.any(feasible):
        return np.inf, kkt.y
    delta = np.where(feasible, b.g - g0, np.inf)
    best = int(np.argmin(delta))
    return float(delta[best]), Y[best]


def classify_kkt(problem: ParametricProblem, kkt: KKTPoint,
                 tol: Tolerances = DEFAULT_TOLERANCES) -> KKTClassification:
    """
    Classify a KKT point by its critical-cone curvature, falling back to probing.

    STRICT_LOCAL_MIN when the cone modulus exceeds class_tol; NOT_LOCAL_MIN when
    a cone direction has curvature below -class_tol or a feasible probe at
    radius <= probe_r lowers g by more than class_tol * probe_r^2;
    UNDETERMINED otherwise.
    """
    modulus, direction = sosc_modulus(problem, kkt, tol)
    if modulus > tol.class_tol:
        return KKTClassification(STRICT_LOCAL_MIN, float(modulus))
    if modulus < -tol.class_tol:
        return KKTClassification(NOT_LOCAL_MIN, float(modulus), tuple(direction.tolist()))

    delta, witness = _probe_descent(problem, kkt, tol)
    if delta < -tol.class_tol * tol.probe_r ** 2:
        logger.debug(f"Feasible descent probe at y={witness.tolist()} (drop {delta:.3e})")
        return KKTClassification(NOT_LOCAL_MIN, delta / tol.probe_r ** 2, tuple(witness.tolist()))
    return KKTClassification(UNDETERMINED, float(modulus))


def objective_value(problem: ParametricProblem, kkt: KKTPoint,
                    tol: Tolerances = DEFAULT_TOLERANCES) -> float:
    return float(evaluate_batch(problem, kkt.x, kkt.y, order=0, tol=tol).g[0])


def local_minimizers(problem: ParametricProblem, points: Sequence[KKTPoint],
                     tol: Tolerances = DEFAULT_TOLERANCES) -> List[KKTPoint]:
    return [p for p in points if classify_kkt(problem, p, tol).label == STRICT_LOCAL_MIN]


def global_minimizer(problem: ParametricProblem, x,
                     tol: Tolerances = DEFAULT_TOLERANCES) -> KKTPoint:
    """
    Lowest-objective strict local minimizer among the enumerated KKT points.

    Raises:
        NoStart: No KKT point classifies as STRICT_LOCAL_MIN
    """
    mins = local_minimizers(problem, enumerate_kkt_points(problem, x, tol=tol), tol)
    if not mins:
        raise NoStart(f"No strict local minimizer of '{problem.name}' at x={np.ravel(x).tolist()}")
    return min(mins, key=lambda p: (objective_value(problem, p, tol), tuple(p.y)))
