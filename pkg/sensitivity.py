"""
Hypergradients from the reduced and complementarity KKT systems
"""
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy import linalg

from errors import RegdiagError, SingularSystem
from kkt_core import KKTPoint
from numerics import index_subsets, sigma_min
from problem_model import ParametricProblem, evaluate, evaluate_upper
from settings import DEFAULT_TOLERANCES, Tolerances

logger = logging.getLogger(__name__)

REDUCED = "REDUCED"
COMPLEMENTARITY = "COMPLEMENTARITY"

# samples closer than this many fd steps to an event are not differenced
FD_EVENT_GUARD = 10.0


@dataclass(frozen=True, eq=False)
class SensitivityResult:
    """Solution of a sensitivity system; rows of dlambda_dx off the solved set are zero."""
    dy_dx: np.ndarray
    dlambda_dx: np.ndarray
    method: str
    sigma_min: float
    det: float
    active: Tuple[int, ...] = ()

    def to_dict(self) -> Dict:
        return {
            "method": self.method,
            "active": list(self.active),
            "dy_dx": self.dy_dx.tolist(),
            "dlambda_dx": self.dlambda_dx.tolist(),
            "sigma_min": self.sigma_min,
            "det": self.det,
        }


# =============================================================================
# System assembly
# =============================================================================

def _pivoted_solve(M: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    """Column-pivoted QR solve of M z = rhs."""
    Q, R, P = linalg.qr(M, pivoting=True)
    z = linalg.solve_triangular(R, Q.T @ rhs)
    out = np.empty_like(z)
    out[P] = z
    return out


def reduced_matrices(problem: ParametricProblem, x, y, lam, J: Sequence[int],
                     tol: Tolerances = DEFAULT_TOLERANCES) -> Tuple[np.ndarray, np.ndarray]:
    """
    M+ = [[Hess_yy L, grad_y h_J^T], [grad_y h_J, 0]] and N+ = [Hess_xy L^T; grad_x h_J].

    Args:
        lam: Full multiplier vector of length k (zero off J)

    Returns:
        (M, N) of shapes (m+|J|, m+|J|) and (m+|J|, n)
    """
    J = list(J)
    lam = np.asarray(lam, dtype=float)
    rec = evaluate(problem, x, y, tol)
    m, q = problem.m, len(J)
    HL = rec.hess_yy_g + np.einsum("k,kab->ab", lam, rec.hess_yy_h)
    HxL = rec.hess_xy_g + np.einsum("k,kab->ab", lam, rec.hess_xy_h)
    A = rec.jac_y_h[J]
    M = np.zeros((m + q, m + q))
    M[:m, :m] = HL
    M[:m, m:] = A.T
    M[m:, :m] = A
    N = np.vstack([HxL.T, rec.jac_x_h[J]])
    return M, N


def complementarity_matrices(problem: ParametricProblem, x, y, lam,
                             tol: Tolerances = DEFAULT_TOLERANCES) -> Tuple[np.ndarray, np.ndarray]:
    """
    Jacobians of G(v) = (grad_y g + sum lam_i grad_y h_i; lam_i h_i) in v = (y, lam) and in x.

    Returns:
        (grad_v G, grad_x G) of shapes (m+k, m+k) and (m+k, n)
    """
    lam = np.asarray(lam, dtype=float)
    rec = evaluate(problem, x, y, tol)
    m, k = problem.m, problem.k
    HL = rec.hess_yy_g + np.einsum("k,kab->ab", lam, rec.hess_yy_h)
    HxL = rec.hess_xy_g + np.einsum("k,kab->ab", lam, rec.hess_xy_h)
    Gv = np.zeros((m + k, m + k))
    Gv[:m, :m] = HL
    Gv[:m, m:] = rec.jac_y_h.T
    Gv[m:, :m] = lam[:, None] * rec.jac_y_h
    Gv[m:, m:] = np.diag(rec.h)
    Gx = np.vstack([HxL.T, lam[:, None] * rec.jac_x_h])
    return Gv, Gx


# =============================================================================
# Hypergradients
# =============================================================================

def hypergradient_reduced(problem: ParametricProblem, kkt: KKTPoint, J: Optional[Sequence[int]] = None,
                          tol: Tolerances = DEFAULT_TOLERANCES) -> SensitivityResult:
    """
    Solve M+ [dy; dlam_J] = -N+ over an active set.

    Args:
        problem: The problem
        kkt: Validated KKT point
        J: Active set to differentiate (defaults to the point's active set)
        tol: Tolerances

    Raises:
        SingularSystem: sigma_min(M+) <= sing_tol
    """
    J = tuple(sorted(kkt.active if J is None else (int(i) for i in J)))
    M, N = reduced_matrices(problem, kkt.x, kkt.y, kkt.lam, J, tol)
    smin = sigma_min(M)
    if smin <= tol.sing_tol:
        raise SingularSystem(smin, REDUCED)
    sol = _pivoted_solve(M, -N)
    m = problem.m
    dlam = np.zeros((problem.k, problem.n))
    dlam[list(J)] = sol[m:]
    return SensitivityResult(dy_dx=sol[:m], dlambda_dx=dlam, method=REDUCED,
                             sigma_min=smin, det=float(np.linalg.det(M)), active=J)


def hypergradient_complementarity(problem: ParametricProblem, kkt: KKTPoint,
                                  tol: Tolerances = DEFAULT_TOLERANCES) -> SensitivityResult:
    """
    Solve grad_v G dv = -grad_x G on the full complementarity system.

    Raises:
        SingularSystem: sigma_min(grad_v G) <= sing_tol
    """
    Gv, Gx = complementarity_matrices(problem, kkt.x, kkt.y, kkt.lam, tol)
    smin = sigma_min(Gv)
    if smin <= tol.sing_tol:
        raise SingularSystem(smin, COMPLEMENTARITY)
    sol = _pivoted_solve(Gv, -Gx)
    m = problem.m
    return SensitivityResult(dy_dx=sol[:m], dlambda_dx=sol[m:], method=COMPLEMENTARITY,
                             sigma_min=smin, det=float(np.linalg.det(Gv)), active=kkt.active)


def hypergradient_candidates(problem: ParametricProblem, kkt: KKTPoint,
                             tol: Tolerances = DEFAULT_TOLERANCES) -> List[Dict]:
    """
    Reduced hypergradients for every admissible active set at a degenerate point.

    Active constraints with multiplier <= reg_tol may be kept or dropped; each
    choice (of size <= m) is solved. Singular choices are reported, not raised.
    """
    plus = [i for i in kkt.active if kkt.lam[i] > tol.reg_tol]
    zero = [i for i in kkt.active if kkt.lam[i] <= tol.reg_tol]
    out = []
    for S in index_subsets(zero):
        J = tuple(sorted(plus + list(S)))
        if len(J) > problem.m:
            continue
        try:
            result = hypergradient_reduced(problem, kkt, J, tol)
            out.append({"active": list(J), "result": result, "error": None})
        except SingularSystem as e:
            out.append({"active": list(J), "result": None, "error": str(e)})
    return out


def total_hypergradient(problem: ParametricProblem, kkt: KKTPoint, result: SensitivityResult,
                        tol: Tolerances = DEFAULT_TOLERANCES) -> np.ndarray:
    """grad_x f + (dy/dx)^T grad_y f for the declared upper-level objective."""
    _, fx, fy = evaluate_upper(problem, kkt.x, kkt.y, tol)
    return fx + result.dy_dx.T @ fy


# =============================================================================
# Along branches
# =============================================================================

@dataclass
class ConditioningProfile:
    rows: List[Dict] = field(default_factory=list)

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.rows, columns=["x", "sigma_min_reduced", "sigma_min_comp", "det_comp", "flags"])

    def to_dict(self) -> Dict:
        return {"rows": self.rows}


def conditioning_profile(problem: ParametricProblem, branch,
                         tol: Tolerances = DEFAULT_TOLERANCES) -> ConditioningProfile:
    """
    sigma_min of M+ and grad_v G, and det(grad_v G), at every branch sample.

    Values at or below sing_tol are recorded as 0 and flagged.
    """
    profile = ConditioningProfile()
    for sample in branch.samples:
        kkt = sample.kkt
        M, _ = reduced_matrices(problem, kkt.x, kkt.y, kkt.lam, kkt.active, tol)
        Gv, _ = complementarity_matrices(problem, kkt.x, kkt.y, kkt.lam, tol)
        s_red, s_comp = sigma_min(M), sigma_min(Gv)
        flags = []
        if s_red <= tol.sing_tol:
            flags.append("REDUCED_SINGULAR")
            s_red = 0.0
        if s_comp <= tol.sing_tol:
            flags.append("COMP_SINGULAR")
            s_comp = 0.0
        profile.rows.append({
            "x": float(kkt.x[0]) if problem.n == 1 else kkt.x.tolist(),
            "sigma_min_reduced": s_red,
            "sigma_min_comp": s_comp,
            "det_comp": float(np.linalg.det(Gv)),
            "flags": "|".join(flags),
        })
    return profile


@dataclass
class FDValidation:
    max_error: float
    checked: int
    errors: List[Tuple[float, float]] = field(default_factory=list)

    def to_dict(self) -> Dict:
        return {"max_error": self.max_error, "checked": self.checked,
                "errors": [list(e) for e in self.errors]}


def validate_against_fd(problem: ParametricProblem, branch, fd_step: float = 1e-5,
                        tol: Tolerances = DEFAULT_TOLERANCES) -> FDValidation:
    """
    Compare reduced-formula tangents with central differences of the resolved branch.

    Samples within 10 fd steps of an event, too close to the branch ends, or
    with a singular reduced system are skipped.
    """
    from continuation import resolve_on_branch

    if fd_step <= 0:
        raise ValueError("fd_step must be positive")
    xs = [float(s.x[0]) for s in branch.samples]
    lo, hi = min(xs), max(xs)
    event_xs = [e.x_star for e in branch.events]
    out = FDValidation(max_error=0.0, checked=0)
    for sample in branch.samples:
        x = float(sample.x[0])
        if x - fd_step < lo or x + fd_step > hi:
            continue
        if any(abs(x - xe) <= FD_EVENT_GUARD * fd_step for xe in event_xs):
            continue
        try:
            tangent = hypergradient_reduced(problem, sample.kkt, sample.working_set, tol).dy_dx[:, 0]
            plus = resolve_on_branch(problem, branch, x + fd_step, tol).y
            minus = resolve_on_branch(problem, branch, x - fd_step, tol).y
        except RegdiagError as e:
            logger.debug(f"Skipping FD check at x={x}: {e}")
            continue
        err = float(np.max(np.abs(tangent - (plus - minus) / (2 * fd_step))))
        out.errors.append((x, err))
        out.checked += 1
        out.max_error = max(out.max_error, err)
    return out
