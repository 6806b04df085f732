"""
Regularity margins and verdicts at lower-level points and KKT points
"""
import logging
from dataclasses import dataclass
from itertools import combinations
from typing import Dict, Optional, Tuple

import numpy as np

from errors import EmptyBandError, InfeasibleError
from kkt_core import KKTPoint, lagrangian_hessian_at, sosc_modulus
from numerics import gauss_newton, row_sigma_min, sigma_min
from problem_model import ParametricProblem, clamp_x, evaluate, evaluate_batch, feasible_box, y_grid
from settings import DEFAULT_TOLERANCES, Tolerances

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class RegularityReport:
    """Margins at one KKT point; each verdict is margin > reg_tol."""
    licq_margin: float
    scsc_margin: float
    sosc_modulus: float
    kkt_sigma_min: float
    licq: bool
    scsc: bool
    sosc: bool
    active: Tuple[int, ...] = ()

    @property
    def all_hold(self) -> bool:
        return self.licq and self.scsc and self.sosc

    def to_dict(self) -> Dict:
        return {
            "licq_margin": self.licq_margin,
            "scsc_margin": self.scsc_margin,
            "sosc_modulus": self.sosc_modulus,
            "kkt_sigma_min": self.kkt_sigma_min,
            "verdicts": {"licq": self.licq, "scsc": self.scsc, "sosc": self.sosc},
            "active": list(self.active),
        }


# =============================================================================
# Pointwise checks
# =============================================================================

def check_licq(problem: ParametricProblem, x, y,
               tol: Tolerances = DEFAULT_TOLERANCES) -> Tuple[float, bool]:
    """
    Smallest singular value of the stacked active constraint gradients.

    Args:
        problem: The problem
        x: Parameter
        y: Feasible lower-level point

    Returns:
        (margin, verdict); margin is +inf for an empty active set and 0 when
        more than m constraints are active

    Raises:
        InfeasibleError: Some h_i exceeds act_tol at y
    """
    rec = evaluate(problem, x, y, tol)
    if problem.k and np.max(rec.h) > tol.act_tol:
        worst = int(np.argmax(rec.h))
        raise InfeasibleError(f"y={np.ravel(y).tolist()} violates h[{worst}] by {rec.h[worst]:.3e}")
    J = np.flatnonzero(np.abs(rec.h) <= tol.act_tol)
    if len(J) == 0:
        return np.inf, True
    if len(J) > problem.m:
        return 0.0, False
    margin = float(row_sigma_min(rec.jac_y_h[J][None, :, :])[0])
    return margin, margin > tol.reg_tol


def check_scsc(kkt: KKTPoint, tol: Tolerances = DEFAULT_TOLERANCES) -> Tuple[float, bool]:
    """min(active multipliers, inactive slacks -h_i); +inf when there are no constraints."""
    k = len(kkt.lam)
    active = list(kkt.active)
    inactive = [i for i in range(k) if i not in kkt.active]
    parts = [kkt.lam[active], -kkt.h[inactive]]
    margin = float(np.min(np.concatenate(parts), initial=np.inf))
    return margin, margin > tol.reg_tol


def check_sosc(problem: ParametricProblem, kkt: KKTPoint,
               tol: Tolerances = DEFAULT_TOLERANCES) -> Tuple[float, bool]:
    """
    Curvature of the Lagrangian on the critical cone.

    With every active multiplier above reg_tol this is the smallest eigenvalue
    of the null-space-reduced Hessian; otherwise every face of the polyhedral
    cone is searched and face minimizers are checked against the remaining
    inequality rows.
    """
    modulus, _ = sosc_modulus(problem, kkt, tol)
    return float(modulus), modulus > tol.reg_tol


def kkt_matrix(problem: ParametricProblem, kkt: KKTPoint,
               tol: Tolerances = DEFAULT_TOLERANCES) -> np.ndarray:
    """Bordered matrix [[Hess_yy L, grad h_J^T], [grad h_J, 0]] over the active set."""
    HL, A = lagrangian_hessian_at(problem, kkt, tol)
    AJ = A[list(kkt.active)]
    m, q = problem.m, len(kkt.active)
    K = np.zeros((m + q, m + q))
    K[:m, :m] = HL
    K[:m, m:] = AJ.T
    K[m:, :m] = AJ
    return K


def kkt_matrix_sigma_min(problem: ParametricProblem, kkt: KKTPoint,
                         tol: Tolerances = DEFAULT_TOLERANCES) -> float:
    return sigma_min(kkt_matrix(problem, kkt, tol))


def full_report(problem: ParametricProblem, kkt: KKTPoint,
                tol: Tolerances = DEFAULT_TOLERANCES) -> RegularityReport:
    licq_margin, licq = check_licq(problem, kkt.x, kkt.y, tol)
    scsc_margin, scsc = check_scsc(kkt, tol)
    modulus, sosc = check_sosc(problem, kkt, tol)
    return RegularityReport(
        licq_margin=licq_margin, scsc_margin=scsc_margin, sosc_modulus=modulus,
        kkt_sigma_min=kkt_matrix_sigma_min(problem, kkt, tol),
        licq=licq, scsc=scsc, sosc=sosc, active=kkt.active,
    )


# =============================================================================
# Near-activity gradient scan
# =============================================================================

@dataclass(frozen=True)
class GradientMarginScan:
    rho: float
    sigma_star: float
    witness_y: Optional[Tuple[float, ...]]
    witness_active: Tuple[int, ...]
    band_points: int
    refined: bool = False

    def to_dict(self) -> Dict:
        return {
            "rho": self.rho,
            "sigma_star": self.sigma_star,
            "witness": {"y": list(self.witness_y) if self.witness_y is not None else None,
                        "J": list(self.witness_active)},
            "band_points": self.band_points,
            "refined": self.refined,
        }


def _pattern_sigma(A: np.ndarray, J: Tuple[int, ...],
                   max_active: Optional[int]) -> Tuple[np.ndarray, np.ndarray]:
    """sigma_min per row for pattern J, scored by its q-subsets when |J| > q."""
    if max_active is None or len(J) <= max_active:
        return row_sigma_min(A[:, list(J), :]), np.zeros(len(A), dtype=int)
    subsets = list(combinations(J, max_active))
    scores = np.column_stack([row_sigma_min(A[:, list(S), :]) for S in subsets])
    return scores.min(axis=1), scores.argmin(axis=1)


def gradient_margin_scan(problem: ParametricProblem, x, rho: Optional[float] = None,
                         grid_res: int = 201, max_active: Optional[int] = None,
                         refine: bool = True,
                         tol: Tolerances = DEFAULT_TOLERANCES) -> GradientMarginScan:
    """
    Infimum of sigma_min(grad h_J) over grid points of the activity band.

    A grid point y with max_i h_i <= rho is in the band; its pattern is
    J = {i : |h_i| <= rho}. Ties in sigma are broken by the smallest
    max |h_J|, then lexicographically in y. The witness is refined by
    Gauss-Newton on its pattern and kept when it stays in the band.

    Args:
        problem: The problem
        x: Parameter
        rho: Band width (defaults to licq_scan_rho)
        grid_res: Grid points per y axis over the band's bounding box
        max_active: Score patterns larger than this by their subsets of this size
        refine: Polish the witness with Gauss-Newton
        tol: Tolerances

    Raises:
        EmptyBandError: No grid point lies in the band
    """
    rho = tol.licq_scan_rho if rho is None else float(rho)
    if rho <= 0:
        raise ValueError("rho must be positive")
    x = clamp_x(problem, np.asarray(x, dtype=float).reshape(1, problem.n), tol)[0]
    try:
        box = feasible_box(problem, x, level=rho)
    except InfeasibleError:
        raise EmptyBandError(f"No band point for '{problem.name}' at x={x.tolist()} (rho={rho})")

    Y = y_grid(box, grid_res)
    b = evaluate_batch(problem, x, Y, order=1, tol=tol)
    in_band = np.max(b.h, axis=1) <= rho if problem.k else np.ones(len(Y), dtype=bool)
    if not np.any(in_band):
        raise EmptyBandError(f"No band point for '{problem.name}' at x={x.tolist()} (rho={rho})")
    Y, H, A = Y[in_band], b.h[in_band], b.jac_y_h[in_band]
    N, k = H.shape

    near = np.abs(H) <= rho
    codes = near.astype(np.int64) @ (1 << np.arange(k, dtype=np.int64)) if k else np.zeros(N, dtype=np.int64)
    sigma = np.full(N, np.inf)
    resid = np.full(N, np.inf)
    for code in np.unique(codes):
        if code == 0:
            continue
        J = tuple(i for i in range(k) if (int(code) >> i) & 1)
        rows = codes == code
        sigma[rows], _ = _pattern_sigma(A[rows], J, max_active)
        resid[rows] = np.max(np.abs(H[rows][:, list(J)]), axis=1)

    if not np.any(np.isfinite(sigma)):
        return GradientMarginScan(rho=rho, sigma_star=np.inf, witness_y=None, witness_active=(),
                                  band_points=N)

    keys = [Y[:, j] for j in reversed(range(problem.m))] + [resid, sigma]
    w = int(np.lexsort(keys)[0])
    J = tuple(i for i in range(k) if near[w, i])
    _, choice = _pattern_sigma(A[w:w + 1], J, max_active)
    if max_active is not None and len(J) > max_active:
        J = list(combinations(J, max_active))[int(choice[0])]
    sigma_star, witness, refined = float(sigma[w]), Y[w], False

    if refine:
        Yr, res, sig = gauss_newton(problem, x, J, Y[w], tol)
        hr = evaluate_batch(problem, x, Yr, order=0, tol=tol, check_finite=False).h[0]
        if np.all(np.isfinite(hr)) and np.max(hr) <= rho and np.all(np.abs(hr[list(J)]) <= rho):
            if sig[0] <= sigma_star:
                sigma_star, witness, refined = float(sig[0]), Yr[0], True
    logger.debug(f"Gradient scan at x={x.tolist()}: sigma*={sigma_star:.3e}, J={list(J)}, y={witness.tolist()}")
    return GradientMarginScan(rho=rho, sigma_star=sigma_star, witness_y=tuple(witness.tolist()),
                              witness_active=tuple(J), band_points=N, refined=refined)
