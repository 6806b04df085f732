"""
Random perturbations and failure-set estimation for regularity conditions

Perturbed problems shift every constraint by a constant a_i and add a linear
term <y, b> to the objective, with a and b drawn uniformly from [0, nu].
"""
import functools
import logging
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Tuple

import numpy as np
import pandas as pd

from continuation import branch_migration_screen, minimizer_count_screen
from errors import EmptyBandError
from kkt_core import NOT_LOCAL_MIN, classify_kkt, enumerate_kkt_grid
from numerics import gauss_newton, index_subsets
from problem_model import ParametricProblem, evaluate_batch, load_problem, y_grid
from regularity import check_scsc, check_sosc, gradient_margin_scan, kkt_matrix_sigma_min
from settings import DEFAULT_TOLERANCES, Tolerances, map_ordered
from stratification import rigidity_screen

logger = logging.getLogger(__name__)

LICQ = "LICQ"
SCSC = "SCSC"
SOSC = "SOSC"
KKT_MATRIX = "KKT_MATRIX"
CONDITIONS = (LICQ, SCSC, SOSC, KKT_MATRIX)

DEFAULT_NU = 0.05
DEFAULT_GRID_RES = 2001
FAILURE_SEEDS_PER_AXIS = 5
LICQ_SEEDS_PER_AXIS = 5
LICQ_BAND_GRID = 41
VERTEX_RESIDUAL_TOL = 1e-10
CROSSING_FACTOR = 0.25
POINT_LIKE_CELLS = 2

# Screens that certify every-x failures of the counterexamples
PERSISTENCE_SCREENS = {
    "ce_licq_corner": "rigidity",
    "ce_scsc_disk": "branch_migration",
    "ce_sosc_count": "minimizer_count",
}


# =============================================================================
# Draws
# =============================================================================

@dataclass(frozen=True, eq=False)
class PerturbationDraw:
    a: np.ndarray
    b: np.ndarray
    nu: float
    seed: int

    def to_dict(self) -> Dict:
        return {"a": self.a.tolist(), "b": self.b.tolist(), "nu": self.nu, "seed": self.seed}


def draw_perturbation(nu: float, seed: int, k: int, m: int) -> PerturbationDraw:
    """
    Uniform a in [0, nu]^k, then b in [0, nu]^m, from Philox(seed).

    Raises:
        ValueError: nu <= 0
    """
    if nu <= 0:
        raise ValueError("nu must be positive")
    rng = np.random.Generator(np.random.Philox(int(seed)))
    a = rng.uniform(0.0, nu, size=k)
    b = rng.uniform(0.0, nu, size=m)
    return PerturbationDraw(a=a, b=b, nu=float(nu), seed=int(seed))


def apply_perturbation(problem: ParametricProblem, draw: PerturbationDraw) -> ParametricProblem:
    """g + <y, b> and h_i + a_i; derivatives follow exactly since the shifts are constant and linear."""
    if len(draw.a) != problem.k or len(draw.b) != problem.m:
        raise ValueError(f"draw sizes ({len(draw.a)}, {len(draw.b)}) do not match k={problem.k}, m={problem.m}")
    a = draw.a if problem.a_shift is None else problem.a_shift + draw.a
    b = draw.b if problem.b_shift is None else problem.b_shift + draw.b
    return replace(problem, a_shift=np.array(a, dtype=float), b_shift=np.array(b, dtype=float),
                   name=f"{problem.name}~{draw.seed}")


# =============================================================================
# Node margins
# =============================================================================

def licq_node_margins(problem: ParametricProblem, X: np.ndarray, band_scan: bool = True,
                      tol: Tolerances = DEFAULT_TOLERANCES) -> np.ndarray:
    """
    Per-node LICQ margin.

    The minimum of: Gauss-Newton residuals ||h_S|| over (m+1)-subsets at
    points the other constraints admit, sigma_min of the active gradients at
    feasible roots of m-subsets, and (optionally) the activity-band scan
    restricted to m-subsets.
    """
    m, k = problem.m, problem.k
    seeds = y_grid(problem.y_box, LICQ_SEEDS_PER_AXIS)
    N, s = len(X), len(seeds)
    Xr = np.repeat(X, s, axis=0)
    Yr = np.tile(seeds, (N, 1))
    owner = np.repeat(np.arange(N), s)
    margin = np.full(N, np.inf)

    for S in index_subsets(range(k), max_size=m + 1):
        if len(S) < m:
            continue
        Y, res, sig = gauss_newton(problem, Xr, S, Yr, tol)
        h = evaluate_batch(problem, Xr, Y, order=0, tol=tol, check_domain=False, check_finite=False).h
        others = [i for i in range(k) if i not in S]
        slack = np.max(h[:, others], axis=1) if others else np.full(len(Y), -np.inf)
        if len(S) == m + 1:
            ok = np.isfinite(res) & (slack <= tol.act_tol + res)
            np.minimum.at(margin, owner[ok], res[ok])
        else:
            ok = (res <= VERTEX_RESIDUAL_TOL) & (slack <= tol.act_tol)
            np.minimum.at(margin, owner[ok], sig[ok])

    if band_scan:
        for j, x in enumerate(X):
            try:
                scan = gradient_margin_scan(problem, x, grid_res=LICQ_BAND_GRID, max_active=m, refine=False, tol=tol)
            except EmptyBandError:
                continue
            margin[j] = min(margin[j], scan.sigma_star)
    return margin


def kkt_node_margins(problem: ParametricProblem, X: np.ndarray, condition: str,
                     seeds_per_axis: int = FAILURE_SEEDS_PER_AXIS,
                     tol: Tolerances = DEFAULT_TOLERANCES) -> np.ndarray:
    """
    Per-node SCSC, SOSC or KKT_MATRIX margin from a batched KKT enumeration.

    SCSC and KKT_MATRIX take the minimum over all KKT points (0 when there are
    none); SOSC takes the minimum cone modulus over points not classified
    NOT_LOCAL_MIN (+inf when there are none).
    """
    out = np.empty(len(X))
    for j, points in enumerate(enumerate_kkt_grid(problem, X, seeds_per_axis, tol)):
        if condition == SCSC:
            values = [check_scsc(p, tol)[0] for p in points]
            out[j] = min(values) if values else 0.0
        elif condition == KKT_MATRIX:
            values = [kkt_matrix_sigma_min(problem, p, tol) for p in points]
            out[j] = min(values) if values else 0.0
        elif condition == SOSC:
            values = [check_sosc(problem, p, tol)[0] for p in points
                      if classify_kkt(problem, p, tol).label != NOT_LOCAL_MIN]
            out[j] = min(values) if values else np.inf
        else:
            raise ValueError(f"Unknown condition '{condition}'")
    return out


def crossing_nodes(margin: np.ndarray) -> np.ndarray:
    """
    Nodes where a sampled margin most likely crosses zero between grid points.

    At a local minimum i (strictly below i-1, not above i+1) the secant lines
    through (i-2, i-1) and (i+1, i+2) are intersected; i is flagged when the
    intersection value is at most 0.25 times the larger neighbour.
    """
    n = len(margin)
    flagged = np.zeros(n, dtype=bool)
    for i in range(2, n - 2):
        window = margin[i - 2:i + 3]
        if not np.all(np.isfinite(window)):
            continue
        l2, l1, c, r1, r2 = window
        if not (c < l1 and c <= r1):
            continue
        sl, sr = l1 - l2, r2 - r1
        if sr - sl == 0:
            continue
        # left line: l1 + sl * (u + 1); right line: r1 + sr * (u - 1); u = node offset
        u = (l1 + sl - r1 + sr) / (sr - sl)
        value = l1 + sl * (u + 1)
        if value <= CROSSING_FACTOR * max(l1, r1):
            flagged[i] = True
    return flagged


# =============================================================================
# Failure sets
# =============================================================================

@dataclass
class FailureSetEstimate:
    condition: str
    x_lo: float
    x_hi: float
    grid_res: int
    failing_cells: List[int] = field(default_factory=list)
    intervals: List[Tuple[float, float]] = field(default_factory=list)
    interval_cells: List[int] = field(default_factory=list)
    margins: Optional[np.ndarray] = None

    @property
    def fraction(self) -> float:
        return len(self.failing_cells) / self.grid_res

    @property
    def empty(self) -> bool:
        return not self.failing_cells

    @property
    def point_like(self) -> bool:
        """At most one merged interval of at most two cells."""
        return len(self.intervals) <= 1 and all(c <= POINT_LIKE_CELLS for c in self.interval_cells)

    @property
    def x_grid(self) -> np.ndarray:
        return np.linspace(self.x_lo, self.x_hi, self.grid_res)

    def to_frame(self) -> pd.DataFrame:
        failing = np.zeros(self.grid_res, dtype=bool)
        failing[self.failing_cells] = True
        margins = self.margins if self.margins is not None else np.full(self.grid_res, np.nan)
        return pd.DataFrame({"x": self.x_grid, "margin": margins, "failing": failing})

    def to_dict(self) -> Dict:
        return {
            "condition": self.condition,
            "x_grid": {"lo": self.x_lo, "hi": self.x_hi, "res": self.grid_res},
            "failing_cells": list(self.failing_cells),
            "fraction": self.fraction,
            "intervals": [list(iv) for iv in self.intervals],
            "interval_cells": list(self.interval_cells),
        }


def _merge(failing: np.ndarray, xs: np.ndarray) -> Tuple[List[Tuple[float, float]], List[int]]:
    intervals, cells = [], []
    idx = np.flatnonzero(failing)
    if not idx.size:
        return intervals, cells
    runs = np.split(idx, np.flatnonzero(np.diff(idx) > 1) + 1)
    for run in runs:
        intervals.append((float(xs[run[0]]), float(xs[run[-1]])))
        cells.append(len(run))
    return intervals, cells


def failure_set_estimate(problem: ParametricProblem, condition: str, x_grid_res: int = DEFAULT_GRID_RES,
                         seeds_per_axis: int = FAILURE_SEEDS_PER_AXIS, band_scan: bool = True,
                         tol: Tolerances = DEFAULT_TOLERANCES) -> FailureSetEstimate:
    """
    Grid estimate of the x set where a regularity condition fails.

    A node fails when its margin is <= failure_tol (sosc_failure_tol for SOSC).
    For LICQ, SCSC and KKT_MATRIX a node also fails when the crossing test
    places a zero of the margin next to it, so failures between nodes are
    not missed.

    Args:
        problem: Problem with n = 1
        condition: LICQ, SCSC, SOSC or KKT_MATRIX
        x_grid_res: Number of grid nodes over the x box
        seeds_per_axis: Seeds for the KKT enumeration
        band_scan: Include the activity-band scan in the LICQ margin
        tol: Tolerances

    Returns:
        FailureSetEstimate with merged intervals
    """
    if problem.n != 1:
        raise ValueError("failure_set_estimate needs n = 1")
    if condition not in CONDITIONS:
        raise ValueError(f"Unknown condition '{condition}'. Known: {', '.join(CONDITIONS)}")
    if x_grid_res < 5:
        raise ValueError("x_grid_res must be at least 5")
    xs = np.linspace(problem.x_lo[0], problem.x_hi[0], x_grid_res)
    X = xs[:, None]

    if condition == LICQ:
        margins = licq_node_margins(problem, X, band_scan, tol)
    else:
        margins = kkt_node_margins(problem, X, condition, seeds_per_axis, tol)

    threshold = tol.sosc_failure_tol if condition == SOSC else tol.failure_tol
    failing = margins <= threshold
    if condition != SOSC:
        failing |= crossing_nodes(margins)
    intervals, cells = _merge(failing, xs)
    estimate = FailureSetEstimate(condition=condition, x_lo=float(xs[0]), x_hi=float(xs[-1]),
                                  grid_res=x_grid_res, failing_cells=np.flatnonzero(failing).tolist(),
                                  intervals=intervals, interval_cells=cells, margins=margins)
    logger.info(f"{condition} failure set of '{problem.name}': fraction {estimate.fraction:.4f}, "
                f"{len(intervals)} interval(s)")
    return estimate


# =============================================================================
# Experiments
# =============================================================================

@dataclass
class TrialResult:
    draw: PerturbationDraw
    estimate: FailureSetEstimate

    def to_dict(self) -> Dict:
        return {
            "seed": self.draw.seed,
            "a": self.draw.a.tolist(),
            "b": self.draw.b.tolist(),
            "fraction": self.estimate.fraction,
            "intervals": [list(iv) for iv in self.estimate.intervals],
            "interval_cells": list(self.estimate.interval_cells),
        }


@dataclass
class ExperimentReport:
    condition: str
    nu: float
    trials: int
    seed: int
    per_trial: List[TrialResult] = field(default_factory=list)

    def summary(self) -> Dict:
        fractions = np.array([t.estimate.fraction for t in self.per_trial])
        return {
            "median_fraction": float(np.median(fractions)) if fractions.size else 0.0,
            "max_fraction": float(np.max(fractions)) if fractions.size else 0.0,
            "empty": sum(1 for t in self.per_trial if t.estimate.empty),
            "point_like": sum(1 for t in self.per_trial if t.estimate.point_like),
            "wider_than_point": sum(1 for t in self.per_trial
                                    if any(c > POINT_LIKE_CELLS for c in t.estimate.interval_cells)),
        }

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame([{"seed": t.draw.seed, "fraction": t.estimate.fraction,
                              "intervals": len(t.estimate.intervals)} for t in self.per_trial])

    def to_dict(self) -> Dict:
        return {
            "condition": self.condition,
            "nu": self.nu,
            "trials": self.trials,
            "seed": self.seed,
            "per_trial": [t.to_dict() for t in self.per_trial],
            "summary": self.summary(),
        }


def _check_nu(problem: ParametricProblem, nu: float) -> None:
    if nu <= 0:
        raise ValueError("nu must be positive")
    if problem.slater_margin is not None and nu >= problem.slater_margin:
        raise ValueError(f"nu={nu} must stay below the Slater margin {problem.slater_margin}")


def _trial(problem: ParametricProblem, condition: str, nu: float, x_grid_res: int, seeds_per_axis: int,
           tol: Tolerances, trial_seed: int) -> TrialResult:
    draw = draw_perturbation(nu, trial_seed, problem.k, problem.m)
    estimate = failure_set_estimate(apply_perturbation(problem, draw), condition, x_grid_res,
                                    seeds_per_axis, tol=tol)
    estimate.margins = None
    return TrialResult(draw=draw, estimate=estimate)


def prevalence_experiment(problem: ParametricProblem, condition: str, nu: float = DEFAULT_NU,
                          trials: int = 100, seed: int = 0, x_grid_res: int = DEFAULT_GRID_RES,
                          seeds_per_axis: int = FAILURE_SEEDS_PER_AXIS,
                          tol: Tolerances = DEFAULT_TOLERANCES,
                          threads: Optional[int] = None) -> ExperimentReport:
    """
    Failure-set estimates over random perturbations; trial j uses seed + j.

    Trials run in worker processes when allowed; results are reduced in seed
    order, so the report does not depend on scheduling.
    """
    if trials < 1:
        raise ValueError("trials must be at least 1")
    _check_nu(problem, nu)
    task = functools.partial(_trial, problem, condition, nu, x_grid_res, seeds_per_axis, tol)
    logger.info(f"Prevalence experiment: {condition} on '{problem.name}', nu={nu}, {trials} trial(s), seed={seed}")
    results = map_ordered(task, [seed + j for j in range(trials)], threads)
    report = ExperimentReport(condition=condition, nu=float(nu), trials=trials, seed=seed, per_trial=results)
    logger.info(f"Summary: {report.summary()}")
    return report


@dataclass
class PersistenceReport:
    corpus_id: str
    screen: str
    nu: float
    trials: int
    seed: int
    verdicts: List[str] = field(default_factory=list)

    @property
    def obstructed(self) -> int:
        return sum(1 for v in self.verdicts if v == "OBSTRUCTED")

    def to_dict(self) -> Dict:
        return {"corpus_id": self.corpus_id, "screen": self.screen, "nu": self.nu, "trials": self.trials,
                "seed": self.seed, "obstructed": self.obstructed, "verdicts": self.verdicts}


def _persistence_trial(problem: ParametricProblem, screen: str, nu: float, tol: Tolerances,
                       trial_seed: int) -> str:
    draw = draw_perturbation(nu, trial_seed, problem.k, problem.m)
    perturbed = apply_perturbation(problem, draw)
    ends = [float(problem.x_lo[0]), float(problem.x_hi[0])]
    if screen == "rigidity":
        result = rigidity_screen(perturbed, ends, grid_res=201, tol=tol, threads=1)
    elif screen == "minimizer_count":
        result = minimizer_count_screen(perturbed, ends, tol=tol, threads=1)
    else:
        result = branch_migration_screen(perturbed, ends[0], ends[1], tol=tol)
    return result.verdict


def non_prevalence_persistence(corpus_id: str, nu: float = 0.01, trials: int = 100, seed: int = 0,
                               tol: Tolerances = DEFAULT_TOLERANCES,
                               threads: Optional[int] = None) -> PersistenceReport:
    """
    Re-run a counterexample's obstruction screen under random perturbations.

    The constant-plus-linear family cannot repair these failures, so every
    trial is expected to stay OBSTRUCTED.
    """
    if corpus_id not in PERSISTENCE_SCREENS:
        raise ValueError(f"No persistence screen for '{corpus_id}'. Known: {', '.join(PERSISTENCE_SCREENS)}")
    problem = load_problem(corpus_id, tol)
    _check_nu(problem, nu)
    screen = PERSISTENCE_SCREENS[corpus_id]
    task = functools.partial(_persistence_trial, problem, screen, nu, tol)
    verdicts = map_ordered(task, [seed + j for j in range(trials)], threads)
    report = PersistenceReport(corpus_id=corpus_id, screen=screen, nu=float(nu), trials=trials,
                               seed=seed, verdicts=verdicts)
    logger.info(f"{corpus_id}: {report.obstructed}/{trials} trial(s) OBSTRUCTED under nu={nu}")
    return report
