"""
Reproduction suite: every acceptance criterion as a named, timed check
"""
import logging
import time
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from continuation import (
    ACTIVATION, FOLD, SADDLE_DEGENERATION, SCSC_LOSS, active_set_history, count_minimizers_per_stratum,
    minimizers_by_stratum, quadratic_growth_estimate, resolve_on_branch, trace_branch,
)
from errors import RegdiagError, SingularSystem
from kkt_core import KKTPoint, enumerate_kkt_points, global_minimizer, local_minimizers
from perturbation_lab import (
    LICQ, PERSISTENCE_SCREENS, POINT_LIKE_CELLS, SCSC, SOSC, failure_set_estimate, non_prevalence_persistence,
    prevalence_experiment,
)
from problem_model import ParametricProblem, load_problem
from regularity import full_report, gradient_margin_scan
from sensitivity import hypergradient_complementarity, hypergradient_reduced, validate_against_fd
from settings import DEFAULT_TOLERANCES, Tolerances
from stratification import OBSTRUCTED, bracket_transition, rigidity_screen, strat_signature

logger = logging.getLogger(__name__)

FULL_TRIALS = 100
QUICK_TRIALS = 10
FULL_GRID_RES = 2001
QUICK_GRID_RES = 401
PREVALENCE_NU = 0.05
PERSISTENCE_NU = 0.01
GROWTH_DELTA = 0.05
AGREEMENT_SIGMA = 1e-3


@dataclass
class ReproConfig:
    quick: bool = False
    seed: int = 0
    tol: Tolerances = DEFAULT_TOLERANCES
    threads: Optional[int] = None

    @property
    def trials(self) -> int:
        return QUICK_TRIALS if self.quick else FULL_TRIALS

    @property
    def grid_res(self) -> int:
        return QUICK_GRID_RES if self.quick else FULL_GRID_RES

    @property
    def allowed_misses(self) -> int:
        """One miss per hundred trials, and at least one."""
        return max(1, self.trials // 100)


@dataclass
class CriterionResult:
    number: int
    title: str
    passed: bool
    detail: str
    seconds: float = 0.0

    def to_dict(self) -> Dict:
        return {"number": self.number, "title": self.title, "passed": self.passed,
                "detail": self.detail, "seconds": self.seconds}


@dataclass
class ReproReport:
    quick: bool
    results: List[CriterionResult] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return bool(self.results) and all(r.passed for r in self.results)

    def to_frame(self) -> pd.DataFrame:
        frame = pd.DataFrame([r.to_dict() for r in self.results],
                             columns=["number", "title", "passed", "detail", "seconds"])
        frame["status"] = np.where(frame["passed"], "PASS", "FAIL")
        return frame

    def to_dict(self) -> Dict:
        return {"quick": self.quick, "passed": self.passed, "criteria": [r.to_dict() for r in self.results]}


CRITERIA: List[Tuple[int, str, Callable]] = []


def criterion(number: int, title: str):
    """Register a check; it returns (passed, detail)."""
    def register(fn: Callable) -> Callable:
        CRITERIA.append((number, title, fn))
        return fn
    return register


# =============================================================================
# Helpers
# =============================================================================

def _minimizer_near(problem: ParametricProblem, x: float, target: Sequence[float],
                    tol: Tolerances) -> KKTPoint:
    mins = local_minimizers(problem, enumerate_kkt_points(problem, x, tol=tol), tol)
    if not mins:
        raise RegdiagError(f"No strict local minimizer of '{problem.name}' at x={x}")
    return min(mins, key=lambda p: float(np.linalg.norm(p.y - np.asarray(target, dtype=float))))


def _cell(estimate) -> float:
    return (estimate.x_hi - estimate.x_lo) / (estimate.grid_res - 1)


def _single_interval(estimate, lo: float, hi: float) -> Tuple[bool, str]:
    """The failing set is one interval matching [lo, hi] to one grid cell."""
    cell = _cell(estimate)
    if len(estimate.intervals) != 1:
        return False, f"{len(estimate.intervals)} failing interval(s): {estimate.intervals}"
    a, b = estimate.intervals[0]
    ok = abs(a - lo) <= cell + 1e-12 and abs(b - hi) <= cell + 1e-12
    return ok, f"failing interval [{a:.4f}, {b:.4f}]"


def _predicted_scsc_point(a: np.ndarray, b: np.ndarray) -> float:
    """Where the shifted bound meets the unconstrained minimizer phi(x) - b/2."""
    c = 0.5 * float(b[0]) - float(a[0])
    return float(np.cbrt(c)) if c < 0 else 1.0 + float(np.cbrt(c))


# =============================================================================
# Criteria
# =============================================================================

@criterion(1, "multipliers switch across the doubly active point")
def _multiplier_switch(cfg: ReproConfig) -> Tuple[bool, str]:
    problem = load_problem("ex_mult_disc", cfg.tol)
    worst = 0.0
    for x, expected in ((1.5, (1.0, 0.0)), (0.5, (0.0, 1.0))):
        points = enumerate_kkt_points(problem, x, tol=cfg.tol)
        if len(points) != 1:
            return False, f"{len(points)} KKT point(s) at x={x}"
        worst = max(worst, float(np.max(np.abs(points[0].lam - np.array(expected)))))
    return worst <= 1e-8, f"max multiplier error {worst:.2e}"


@criterion(2, "complementarity determinant vanishes at the degenerate parameter")
def _determinant_vanishes(cfg: ReproConfig) -> Tuple[bool, str]:
    problem = load_problem("ex_mult_disc", cfg.tol)
    worst = 0.0
    for x in (0.5, 0.9, 1.1, 1.5):
        kkt = enumerate_kkt_points(problem, x, tol=cfg.tol)[0]
        det = hypergradient_complementarity(problem, kkt, cfg.tol).det
        worst = max(worst, abs(abs(det) - abs(x - 1.0)))
    points = enumerate_kkt_points(problem, 1.0, tol=cfg.tol)
    if not points:
        return False, "no KKT point at x=1"
    singular = 0
    for kkt in points:
        for solve in (hypergradient_reduced, hypergradient_complementarity):
            try:
                solve(problem, kkt, tol=cfg.tol)
            except SingularSystem:
                singular += 1
    ok = worst <= 1e-8 and singular == 2 * len(points)
    return ok, f"max |det| error {worst:.2e}; {singular}/{2 * len(points)} singular solves at x=1"


@criterion(3, "kinked minimizer branch and strict complementarity loss")
def _kinked_branch(cfg: ReproConfig) -> Tuple[bool, str]:
    tol = cfg.tol
    problem = load_problem("ex_scsc_kink", tol)
    branch = trace_branch(problem, -1.0, 1.0, global_minimizer(problem, -1.0, tol), tol=tol)
    grid_err = max(abs(float(resolve_on_branch(problem, branch, x, tol).y[0]) - min(0.0, x))
                   for x in np.linspace(-1.0, 1.0, 101))
    losses = [e for e in branch.events if e.kind == SCSC_LOSS]
    located = len(losses) == 1 and abs(losses[0].x_star) <= 1e-6
    det_err = 0.0
    for x in (-0.5, -0.25, 0.25, 0.5):
        det = hypergradient_complementarity(problem, global_minimizer(problem, x, tol), tol).det
        det_err = max(det_err, abs(abs(det) - 2 * abs(x)))
    ok = grid_err <= 1e-8 and located and det_err <= 1e-8
    where = [e.x_star for e in losses]
    return ok, f"grid error {grid_err:.2e}; SCSC_LOSS at {where}; det error {det_err:.2e}"


@criterion(4, "corner stratification changes across the parameter")
def _corner_strata(cfg: ReproConfig) -> Tuple[bool, str]:
    tol = cfg.tol
    problem = load_problem("ce_licq_corner", tol)
    left, right = strat_signature(problem, -1.0, tol=tol), strat_signature(problem, 1.0, tol=tol)
    screen = rigidity_screen(problem, [-1.0, 1.0], tol=tol, threads=cfg.threads)
    scan = gradient_margin_scan(problem, 0.0, tol=tol)
    near = scan.witness_y is not None and float(np.linalg.norm(scan.witness_y)) <= 1e-3
    ok = (left.counts() == (4, 4, 1) and right.counts() == (5, 5, 1) and screen.verdict == OBSTRUCTED
          and scan.sigma_star < 1e-4 and near)
    return ok, (f"signatures {left.counts()} / {right.counts()}; {screen.verdict}; "
                f"sigma_star {scan.sigma_star:.2e} at {scan.witness_y}")


@criterion(5, "tangency transition bracketed by the vertex count")
def _tangency(cfg: ReproConfig) -> Tuple[bool, str]:
    tol = cfg.tol
    problem = load_problem("ce_licq_tangent", tol)
    low, high = strat_signature(problem, 1.0, tol=tol), strat_signature(problem, 2.0, tol=tol)
    a, b, _, _ = bracket_transition(problem, 1.2, 2.0, tol=tol)
    mid = 0.5 * (a + b)
    ok = low.counts() == (0, 1, 1) and high.counts() == (4, 4, 1) and abs(mid - np.sqrt(2.0)) <= 1e-4
    return ok, f"signatures {low.counts()} / {high.counts()}; transition at {mid:.7f}"


@criterion(6, "minimizer branch activates the disk constraint once")
def _disk_activation(cfg: ReproConfig) -> Tuple[bool, str]:
    tol = cfg.tol
    problem = load_problem("ce_scsc_disk", tol)
    branch = trace_branch(problem, 0.0, 2.0, global_minimizer(problem, 0.0, tol), tol=tol)
    activations = [e for e in branch.events if e.kind == ACTIVATION]
    history = [J for _, J in active_set_history(branch)]
    ok = len(activations) == 1 and abs(activations[0].x_star - 1.0) <= 1e-6 and history == [(), (0,)]
    return ok, f"ACTIVATION at {[e.x_star for e in activations]}; working sets {history}"


@criterion(7, "minimizer count per stratum doubles")
def _count_doubles(cfg: ReproConfig) -> Tuple[bool, str]:
    tol = cfg.tol
    problem = load_problem("ce_sosc_count", tol)
    c0, c1 = count_minimizers_per_stratum(problem, 0.0, tol), count_minimizers_per_stratum(problem, 1.0, tol)
    mins = sorted(minimizers_by_stratum(problem, 1.0, tol).get((0,), []), key=lambda p: p.y[1])
    y_err = np.inf
    if len(mins) == 2:
        y_err = max(float(np.max(np.abs(p.y - t))) for p, t in zip(mins, ((0.0, -5.0), (0.0, 5.0))))
    lam_min = min(float(p.lam[0]) for x in (0.0, 0.5, 1.0) for p in enumerate_kkt_points(problem, x, tol=tol))
    ok = c0 == {(0,): 1} and c1 == {(0,): 2} and y_err <= 1e-6 and lam_min >= 2.0 - 1e-8
    return ok, f"counts {c0} / {c1}; minimizer error {y_err:.2e}; min multiplier {lam_min:.10f}"


@criterion(8, "saddle degeneration ends the lower branch")
def _saddle(cfg: ReproConfig) -> Tuple[bool, str]:
    tol = cfg.tol
    problem = load_problem("ex_scsc_saddle", tol)
    census = (sum(count_minimizers_per_stratum(problem, 0.5, tol).values()),
              sum(count_minimizers_per_stratum(problem, -0.5, tol).values()))
    lower = trace_branch(problem, 1.0, -1.0, _minimizer_near(problem, 1.0, (0.0, 0.0), tol), tol=tol)
    upper = trace_branch(problem, 1.0, -1.0, _minimizer_near(problem, 1.0, (0.0, 1.0), tol), tol=tol)
    drift = max(abs(s.report.sosc_modulus - 1.0) for s in upper.samples)
    ok = (census == (2, 1) and lower.termination == SADDLE_DEGENERATION
          and lower.termination_x is not None and abs(lower.termination_x) <= 1e-6 and drift <= 1e-8)
    return ok, (f"census {census}; lower branch {lower.termination} at {lower.termination_x}; "
                f"upper modulus drift {drift:.2e}")


@criterion(9, "fold with vanishing curvature and growth")
def _fold(cfg: ReproConfig) -> Tuple[bool, str]:
    tol = cfg.tol
    problem = load_problem("ex_sosc_fold", tol)
    branch = trace_branch(problem, 1.0, -1.0, _minimizer_near(problem, 1.0, (0.0, 1.0), tol), tol=tol)
    folded = (branch.termination == FOLD and branch.termination_x is not None
              and abs(branch.termination_x) <= 1e-6)
    mod_err = 0.0
    for x in (0.01, 0.25, 1.0):
        kkt = _minimizer_near(problem, x, (0.0, np.sqrt(x)), tol)
        mod_err = max(mod_err, abs(full_report(problem, kkt, tol).sosc_modulus - 2 * np.sqrt(x)))
    growth = []
    for x in np.logspace(0.0, -3.0, 4):
        kkt = _minimizer_near(problem, float(x), (0.0, np.sqrt(x)), tol)
        growth.append(quadratic_growth_estimate(problem, kkt, GROWTH_DELTA, seed=cfg.seed, tol=tol).c_hat)
    decreasing = all(b < a for a, b in zip(growth, growth[1:]))
    ok = folded and mod_err <= 1e-6 and decreasing and growth[-1] < 0.02
    return ok, (f"{branch.termination} at {branch.termination_x}; modulus error {mod_err:.2e}; "
                f"growth {[round(c, 4) for c in growth]}")


@criterion(10, "LICQ failure set shrinks to a point under perturbation")
def _licq_prevalence(cfg: ReproConfig) -> Tuple[bool, str]:
    problem = load_problem("ex_licq_prev", cfg.tol)
    base = failure_set_estimate(problem, LICQ, cfg.grid_res, tol=cfg.tol)
    report = prevalence_experiment(problem, LICQ, PREVALENCE_NU, cfg.trials, cfg.seed, cfg.grid_res,
                                   tol=cfg.tol, threads=cfg.threads)
    small = sum(1 for t in report.per_trial if len(t.estimate.failing_cells) <= POINT_LIKE_CELLS)
    ok = abs(base.fraction - 0.5) <= 0.01 and small >= cfg.trials - cfg.allowed_misses
    return ok, f"unperturbed fraction {base.fraction:.4f}; {small}/{cfg.trials} trials point-like"


@criterion(11, "strict complementarity fails at the predicted point")
def _scsc_prevalence(cfg: ReproConfig) -> Tuple[bool, str]:
    problem = load_problem("ex_scsc_prev", cfg.tol)
    base = failure_set_estimate(problem, SCSC, cfg.grid_res, tol=cfg.tol)
    base_ok, base_detail = _single_interval(base, 0.0, 1.0)
    report = prevalence_experiment(problem, SCSC, PREVALENCE_NU, cfg.trials, cfg.seed, cfg.grid_res,
                                   tol=cfg.tol, threads=cfg.threads)
    matched = 0
    for t in report.per_trial:
        est = t.estimate
        if est.empty or not est.point_like:
            continue
        xs = est.x_grid[est.failing_cells]
        if np.min(np.abs(xs - _predicted_scsc_point(t.draw.a, t.draw.b))) <= _cell(est) + 1e-12:
            matched += 1
    ok = base_ok and matched >= cfg.trials - cfg.allowed_misses
    return ok, f"{base_detail}; {matched}/{cfg.trials} trials at the predicted point"


@criterion(12, "SOSC failure set disappears under perturbation")
def _sosc_prevalence(cfg: ReproConfig) -> Tuple[bool, str]:
    problem = load_problem("ex_sosc_prev", cfg.tol)
    base = failure_set_estimate(problem, SOSC, cfg.grid_res, tol=cfg.tol)
    base_ok, base_detail = _single_interval(base, 0.0, 1.0)
    report = prevalence_experiment(problem, SOSC, PREVALENCE_NU, cfg.trials, cfg.seed, cfg.grid_res,
                                   tol=cfg.tol, threads=cfg.threads)
    empty = report.summary()["empty"]
    ok = base_ok and empty >= cfg.trials - cfg.allowed_misses
    return ok, f"{base_detail}; {empty}/{cfg.trials} trials empty"


# (corpus id, x_start, x_end, start y)
AGREEMENT_BRANCHES = (
    ("ex_scsc_kink", -1.0, 1.0, (-1.0,)),
    ("ex_mult_disc", 0.0, 2.0, (0.0,)),
    ("ce_scsc_disk", 0.0, 2.0, (0.0, 0.0)),
    ("ce_sosc_count", 1.0, 0.5, (0.0, 5.0)),
    ("ex_scsc_saddle", 1.0, -1.0, (0.0, 1.0)),
    ("ex_sosc_fold", 1.0, 0.25, (0.0, 1.0)),
)


@criterion(13, "reduced and complementarity hypergradients agree")
def _formula_agreement(cfg: ReproConfig) -> Tuple[bool, str]:
    tol = cfg.tol
    worst, fd_worst, compared, fd_checked = 0.0, 0.0, 0, 0
    for corpus_id, x0, x1, y0 in AGREEMENT_BRANCHES:
        problem = load_problem(corpus_id, tol)
        branch = trace_branch(problem, x0, x1, _minimizer_near(problem, x0, y0, tol), tol=tol)
        for sample in branch.samples:
            if not (sample.report.licq and sample.report.scsc):
                continue
            try:
                red = hypergradient_reduced(problem, sample.kkt, tol=tol)
                comp = hypergradient_complementarity(problem, sample.kkt, tol)
            except SingularSystem:
                continue
            if min(red.sigma_min, comp.sigma_min) <= AGREEMENT_SIGMA:
                continue
            worst = max(worst, float(np.max(np.abs(red.dy_dx - comp.dy_dx))))
            compared += 1
        fd = validate_against_fd(problem, branch, tol=tol)
        fd_worst, fd_checked = max(fd_worst, fd.max_error), fd_checked + fd.checked
    ok = compared > 0 and fd_checked > 0 and worst <= 1e-8 and fd_worst < 1e-5
    return ok, (f"{compared} sample(s) compared, max gap {worst:.2e}; "
                f"{fd_checked} FD check(s), max error {fd_worst:.2e}")


@criterion(14, "counterexample obstructions persist under perturbation")
def _persistence(cfg: ReproConfig) -> Tuple[bool, str]:
    parts, ok = [], True
    for corpus_id in PERSISTENCE_SCREENS:
        report = non_prevalence_persistence(corpus_id, PERSISTENCE_NU, cfg.trials, cfg.seed,
                                            tol=cfg.tol, threads=cfg.threads)
        ok = ok and report.obstructed == cfg.trials
        parts.append(f"{corpus_id} {report.obstructed}/{cfg.trials}")
    return ok, "; ".join(parts)


# =============================================================================
# Runner
# =============================================================================

def run_suite(cfg: Optional[ReproConfig] = None, only: Optional[Sequence[int]] = None) -> ReproReport:
    """
    Run the acceptance checks in order.

    A check that raises counts as a failure with the error as its detail.

    Args:
        cfg: Suite configuration (quick mode shrinks trials and grids)
        only: Optional criterion numbers to run

    Returns:
        ReproReport with one row per check
    """
    cfg = cfg or ReproConfig()
    report = ReproReport(quick=cfg.quick)
    for number, title, check in sorted(CRITERIA, key=lambda c: c[0]):
        if only and number not in only:
            continue
        started = time.perf_counter()
        try:
            passed, detail = check(cfg)
        except (RegdiagError, ValueError) as e:
            logger.exception(f"Criterion {number} raised")
            passed, detail = False, f"{type(e).__name__}: {e}"
        seconds = time.perf_counter() - started
        logger.info(f"[{'PASS' if passed else 'FAIL'}] {number}. {title} ({seconds:.1f}s): {detail}")
        report.results.append(CriterionResult(number, title, bool(passed), detail, seconds))
    return report
