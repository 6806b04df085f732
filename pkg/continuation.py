"""
Predictor-corrector tracing of lower-level minimizer branches
"""
import functools
import logging
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from errors import NoConverge, NoStart, Rejected, RegdiagError, SamplingError, SingularJacobian, StepUnderflow
from kkt_core import (
    NOT_LOCAL_MIN, STRICT_LOCAL_MIN, KKTPoint, _active_set, classify_kkt, enumerate_kkt_points,
    global_minimizer, kkt_residual, lagrangian_hessian_at, local_minimizers, objective_value, solve_reduced_kkt,
)
from numerics import CONVERGED, gauss_newton, index_subsets, newton_reduced, null_basis, reduced_inertia, row_sigma_min, sigma_min
from problem_model import ParametricProblem, evaluate, evaluate_batch
from regularity import RegularityReport, full_report
from sensitivity import reduced_matrices
from settings import DEFAULT_TOLERANCES, Tolerances, map_ordered
from stratification import CONSISTENT, OBSTRUCTED, ScreenResult, pattern_key

logger = logging.getLogger(__name__)

# Terminations
PATH_END = "PATH_END"
FOLD = "FOLD"
SADDLE_DEGENERATION = "SADDLE_DEGENERATION"
LICQ_DEGENERACY = "LICQ_DEGENERACY"
NO_CONVERGE = "NO_CONVERGE"

# Event kinds (FOLD and LICQ_DEGENERACY double as event kinds)
ACTIVATION = "ACTIVATION"
SCSC_LOSS = "SCSC_LOSS"
DOMAIN_BOUNDARY = "DOMAIN_BOUNDARY"

STEPS_PER_PATH = 200
MAX_STEP_FRACTION = 0.02
MIN_STEP = 1e-12
CLEAN_ITERATIONS = 4
CLEAN_SOLVES_TO_GROW = 3
MAX_STEPS = 20000

MIN_GROWTH_SAMPLES = 10


# =============================================================================
# Branch types
# =============================================================================

@dataclass(frozen=True, eq=False)
class BranchSample:
    """
    One accepted point of a branch.

    position is the path coordinate: x itself when n == 1, otherwise the
    segment parameter in [0, 1].
    """
    position: float
    kkt: KKTPoint
    report: RegularityReport
    working_set: Tuple[int, ...]
    inertia: int = 0

    @property
    def x(self) -> np.ndarray:
        return self.kkt.x

    def to_dict(self) -> Dict:
        return {
            "position": self.position,
            "kkt": self.kkt.to_dict(),
            "report": self.report.to_dict(),
            "working_set": list(self.working_set),
        }


@dataclass(frozen=True)
class Event:
    kind: str
    x_star: float
    bracket_width: float
    index: Optional[int] = None
    diagnostics: Dict = field(default_factory=dict)

    def to_dict(self) -> Dict:
        return {"kind": self.kind, "index": self.index, "x_star": self.x_star,
                "bracket_width": self.bracket_width, "diagnostics": self.diagnostics}


@dataclass
class TraceOptions:
    """Knobs for trace_branch; initial_step is a fraction of the path (default 1/200)."""
    allow_non_min: bool = False
    initial_step: Optional[float] = None
    max_steps: int = MAX_STEPS


@dataclass
class Branch:
    problem_name: str
    x_start: np.ndarray
    x_end: np.ndarray
    samples: List[BranchSample] = field(default_factory=list)
    events: List[Event] = field(default_factory=list)
    termination: str = PATH_END
    termination_x: Optional[float] = None

    @property
    def path(self) -> List[float]:
        return [s.position for s in self.samples]

    def point_at(self, position: float) -> np.ndarray:
        """x for a path coordinate."""
        if len(self.x_start) == 1:
            return np.array([float(position)])
        return self.x_start + float(position) * (self.x_end - self.x_start)

    def to_frame(self) -> pd.DataFrame:
        """One row per sample: x, y[*], lambda[*], J bitmask and the four margins."""
        rows = []
        for s in self.samples:
            row = {"x": s.position}
            row.update({f"y[{j}]": float(v) for j, v in enumerate(s.kkt.y)})
            row.update({f"lambda[{i}]": float(v) for i, v in enumerate(s.kkt.lam)})
            row["J"] = int(sum(1 << i for i in s.working_set))
            row.update({
                "licq_margin": s.report.licq_margin,
                "scsc_margin": s.report.scsc_margin,
                "sosc_modulus": s.report.sosc_modulus,
                "kkt_sigma_min": s.report.kkt_sigma_min,
            })
            rows.append(row)
        return pd.DataFrame(rows)

    def to_dict(self) -> Dict:
        return {
            "problem": self.problem_name,
            "x_start": self.x_start.tolist(),
            "x_end": self.x_end.tolist(),
            "termination": self.termination,
            "termination_x": self.termination_x,
            "events": [e.to_dict() for e in self.events],
            "active_set_history": [
                {"interval": list(interval), "J": list(J)} for interval, J in active_set_history(self)
            ],
            "samples": len(self.samples),
        }


# =============================================================================
# Tracer internals
# =============================================================================

@dataclass(eq=False)
class _State:
    """A converged reduced solution with everything the monitors and predictor need."""
    t: float
    y: np.ndarray
    lam_J: np.ndarray
    J: Tuple[int, ...]
    point: KKTPoint
    sigma_J: float
    sigma_K: float
    inertia: int
    dy: np.ndarray
    dlam: np.ndarray

    def monitors(self, reg_tol: float) -> Dict[Tuple[str, int], float]:
        """Monitor values; an event fires when one goes from >= 0 to < 0."""
        values = {(SCSC_LOSS, i): float(self.lam_J[pos]) for pos, i in enumerate(self.J)}
        values.update({(ACTIVATION, i): float(-self.point.h[i])
                       for i in range(len(self.point.h)) if i not in self.J})
        if self.J:
            values[(LICQ_DEGENERACY, -1)] = self.sigma_J - reg_tol
        return values


class _Path:
    def __init__(self, x_start: np.ndarray, x_end: np.ndarray):
        self.x_start = x_start
        self.x_end = x_end
        self.delta = x_end - x_start
        self.length = float(np.linalg.norm(self.delta))

    def at(self, t: float) -> np.ndarray:
        return self.x_start + t * self.delta

    def coordinate(self, t: float) -> float:
        return float(self.at(t)[0]) if len(self.x_start) == 1 else float(t)


def _state_at(problem: ParametricProblem, path: _Path, t: float, y, lam_J, J: Tuple[int, ...],
              tol: Tolerances) -> _State:
    x = path.at(t)
    y = np.asarray(y, dtype=float)
    lam_J = np.asarray(lam_J, dtype=float)
    lam = np.zeros(problem.k)
    lam[list(J)] = lam_J
    clipped = np.maximum(lam, 0.0)
    rec = evaluate(problem, x, y, tol)
    point = KKTPoint(x=x, y=y.copy(), lam=clipped, h=rec.h.copy(), active=_active_set(rec.h, tol),
                     residual=kkt_residual(problem, x, y, clipped, tol))
    A = rec.jac_y_h[list(J)]
    HL = rec.hess_yy_g + np.einsum("k,kab->ab", lam, rec.hess_yy_h)
    M, N = reduced_matrices(problem, x, y, lam, J, tol)
    tangent = -np.linalg.pinv(M, rcond=1e-14) @ (N @ path.delta)
    m = problem.m
    return _State(
        t=t, y=y.copy(), lam_J=lam_J.copy(), J=J, point=point,
        sigma_J=float(row_sigma_min(A[None])[0]) if J else np.inf,
        sigma_K=sigma_min(M), inertia=reduced_inertia(HL, A),
        dy=tangent[:m], dlam=tangent[m:],
    )


def _correct(problem: ParametricProblem, path: _Path, base: _State, t: float,
             tol: Tolerances) -> Tuple[Optional[_State], int]:
    """Tangent predictor from base to t, then Newton on the reduced system."""
    dt = t - base.t
    y0 = base.y + dt * base.dy
    l0 = base.lam_J + dt * base.dlam
    res = newton_reduced(problem, path.at(t)[None, :], base.J, y0[None, :], l0[None, :], tol, polish=False)
    iterations = int(res.iterations[0])
    if int(res.status[0]) != CONVERGED:
        return None, iterations
    try:
        return _state_at(problem, path, t, res.y[0], res.lam[0], base.J, tol), iterations
    except RegdiagError as e:
        logger.debug(f"Corrected point at t={t} could not be evaluated: {e}")
        return None, iterations


def _same_branch(base: _State, new: Optional[_State], inertia: int, tol: Tolerances) -> bool:
    return (new is not None and new.inertia == inertia
            and float(np.linalg.norm(new.y - base.y)) <= tol.step_cap)


def _fired(prev: Dict, new: Dict) -> List[Tuple[str, int]]:
    return [key for key, value in new.items() if value < 0 and prev.get(key, -1.0) >= 0]


def _bisect(problem: ParametricProblem, path: _Path, lo: _State, hi: _State, key: Tuple[str, int],
            inertia: int, tol: Tolerances) -> Tuple[_State, _State, float, float]:
    """
    Shrink [lo.t, hi.t] around the sign change of one monitor until its x width is <= event_tol.

    Returns:
        (lo, hi, t_star, width) with t_star the secant zero inside the final bracket
    """
    t_hi = hi.t
    while (t_hi - lo.t) * path.length > tol.event_tol:
        t_mid = 0.5 * (lo.t + t_hi)
        mid, _ = _correct(problem, path, lo, t_mid, tol)
        if not _same_branch(lo, mid, inertia, tol):
            t_hi = t_mid
            continue
        if mid.monitors(tol.reg_tol).get(key, 0.0) < 0:
            hi, t_hi = mid, t_mid
        else:
            lo = mid
    va = lo.monitors(tol.reg_tol).get(key, 0.0)
    vb = hi.monitors(tol.reg_tol).get(key, 0.0) if hi.t == t_hi else None
    if vb is not None and va - vb > 0:
        t_star = lo.t + va / (va - vb) * (t_hi - lo.t)
    else:
        t_star = 0.5 * (lo.t + t_hi)
    return lo, hi, t_star, (t_hi - lo.t) * path.length


def _diagnostics(problem: ParametricProblem, state: _State, tol: Tolerances) -> Dict:
    try:
        out = full_report(problem, state.point, tol).to_dict()
    except RegdiagError as e:
        out = {"error": str(e)}
    out["sigma_K"] = state.sigma_K
    return out


def _sample(problem: ParametricProblem, path: _Path, state: _State, tol: Tolerances) -> BranchSample:
    return BranchSample(position=path.coordinate(state.t), kkt=state.point,
                        report=full_report(problem, state.point, tol), working_set=state.J,
                        inertia=state.inertia)


def _try_swap(problem: ParametricProblem, path: _Path, lo: _State, t_b: float, J_new: Tuple[int, ...],
              inertia: int, opts: TraceOptions, tol: Tolerances) -> Optional[_State]:
    """Re-solve with a new active set just past the event; None if it is not this branch's continuation."""
    x_b = path.at(t_b)
    try:
        kkt = solve_reduced_kkt(problem, x_b, J_new, lo.y, None, tol)
    except (NoConverge, SingularJacobian, Rejected) as e:
        logger.debug(f"Swap to J={list(J_new)} at x={x_b.tolist()} failed: {e}")
        return None
    if float(np.linalg.norm(kkt.y - lo.y)) > tol.step_cap:
        return None
    state = _state_at(problem, path, t_b, kkt.y, kkt.lam[list(J_new)], J_new, tol)
    if opts.allow_non_min:
        return state if state.inertia == inertia else None
    return state if classify_kkt(problem, kkt, tol).label == STRICT_LOCAL_MIN else None


def _swap_candidates(kind: str, index: int, lo: _State, m: int, tol: Tolerances,
                     A: np.ndarray) -> Tuple[List[Tuple[int, ...]], bool]:
    """
    Active sets to try after an event.

    Returns:
        (candidates, degenerate) where degenerate means adding the index would
        break LICQ (too many or dependent gradients)
    """
    J = lo.J
    if kind == SCSC_LOSS:
        return [tuple(i for i in J if i != index)], False
    if kind == LICQ_DEGENERACY:
        return [tuple(i for i in J if i != j) for j in J], True
    grown = tuple(sorted(J + (index,)))
    exchanges = [tuple(i for i in grown if i != j) for j in J]
    dependent = len(grown) > m or float(row_sigma_min(A[list(grown)][None])[0]) <= tol.reg_tol
    if dependent:
        return exchanges, True
    return [grown] + exchanges, False


# =============================================================================
# Tracing
# =============================================================================

def trace_branch(problem: ParametricProblem, x_start, x_end, start: KKTPoint,
                 opts: Optional[TraceOptions] = None,
                 tol: Tolerances = DEFAULT_TOLERANCES) -> Branch:
    """
    Follow a minimizer branch from x_start to x_end.

    The predictor is the reduced sensitivity tangent; the corrector is Newton
    on the reduced KKT system for the working set. A corrected point must keep
    the start point's reduced-Hessian inertia and stay within step_cap of the
    previous sample. Monitors are the working-set multipliers, the inactive
    slacks -h_i and sigma_min of the working gradients. When a monitor
    changes sign the step is bisected to event_tol in x and the working set
    is swapped (SCSC_LOSS drops, ACTIVATION adds or exchanges). A branch ends
    at the path end or when no swap continues it; corrector breakdown with
    a small sigma_min of the KKT matrix is a FOLD.

    Args:
        problem: The problem
        x_start: Path start (the start point's x)
        x_end: Path end; clipped to the domain with a DOMAIN_BOUNDARY event
        start: Starting KKT point
        opts: Trace options
        tol: Tolerances

    Returns:
        Branch with samples, events and termination

    Raises:
        NoStart: start is not a strict local minimizer (unless allow_non_min)
            or cannot be re-solved on its working set
        StepUnderflow: The step cap forced a step below 1e-12
    """
    opts = opts or TraceOptions()
    x_start = np.atleast_1d(np.asarray(x_start, dtype=float))
    requested_end = np.atleast_1d(np.asarray(x_end, dtype=float))
    x_end = np.clip(requested_end, problem.x_lo, problem.x_hi)
    if np.allclose(x_start, x_end):
        raise ValueError("x_start and x_end coincide")
    path = _Path(x_start, x_end)
    branch = Branch(problem_name=problem.name, x_start=x_start, x_end=x_end)

    if not opts.allow_non_min:
        label = classify_kkt(problem, start, tol).label
        if label != STRICT_LOCAL_MIN:
            raise NoStart(f"Start point y={start.y.tolist()} is {label}, not a strict local minimizer")
    J = tuple(i for i in start.active if start.lam[i] > tol.reg_tol)
    res = newton_reduced(problem, x_start[None, :], J, start.y[None, :], start.lam[list(J)][None, :], tol)
    if int(res.status[0]) != CONVERGED:
        raise NoStart(f"Start point does not solve the reduced system for J={list(J)}")
    state = _state_at(problem, path, 0.0, res.y[0], res.lam[0], J, tol)
    inertia = state.inertia
    branch.samples.append(_sample(problem, path, state, tol))

    dt0 = opts.initial_step or 1.0 / STEPS_PER_PATH
    dt, clean, steps = dt0, 0, 0
    logger.info(f"Tracing '{problem.name}' from x={x_start.tolist()} to x={x_end.tolist()} with J={list(J)}")

    while state.t < 1.0:
        steps += 1
        if steps > opts.max_steps:
            logger.warning(f"Step limit {opts.max_steps} reached at x={path.coordinate(state.t)}")
            branch.termination, branch.termination_x = NO_CONVERGE, path.coordinate(state.t)
            break

        dt_try = min(dt, 1.0 - state.t)
        speed = float(np.linalg.norm(state.dy))
        if speed * dt_try > tol.step_cap:
            dt_try = tol.step_cap / speed
        if dt_try * path.length < MIN_STEP:
            raise StepUnderflow(f"Step {dt_try * path.length:.3e} below {MIN_STEP} at x={path.coordinate(state.t)}")
        t_new = 1.0 if 1.0 - (state.t + dt_try) < 1e-14 else state.t + dt_try

        new, iterations = _correct(problem, path, state, t_new, tol)
        if not _same_branch(state, new, inertia, tol):
            if dt_try * path.length <= tol.event_tol:
                _terminate_breakdown(problem, path, branch, state, dt_try, tol)
                break
            dt, clean = 0.5 * dt_try, 0
            continue

        fired = _fired(state.monitors(tol.reg_tol), new.monitors(tol.reg_tol))
        if fired:
            handled = _handle_events(problem, path, branch, state, new, fired, inertia, opts, tol)
            if handled is None:
                break
            state, inertia = handled
            dt, clean = min(dt, dt0), 0
            continue

        if new.sigma_K < tol.fold_monitor:
            logger.debug(f"Fold candidate near x={path.coordinate(t_new)} (sigma_K={new.sigma_K:.3e})")
        branch.samples.append(_sample(problem, path, new, tol))
        state = new
        clean = clean + 1 if iterations <= CLEAN_ITERATIONS else 0
        if clean >= CLEAN_SOLVES_TO_GROW:
            dt, clean = min(2.0 * dt, MAX_STEP_FRACTION), 0

    if branch.termination == PATH_END and not np.allclose(requested_end, x_end):
        branch.events.append(Event(DOMAIN_BOUNDARY, x_star=path.coordinate(1.0), bracket_width=0.0))
    if branch.termination == PATH_END:
        branch.termination_x = path.coordinate(state.t)
    logger.info(f"Trace of '{problem.name}' ended with {branch.termination} at x={branch.termination_x} "
                f"({len(branch.samples)} samples, {len(branch.events)} events)")
    return branch


def _terminate_breakdown(problem: ParametricProblem, path: _Path, branch: Branch, state: _State,
                         width: float, tol: Tolerances) -> None:
    x_star = path.coordinate(state.t)
    diagnostics = _diagnostics(problem, state, tol)
    if state.sigma_K < tol.fold_sigma:
        kind = FOLD
    elif state.sigma_J <= tol.reg_tol:
        kind = LICQ_DEGENERACY
    else:
        kind = NO_CONVERGE
    if kind != NO_CONVERGE:
        branch.events.append(Event(kind, x_star=x_star, bracket_width=width * path.length,
                                   diagnostics=diagnostics))
    branch.termination, branch.termination_x = kind, x_star


def _handle_events(problem: ParametricProblem, path: _Path, branch: Branch, state: _State, new: _State,
                   fired: List[Tuple[str, int]], inertia: int, opts: TraceOptions,
                   tol: Tolerances) -> Optional[Tuple[_State, int]]:
    """
    Localize the earliest fired monitor and swap the working set.

    Returns:
        (state after the swap, its inertia), or None when the branch terminates
    """
    located = [(key,) + _bisect(problem, path, state, new, key, inertia, tol) for key in fired]
    (kind, index), lo, hi, t_star, width = min(located, key=lambda item: item[3])
    x_star = path.coordinate(t_star)
    if lo.t > state.t:
        branch.samples.append(_sample(problem, path, lo, tol))
    diagnostics = _diagnostics(problem, lo, tol)
    event_index = None if index < 0 else index
    branch.events.append(Event(kind, x_star=x_star, bracket_width=width, index=event_index,
                               diagnostics=diagnostics))
    logger.info(f"{kind}{'' if event_index is None else f'({event_index})'} at x={x_star:.9f}")

    A = evaluate(problem, lo.point.x, lo.y, tol).jac_y_h
    candidates, degenerate = _swap_candidates(kind, index, lo, problem.m, tol, A)
    if degenerate and kind == ACTIVATION:
        branch.events.append(Event(LICQ_DEGENERACY, x_star=x_star, bracket_width=width, index=event_index,
                                   diagnostics=diagnostics))
    t_b = lo.t + width / path.length
    for J_new in candidates:
        swapped = _try_swap(problem, path, lo, min(t_b, 1.0), J_new, inertia, opts, tol)
        if swapped is not None:
            logger.info(f"Working set {list(lo.J)} -> {list(J_new)} at x={x_star:.9f}")
            branch.samples.append(_sample(problem, path, swapped, tol))
            return swapped, swapped.inertia

    if kind == SCSC_LOSS:
        lam = lo.point.lam.copy()
        lam[index] = 0.0
        limit = replace(lo.point, lam=lam)
    else:
        limit = lo.point
    if classify_kkt(problem, limit, tol).label == NOT_LOCAL_MIN:
        termination = SADDLE_DEGENERATION
    elif kind == LICQ_DEGENERACY or degenerate:
        termination = LICQ_DEGENERACY
    elif lo.sigma_K < tol.fold_sigma:
        termination = FOLD
    else:
        termination = NO_CONVERGE
    branch.termination, branch.termination_x = termination, x_star
    return None


# =============================================================================
# Branch queries
# =============================================================================

def resolve_on_branch(problem: ParametricProblem, branch: Branch, position: float,
                      tol: Tolerances = DEFAULT_TOLERANCES) -> KKTPoint:
    """
    Corrector-resolved branch point at any path coordinate the branch covers.

    The nearest samples are tried in turn; a solve counts when it validates,
    keeps the sample's inertia and stays within step_cap of it.

    Raises:
        ValueError: position lies outside the traced range
        NoConverge: No nearby sample re-solves there
    """
    positions = np.array(branch.path)
    lo, hi = positions.min(), positions.max()
    if not lo - tol.domain_slack <= position <= hi + tol.domain_slack:
        raise ValueError(f"x={position} is outside the traced range [{lo}, {hi}]")
    x = branch.point_at(position)
    for idx in np.argsort(np.abs(positions - position), kind="stable")[:4]:
        sample = branch.samples[int(idx)]
        J = sample.working_set
        try:
            kkt = solve_reduced_kkt(problem, x, J, sample.kkt.y, sample.kkt.lam[list(J)], tol)
        except (NoConverge, SingularJacobian, Rejected):
            continue
        if float(np.linalg.norm(kkt.y - sample.kkt.y)) > tol.step_cap:
            continue
        HL, A = lagrangian_hessian_at(problem, kkt, tol)
        if reduced_inertia(HL, A[list(J)]) == sample.inertia:
            return kkt
    raise NoConverge(f"Could not resolve the branch at x={position}")


def kink_slopes(problem: ParametricProblem, branch: Branch, x_star: float, h: float = 1e-4,
                tol: Tolerances = DEFAULT_TOLERANCES) -> Tuple[np.ndarray, np.ndarray]:
    """
    One-sided slopes of y*(x) on either side of x_star.

    Each side uses a difference over [x_star - 2h, x_star - h] or
    [x_star + h, x_star + 2h], so an event location error below h does not
    leak into the slope.
    """
    y = {s: resolve_on_branch(problem, branch, x_star + s * h, tol).y for s in (-2, -1, 1, 2)}
    return (y[-1] - y[-2]) / h, (y[2] - y[1]) / h


def active_set_history(branch: Branch) -> List[Tuple[Tuple[float, float], Tuple[int, ...]]]:
    """Working sets along the branch with the x intervals they hold on; boundaries sit at the swap events."""
    if not branch.samples:
        return []
    swaps = [e.x_star for e in branch.events if e.kind in (ACTIVATION, SCSC_LOSS, LICQ_DEGENERACY)]
    groups: List[List[BranchSample]] = [[branch.samples[0]]]
    for s in branch.samples[1:]:
        if s.working_set == groups[-1][-1].working_set:
            groups[-1].append(s)
        else:
            groups.append([s])

    history = []
    start = groups[0][0].position
    for g, nxt in zip(groups, groups[1:] + [None]):
        if nxt is None:
            end = g[-1].position
        else:
            a, b = g[-1].position, nxt[0].position
            inside = [x for x in swaps if min(a, b) - 1e-12 <= x <= max(a, b) + 1e-12]
            end = inside[0] if inside else 0.5 * (a + b)
        history.append(((start, end), g[0].working_set))
        start = end
    return history


# =============================================================================
# Screens and profiles
# =============================================================================

def minimizers_by_stratum(problem: ParametricProblem, x,
                          tol: Tolerances = DEFAULT_TOLERANCES) -> Dict[Tuple[int, ...], List[KKTPoint]]:
    out: Dict[Tuple[int, ...], List[KKTPoint]] = {}
    for p in local_minimizers(problem, enumerate_kkt_points(problem, x, tol=tol), tol):
        out.setdefault(p.active, []).append(p)
    return out


def count_minimizers_per_stratum(problem: ParametricProblem, x,
                                 tol: Tolerances = DEFAULT_TOLERANCES) -> Dict[Tuple[int, ...], int]:
    """Strict local minimizers at x grouped by active pattern."""
    return {J: len(points) for J, points in sorted(minimizers_by_stratum(problem, x, tol).items())}


def _count_task(problem: ParametricProblem, tol: Tolerances, x) -> Dict[Tuple[int, ...], int]:
    return count_minimizers_per_stratum(problem, x, tol)


def minimizer_count_screen(problem: ParametricProblem, x_samples: Sequence,
                           tol: Tolerances = DEFAULT_TOLERANCES,
                           threads: Optional[int] = None) -> ScreenResult:
    """OBSTRUCTED with the first consecutive pair whose per-stratum minimizer counts differ."""
    samples = [np.atleast_1d(np.asarray(x, dtype=float)) for x in x_samples]
    if len(samples) < 2:
        raise ValueError("minimizer_count_screen needs at least two samples")
    counts = map_ordered(functools.partial(_count_task, problem, tol), samples, threads)
    result = ScreenResult(verdict=CONSISTENT, details=[
        {"x": x.tolist(), "counts": {pattern_key(J): c for J, c in c_map.items()}}
        for x, c_map in zip(samples, counts)
    ])
    for i in range(len(samples) - 1):
        a, b = counts[i], counts[i + 1]
        diffs = [J for J in sorted(set(a) | set(b)) if a.get(J, 0) != b.get(J, 0)]
        if diffs:
            J = diffs[0]
            result.verdict = OBSTRUCTED
            result.witness = (float(samples[i][0]), float(samples[i + 1][0]))
            result.difference = f"stratum {pattern_key(J)}: {a.get(J, 0)} vs {b.get(J, 0)} minimizer(s)"
            break
    return result


def branch_migration_screen(problem: ParametricProblem, x_from, x_to,
                            tol: Tolerances = DEFAULT_TOLERANCES) -> ScreenResult:
    """
    Trace the global minimizer from x_from and report OBSTRUCTED if its working set changes.

    Raises:
        NoStart: No strict local minimizer at x_from
    """
    start = global_minimizer(problem, x_from, tol)
    branch = trace_branch(problem, x_from, x_to, start, tol=tol)
    history = active_set_history(branch)
    result = ScreenResult(verdict=CONSISTENT, details=[branch.to_dict()])
    if len(history) > 1:
        (_, J0), ((x1, _), J1) = history[0], history[1]
        result.verdict = OBSTRUCTED
        result.witness = (float(np.ravel(x_from)[0]), float(np.ravel(x_to)[0]))
        result.difference = f"active set {list(J0)} -> {list(J1)} at x={x1:.9f}"
    return result


@dataclass
class SoscProfile:
    positions: List[float]
    moduli: List[float]
    running_infimum: List[float]
    infimum: float
    uniform: bool

    def to_dict(self) -> Dict:
        return {
            "samples": [{"x": x, "sosc_modulus": s, "running_infimum": r}
                        for x, s, r in zip(self.positions, self.moduli, self.running_infimum)],
            "infimum": self.infimum,
            "uniform": self.uniform,
        }


def uniform_sosc_profile(branch: Branch, tol: Tolerances = DEFAULT_TOLERANCES) -> SoscProfile:
    """Per-sample critical-cone modulus and its running infimum; uniform when the infimum exceeds uniform_sosc_tol."""
    moduli = [s.report.sosc_modulus for s in branch.samples]
    running = np.minimum.accumulate(moduli).tolist() if moduli else []
    infimum = float(running[-1]) if running else np.inf
    return SoscProfile(positions=branch.path, moduli=moduli, running_infimum=running,
                       infimum=infimum, uniform=infimum > tol.uniform_sosc_tol)


@dataclass(frozen=True)
class GrowthEstimate:
    c_hat: float
    witness: Tuple[float, ...]
    feasible_samples: int
    delta: float

    def to_dict(self) -> Dict:
        return {"c_hat": self.c_hat, "witness": list(self.witness),
                "feasible_samples": self.feasible_samples, "delta": self.delta}


def quadratic_growth_estimate(problem: ParametricProblem, kkt: KKTPoint, delta: float,
                              n_samples: int = 2000, seed: int = 0,
                              tol: Tolerances = DEFAULT_TOLERANCES) -> GrowthEstimate:
    """
    c_hat = min (g(y) - g(y*)) / |y - y*|^2 over feasible samples in the delta-ball.

    Samples are split between the full ball and the tangent spaces of every
    subset of the active constraints; face samples are pulled back onto the
    face by Gauss-Newton. Faces are where growth is weakest, and uniform
    ball sampling almost never lands on them.

    Raises:
        ValueError: delta <= 0 or kkt is not a strict local minimizer
        SamplingError: Fewer than 10 feasible samples
    """
    if delta <= 0:
        raise ValueError("delta must be positive")
    if classify_kkt(problem, kkt, tol).label != STRICT_LOCAL_MIN:
        raise ValueError("quadratic growth needs a strict local minimizer")
    rng = np.random.Generator(np.random.Philox(seed))
    m = problem.m
    A = evaluate(problem, kkt.x, kkt.y, tol).jac_y_h
    faces = [S for S in index_subsets(kkt.active, max_size=m)]
    per_face = max(1, n_samples // len(faces))

    chunks = []
    for S in faces:
        Z = null_basis(A[list(S)], m)
        r = Z.shape[1]
        if r == 0:
            continue
        u = rng.standard_normal((per_face, r))
        u /= np.linalg.norm(u, axis=1, keepdims=True)
        radius = delta * rng.random(per_face) ** (1.0 / r)
        Y = kkt.y + radius[:, None] * (u @ Z.T)
        if S:
            Y, res, _ = gauss_newton(problem, kkt.x, S, Y, tol)
            Y = Y[res <= 1e-10]
        chunks.append(Y)
    Y = np.vstack(chunks) if chunks else np.zeros((0, m))

    dist = np.linalg.norm(Y - kkt.y, axis=1)
    b = evaluate_batch(problem, kkt.x, Y, order=0, tol=tol, check_finite=False) if len(Y) else None
    if b is None:
        raise SamplingError("No samples could be drawn")
    feasible = (dist <= delta) & (dist >= 1e-3 * delta) & np.isfinite(b.g)
    if problem.k:
        feasible &= np.max(b.h, axis=1) <= tol.act_tol
    count = int(np.sum(feasible))
    if count < MIN_GROWTH_SAMPLES:
        raise SamplingError(f"Only {count} feasible sample(s) in the delta={delta} ball")
    ratio = (b.g[feasible] - objective_value(problem, kkt, tol)) / dist[feasible] ** 2
    best = int(np.argmin(ratio))
    return GrowthEstimate(c_hat=float(ratio[best]), witness=tuple(Y[feasible][best].tolist()),
                          feasible_samples=count, delta=float(delta))
