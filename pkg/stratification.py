"""
Stratification signatures of the feasible set and the rigidity screen
"""
import functools
import json
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage

from errors import InfeasibleError, ResolutionError
from numerics import gauss_newton, index_subsets
from problem_model import ParametricProblem, clamp_x, evaluate_batch, feasible_box, y_grid
from settings import DEFAULT_TOLERANCES, Tolerances, map_ordered

logger = logging.getLogger(__name__)

CONSISTENT = "CONSISTENT"
OBSTRUCTED = "OBSTRUCTED"

VERTEX_RESIDUAL_TOL = 1e-10
BAND_FACTOR = 1.5
DEFAULT_GRID_RES = 401
VERTEX_SEEDS_PER_AXIS = 9
ZONE_DILATION = 2
VERTEX_RADIUS_CELLS = 3.0
FRAGMENT_CELLS = 6


def pattern_key(J: Sequence[int]) -> str:
    """JSON rendering of an active pattern as a sorted index list."""
    return json.dumps(sorted(int(i) for i in J))


# =============================================================================
# Vertices
# =============================================================================

@dataclass(frozen=True)
class VertexRecord:
    """
    A point where m constraints vanish.

    active lists every constraint with |h_i| <= act_tol there, so it has more
    than m entries where extra constraints pass through the same point.
    """
    y: Tuple[float, ...]
    active: Tuple[int, ...]
    feasible: bool
    degenerate: bool = False
    sigma: float = 0.0

    def to_dict(self) -> Dict:
        return {"y": list(self.y), "active": list(self.active), "feasible": self.feasible,
                "degenerate": self.degenerate, "sigma": self.sigma}


def _intersections(problem: ParametricProblem, x: np.ndarray, seeds_per_axis: int,
                   tol: Tolerances) -> List[VertexRecord]:
    m, k = problem.m, problem.k
    if m > 3:
        raise ValueError(f"vertex enumeration supports m <= 3, got m={m}")
    seeds = y_grid(problem.y_box, seeds_per_axis)

    # (y, residual, sigma) over every |J| = m, merged by position below
    found: List[Tuple[np.ndarray, float, float]] = []
    for J in index_subsets(range(k), max_size=m):
        if len(J) != m:
            continue
        Y, res, sig = gauss_newton(problem, x, J, seeds, tol)
        for r in np.flatnonzero(res <= VERTEX_RESIDUAL_TOL):
            found.append((Y[r], float(res[r]), float(sig[r])))
    found.sort(key=lambda c: c[1])

    groups: List[List[Tuple[np.ndarray, float, float]]] = []
    for cand in found:
        for group in groups:
            if np.max(np.abs(cand[0] - group[0][0])) <= tol.dedup_tol:
                group.append(cand)
                break
        else:
            groups.append([cand])

    records = []
    for group in groups:
        y = group[0][0]
        h = evaluate_batch(problem, x, y, order=0, tol=tol).h[0]
        active = tuple(int(i) for i in np.flatnonzero(np.abs(h) <= tol.act_tol))
        sigma = min(c[2] for c in group)
        records.append(VertexRecord(
            y=tuple(y.tolist()), active=active, feasible=bool(np.max(h) <= tol.act_tol),
            degenerate=len(active) > m or sigma <= tol.sing_tol, sigma=sigma,
        ))
    records.sort(key=lambda v: (v.active, v.y))
    return records


def enumerate_vertices(problem: ParametricProblem, x, seeds_per_axis: int = VERTEX_SEEDS_PER_AXIS,
                       tol: Tolerances = DEFAULT_TOLERANCES) -> List[VertexRecord]:
    """
    Solutions of h_J(x, y) = 0 for every |J| = m.

    Newton (Gauss-Newton with a pseudo-inverse) runs from a seed grid over the
    problem's y box. Solutions from different patterns at the same point are
    merged into one record. Rank-deficient intersections, and points where
    more than m constraints vanish, come back with degenerate=True; callers
    count only the nondegenerate feasible ones.

    Args:
        problem: The problem (m <= 3)
        x: Parameter
        seeds_per_axis: Seeds per y axis
        tol: Tolerances

    Returns:
        Records in canonical (active, y) order
    """
    x = clamp_x(problem, np.asarray(x, dtype=float).reshape(1, problem.n), tol)[0]
    return _intersections(problem, x, seeds_per_axis, tol)


def vertex_degeneracies(problem: ParametricProblem, x,
                        tol: Tolerances = DEFAULT_TOLERANCES) -> List[VertexRecord]:
    """Feasible intersections whose active gradients are rank deficient."""
    return [v for v in enumerate_vertices(problem, x, tol=tol) if v.degenerate and v.feasible]


def vertex_count(problem: ParametricProblem, x, tol: Tolerances = DEFAULT_TOLERANCES) -> int:
    return sum(1 for v in enumerate_vertices(problem, x, tol=tol) if v.feasible and not v.degenerate)


# =============================================================================
# Signatures
# =============================================================================

@dataclass
class StratSignature:
    vertices: int
    arcs: int
    faces: int
    per_pattern: Dict[Tuple[int, ...], int] = field(default_factory=dict)
    degenerate: int = 0
    x: Optional[Tuple[float, ...]] = None

    def counts(self) -> Tuple[int, int, int]:
        return self.vertices, self.arcs, self.faces

    def to_dict(self) -> Dict:
        return {
            "x": list(self.x) if self.x is not None else None,
            "vertices": self.vertices,
            "arcs": self.arcs,
            "faces": self.faces,
            "per_pattern": {pattern_key(J): c for J, c in sorted(self.per_pattern.items())},
            "degenerate": self.degenerate,
        }


def _components(mask: np.ndarray, what: str, zone: Optional[np.ndarray] = None) -> int:
    """
    Count connected components of mask (8-connectivity in the plane).

    Components of at most FRAGMENT_CELLS nodes touching zone are band
    fragments at a vertex and are dropped. Any other single-node component
    means the grid cannot resolve the stratum.
    """
    structure = np.ones((3,) * mask.ndim, dtype=int)
    labels, count = ndimage.label(mask, structure=structure)
    if not count:
        return 0
    sizes = np.bincount(labels.ravel())[1:]
    keep = np.ones(count, dtype=bool)
    if zone is not None and np.any(zone):
        halo = ndimage.binary_dilation(zone, structure=structure)
        touching = np.zeros(count + 1, dtype=bool)
        touching[np.unique(labels[halo])] = True
        keep &= ~((sizes <= FRAGMENT_CELLS) & touching[1:])
    if np.any(keep & (sizes == 1)):
        raise ResolutionError(f"{what} has a single-cell component; increase grid_res")
    return int(np.count_nonzero(keep))


def _vertex_zone(near: np.ndarray, inside: np.ndarray, Y: np.ndarray, box: np.ndarray,
                 grid_res: int, vertices: Sequence[VertexRecord], shape: Tuple[int, ...]) -> np.ndarray:
    """Grid nodes assigned to the vertex stratum: band overlaps and discs around feasible vertices."""
    structure = np.ones((3,) * len(shape), dtype=int)
    zone = (inside & (near.sum(axis=1) >= 2)).reshape(shape)
    zone = ndimage.binary_dilation(zone, structure=structure, iterations=ZONE_DILATION)
    step = (box[:, 1] - box[:, 0]) / (grid_res - 1)
    for v in vertices:
        if v.feasible:
            dist = np.linalg.norm((Y - np.asarray(v.y)) / step, axis=1)
            zone |= (dist <= VERTEX_RADIUS_CELLS).reshape(shape)
    return zone


def strat_signature(problem: ParametricProblem, x, grid_res: int = DEFAULT_GRID_RES,
                    tol: Tolerances = DEFAULT_TOLERANCES) -> StratSignature:
    """
    Count the strata of the feasible set at x.

    Grid nodes over the inflated feasible bounding box are labeled by the
    constraints within a resolution-scaled band (1.5 cell diagonals times the
    local gradient norm). Nodes where two bands overlap, and nodes close to an
    enumerated vertex, belong to the vertex stratum. The remaining nodes with
    exactly one banded constraint form that constraint's arcs; nodes with
    none, strictly inside, form faces. Vertices come from enumerate_vertices.
    For m = 1 the interior splits into intervals and the boundary points are
    the vertices, so arcs are 0.

    Raises:
        ResolutionError: A counted component away from every vertex is a single grid node
        InfeasibleError: The feasible set is empty on the search box
    """
    m, k = problem.m, problem.k
    if m > 2:
        raise ValueError("strata grids support m <= 2")
    x = clamp_x(problem, np.asarray(x, dtype=float).reshape(1, problem.n), tol)[0]

    vertices = _intersections(problem, x, VERTEX_SEEDS_PER_AXIS, tol)
    per_pattern: Dict[Tuple[int, ...], int] = {}
    n_vertices = 0
    for v in vertices:
        if v.feasible and not v.degenerate:
            n_vertices += 1
            per_pattern[v.active] = per_pattern.get(v.active, 0) + 1
    n_degenerate = sum(1 for v in vertices if v.feasible and v.degenerate)

    box = feasible_box(problem, x)
    Y = y_grid(box, grid_res)
    b = evaluate_batch(problem, x, Y, order=1, tol=tol)
    cell = np.linalg.norm((box[:, 1] - box[:, 0]) / (grid_res - 1))
    band = BAND_FACTOR * cell * np.linalg.norm(b.jac_y_h, axis=2) if k else np.zeros((len(Y), 0))
    H = b.h
    shape = (grid_res,) * m

    zone = None
    near = np.abs(H) <= band
    inside = np.all(H <= band, axis=1)
    if m == 2 and k:
        zone = _vertex_zone(near, inside, Y, box, grid_res, vertices, shape)

    interior = np.all(H < -band, axis=1) if k else np.ones(len(Y), dtype=bool)
    faces = _components(interior.reshape(shape), "interior stratum", zone)
    if faces:
        per_pattern[()] = faces

    arcs = 0
    if zone is not None:
        single = inside & (near.sum(axis=1) == 1)
        for i in range(k):
            mask = (single & near[:, i]).reshape(shape) & ~zone
            count = _components(mask, f"boundary stratum of h[{i}]", zone)
            if count:
                per_pattern[(i,)] = count
                arcs += count

    logger.debug(f"Signature of '{problem.name}' at x={x.tolist()}: ({n_vertices}, {arcs}, {faces})")
    return StratSignature(vertices=n_vertices, arcs=arcs, faces=faces, per_pattern=per_pattern,
                          degenerate=n_degenerate, x=tuple(x.tolist()))


def signature_equal(s1: StratSignature, s2: StratSignature) -> Tuple[bool, Optional[str]]:
    """
    Compare stratum counts per dimension.

    Returns:
        (equal, first difference). Equality only needs the counts to agree; a
        per-pattern difference is still reported when the counts match.
    """
    for name in ("vertices", "arcs", "faces"):
        a, b = getattr(s1, name), getattr(s2, name)
        if a != b:
            return False, f"{name}: {a} vs {b}"
    for J in sorted(set(s1.per_pattern) | set(s2.per_pattern)):
        a, b = s1.per_pattern.get(J, 0), s2.per_pattern.get(J, 0)
        if a != b:
            return True, f"per_pattern {pattern_key(J)}: {a} vs {b}"
    return True, None


@dataclass
class ScreenResult:
    """Outcome of a screening criterion over sampled x values."""
    verdict: str
    witness: Optional[Tuple[float, float]] = None
    difference: Optional[str] = None
    details: List[Dict] = field(default_factory=list)
    inconclusive: List[float] = field(default_factory=list)

    @property
    def obstructed(self) -> bool:
        return self.verdict == OBSTRUCTED

    def to_dict(self) -> Dict:
        return {
            "verdict": self.verdict,
            "witness": list(self.witness) if self.witness is not None else None,
            "difference": self.difference,
            "details": self.details,
            "inconclusive": self.inconclusive,
        }


def _signature_task(problem: ParametricProblem, grid_res: int, tol: Tolerances, x) -> StratSignature:
    return strat_signature(problem, x, grid_res, tol)


def rigidity_screen(problem: ParametricProblem, x_samples: Sequence, grid_res: int = DEFAULT_GRID_RES,
                    tol: Tolerances = DEFAULT_TOLERANCES, threads: Optional[int] = None) -> ScreenResult:
    """
    OBSTRUCTED with the first consecutive pair of samples whose signatures differ.

    A differing signature certifies that LICQ cannot hold at every x; equal
    signatures prove nothing. Samples with degenerate feasible intersections
    are listed as inconclusive.

    Raises:
        ResolutionError: Propagated from strat_signature
    """
    samples = [np.atleast_1d(np.asarray(x, dtype=float)) for x in x_samples]
    if len(samples) < 2:
        raise ValueError("rigidity_screen needs at least two samples")
    sigs = map_ordered(functools.partial(_signature_task, problem, grid_res, tol), samples, threads)
    result = ScreenResult(verdict=CONSISTENT, details=[s.to_dict() for s in sigs])
    result.inconclusive = [float(s.x[0]) for s in sigs if s.degenerate]
    for a, b in zip(sigs, sigs[1:]):
        equal, diff = signature_equal(a, b)
        if not equal:
            result.verdict = OBSTRUCTED
            result.witness = (float(a.x[0]), float(b.x[0]))
            result.difference = diff
            break
    if result.inconclusive:
        logger.warning(f"Degenerate intersections at x={result.inconclusive}; screen inconclusive there")
    return result


def bracket_transition(problem: ParametricProblem, x_lo: float, x_hi: float,
                       x_tol: float = 1e-6, tol: Tolerances = DEFAULT_TOLERANCES) -> Tuple[float, float, int, int]:
    """
    Bisect on the feasible vertex count to localize a stratification change.

    Returns:
        (a, b, count_a, count_b) with b - a <= x_tol and count_a != count_b

    Raises:
        ValueError: The endpoint counts agree
    """
    a, b = float(x_lo), float(x_hi)
    ca, cb = vertex_count(problem, a, tol), vertex_count(problem, b, tol)
    if ca == cb:
        raise ValueError(f"vertex count {ca} is the same at both ends of [{a}, {b}]")
    while b - a > x_tol:
        mid = 0.5 * (a + b)
        cm = vertex_count(problem, mid, tol)
        if cm == ca:
            a = mid
        else:
            b, cb = mid, cm
    logger.info(f"Vertex count changes {ca} -> {cb} in [{a:.9f}, {b:.9f}]")
    return a, b, ca, cb
