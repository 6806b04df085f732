"""
Parametric lower-level problems with piecewise-polynomial data
"""
import functools
import hashlib
import json
import logging
import os
import re
from dataclasses import dataclass, field, replace
from itertools import product
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from errors import DomainError, InfeasibleError, NonFiniteError, ParseError, SeamError
from settings import DEFAULT_TOLERANCES, Tolerances

logger = logging.getLogger(__name__)

SMOOTHNESS_ORDERS = {"C0": 0, "C1": 1, "C2": 2}
DEFAULT_Y_HALF_WIDTH = 3.0


# =============================================================================
# Derivative slot layout
# =============================================================================

def slot_count(d: int, order: int) -> int:
    """Number of derivative slots up to the given order for d variables."""
    return {0: 1, 1: 1 + d, 2: 1 + d + d * (d + 1) // 2}[order]


@functools.lru_cache(maxsize=None)
def _hessian_slots(d: int) -> Tuple[Tuple[Tuple[int, int], ...], np.ndarray]:
    """Upper-triangular (j, l) pairs and the d×d map from (j, l) to slot index."""
    pairs = tuple((j, l) for j in range(d) for l in range(j, d))
    slots = np.zeros((d, d), dtype=int)
    for s, (j, l) in enumerate(pairs):
        slots[j, l] = slots[l, j] = 1 + d + s
    return pairs, slots


# =============================================================================
# Polynomial pieces and fields
# =============================================================================

@dataclass(frozen=True, eq=False)
class PolyPiece:
    """One polynomial piece valid on an x-box.

    Terms are monomials in (x - origin, y); negative integer powers are
    allowed in x coordinates only.
    """
    lo: np.ndarray
    hi: np.ndarray
    powers: np.ndarray
    coeffs: np.ndarray
    origin: np.ndarray
    _monomials: np.ndarray = field(init=False, repr=False)
    _weights: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        d = self.powers.shape[1]
        pairs, _ = _hessian_slots(d)
        total = slot_count(d, 2)
        table: Dict[tuple, np.ndarray] = {}

        def add(pw, coeff, slot):
            key = tuple(int(p) for p in pw)
            if key not in table:
                table[key] = np.zeros(total)
            table[key][slot] += coeff

        for pw, c in zip(self.powers, self.coeffs):
            if c == 0.0:
                continue
            pw = np.asarray(pw, dtype=int)
            add(pw, c, 0)
            for j in range(d):
                if pw[j] != 0:
                    q = pw.copy()
                    q[j] -= 1
                    add(q, c * pw[j], 1 + j)
            for s, (j, l) in enumerate(pairs):
                factor = pw[j] * (pw[j] - 1) if j == l else pw[j] * pw[l]
                if factor == 0:
                    continue
                q = pw.copy()
                q[j] -= 1
                q[l] -= 1
                add(q, c * factor, 1 + d + s)

        keys = sorted(table)
        object.__setattr__(self, "_monomials", np.array(keys, dtype=float).reshape(len(keys), d))
        object.__setattr__(
            self, "_weights",
            np.array([table[key] for key in keys]).reshape(len(keys), total),
        )

    def contains(self, X: np.ndarray, slack: float) -> np.ndarray:
        return np.all((X >= self.lo - slack) & (X <= self.hi + slack), axis=1)

    def derivatives(self, X: np.ndarray, Y: np.ndarray, order: int) -> np.ndarray:
        """
        Value and derivatives over z = (x, y) for stacked points.

        Args:
            X: (N, n) parameter rows
            Y: (N, m) lower-level rows
            order: 0, 1 or 2

        Returns:
            (N, S) array: value, gradient, upper-triangular Hessian slots
        """
        Z = np.hstack([X - self.origin, Y])
        S = slot_count(Z.shape[1], order)
        if len(self._monomials) == 0:
            return np.zeros((len(Z), S))
        with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
            M = np.prod(Z[:, None, :] ** self._monomials[None, :, :], axis=2)
            return M @ self._weights[:, :S]

    def y_degree(self, n: int) -> int:
        if len(self.powers) == 0:
            return 0
        return int(np.max(np.sum(self.powers[:, n:], axis=1)))


@dataclass(frozen=True, eq=False)
class PiecewisePolyField:
    """A scalar field given by polynomial pieces over x-boxes."""
    pieces: Tuple[PolyPiece, ...]
    smoothness: str = "C2"

    def locate(self, X: np.ndarray, slack: float = 0.0) -> np.ndarray:
        """Index of the first piece containing each row of X (-1 if none)."""
        idx = np.full(len(X), -1, dtype=int)
        for p, piece in enumerate(self.pieces):
            hit = (idx < 0) & piece.contains(X, slack)
            idx[hit] = p
        return idx

    def derivatives(self, X: np.ndarray, Y: np.ndarray, order: int,
                    piece_index=None, slack: float = 0.0) -> np.ndarray:
        if piece_index is None:
            idx = self.locate(X, slack)
            if np.any(idx < 0):
                bad = X[np.argmax(idx < 0)]
                raise DomainError(f"No polynomial piece covers x={bad.tolist()}")
        else:
            idx = np.broadcast_to(np.asarray(piece_index, dtype=int), (len(X),))

        if len(self.pieces) == 1 or np.all(idx == idx[0]):
            return self.pieces[int(idx[0])].derivatives(X, Y, order)

        out = np.empty((len(X), slot_count(X.shape[1] + Y.shape[1], order)))
        for p, piece in enumerate(self.pieces):
            rows = idx == p
            if np.any(rows):
                out[rows] = piece.derivatives(X[rows], Y[rows], order)
        return out

    def y_degree(self, n: int) -> int:
        return max(piece.y_degree(n) for piece in self.pieces)

    def scaled(self, c: float) -> "PiecewisePolyField":
        return PiecewisePolyField(
            pieces=tuple(
                PolyPiece(p.lo, p.hi, p.powers, p.coeffs * c, p.origin) for p in self.pieces
            ),
            smoothness=self.smoothness,
        )

    def with_extra_terms(self, powers: np.ndarray, coeffs: np.ndarray) -> "PiecewisePolyField":
        """Add the same terms (in unshifted coordinates of y only) to every piece."""
        return PiecewisePolyField(
            pieces=tuple(
                PolyPiece(p.lo, p.hi, np.vstack([p.powers, powers]),
                          np.concatenate([p.coeffs, coeffs]), p.origin)
                for p in self.pieces
            ),
            smoothness=self.smoothness,
        )

    def to_dict(self, n: int) -> dict:
        pieces = []
        for p in self.pieces:
            entry = {
                "x_lo": p.lo.tolist() if n > 1 else float(p.lo[0]),
                "x_hi": p.hi.tolist() if n > 1 else float(p.hi[0]),
                "terms": [
                    {"powers": [int(v) for v in pw], "coeff": float(c)}
                    for pw, c in zip(p.powers, p.coeffs)
                ],
            }
            if np.any(p.origin != 0.0):
                entry["x_origin"] = p.origin.tolist() if n > 1 else float(p.origin[0])
            pieces.append(entry)
        return {"pieces": pieces, "smoothness": self.smoothness}


# =============================================================================
# Problems and evaluation records
# =============================================================================

@dataclass(frozen=True, eq=False)
class ParametricProblem:
    """min_y g(x, y) s.t. h_i(x, y) <= 0 over a box of x."""
    name: str
    n: int
    m: int
    k: int
    x_lo: np.ndarray
    x_hi: np.ndarray
    g: PiecewisePolyField
    h: Tuple[PiecewisePolyField, ...]
    y_box: np.ndarray
    slater_margin: Optional[float] = None
    f: Optional[PiecewisePolyField] = None
    a_shift: Optional[np.ndarray] = None
    b_shift: Optional[np.ndarray] = None
    description: str = ""
    source: str = ""

    @property
    def x_domain(self) -> np.ndarray:
        return np.column_stack([self.x_lo, self.x_hi])

    @property
    def fields(self) -> Tuple[PiecewisePolyField, ...]:
        return (self.g,) + tuple(self.h)


@dataclass(frozen=True, eq=False)
class EvalRecord:
    """Values and derivatives of g and h at one (x, y)."""
    g: float
    grad_y_g: np.ndarray
    hess_yy_g: np.ndarray
    hess_xy_g: np.ndarray
    h: np.ndarray
    jac_y_h: np.ndarray
    jac_x_h: np.ndarray
    hess_yy_h: np.ndarray
    hess_xy_h: np.ndarray


@dataclass(frozen=True, eq=False)
class EvalBatch:
    """Stacked evaluation over N rows; derivative fields are None below the requested order."""
    g: np.ndarray
    h: np.ndarray
    grad_y_g: Optional[np.ndarray] = None
    grad_x_g: Optional[np.ndarray] = None
    jac_y_h: Optional[np.ndarray] = None
    jac_x_h: Optional[np.ndarray] = None
    hess_yy_g: Optional[np.ndarray] = None
    hess_xy_g: Optional[np.ndarray] = None
    hess_yy_h: Optional[np.ndarray] = None
    hess_xy_h: Optional[np.ndarray] = None

    def record(self, row: int = 0) -> EvalRecord:
        return EvalRecord(
            g=float(self.g[row]),
            grad_y_g=self.grad_y_g[row],
            hess_yy_g=self.hess_yy_g[row],
            hess_xy_g=self.hess_xy_g[row],
            h=self.h[row],
            jac_y_h=self.jac_y_h[row],
            jac_x_h=self.jac_x_h[row],
            hess_yy_h=self.hess_yy_h[row],
            hess_xy_h=self.hess_xy_h[row],
        )


def _rows(values, width: int) -> np.ndarray:
    arr = np.asarray(values, dtype=float)
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    elif arr.ndim == 1:
        arr = arr.reshape(-1, width) if arr.size != width else arr.reshape(1, width)
    if arr.shape[1] != width:
        raise ValueError(f"Expected rows of width {width}, got shape {arr.shape}")
    return arr


def clamp_x(problem: ParametricProblem, X: np.ndarray,
            tol: Tolerances = DEFAULT_TOLERANCES) -> np.ndarray:
    """
    Clamp x rows that sit within domain_slack of the box; reject the rest.

    Raises:
        DomainError: Some row lies outside the box beyond the slack
    """
    outside = np.any((X < problem.x_lo - tol.domain_slack) | (X > problem.x_hi + tol.domain_slack), axis=1)
    if np.any(outside):
        bad = X[np.argmax(outside)]
        raise DomainError(
            f"x={bad.tolist()} outside domain {problem.x_domain.tolist()} of '{problem.name}'"
        )
    return np.clip(X, problem.x_lo, problem.x_hi)


def evaluate_batch(problem: ParametricProblem, X, Y, order: int = 2,
                   tol: Tolerances = DEFAULT_TOLERANCES,
                   pieces: Optional[Sequence[int]] = None,
                   check_domain: bool = True,
                   check_finite: bool = True) -> EvalBatch:
    """
    Evaluate g and every h_i on stacked (x, y) rows.

    Args:
        problem: The problem
        X: (N, n) or a single x broadcast over all Y rows
        Y: (N, m) lower-level points
        order: Highest derivative order to compute (0, 1, 2)
        tol: Tolerances (domain slack)
        pieces: Optional frozen piece index per field (g first, then h)
        check_domain: Clamp/reject x against the box
        check_finite: Raise on NaN/Inf (solvers pass False and screen rows themselves)

    Returns:
        EvalBatch

    Raises:
        DomainError: x outside the box
        NonFiniteError: Any output is NaN or Inf
    """
    n, m, k = problem.n, problem.m, problem.k
    X = _rows(X, n)
    Y = _rows(Y, m)
    if len(X) == 1 and len(Y) > 1:
        X = np.repeat(X, len(Y), axis=0)
    elif len(Y) == 1 and len(X) > 1:
        Y = np.repeat(Y, len(X), axis=0)
    if check_domain:
        X = clamp_x(problem, X, tol)

    d = n + m
    fields = problem.fields
    raw = np.stack([
        fld.derivatives(X, Y, order,
                        piece_index=None if pieces is None else pieces[i],
                        slack=tol.domain_slack)
        for i, fld in enumerate(fields)
    ], axis=1)

    g = raw[:, 0, 0].copy()
    h = raw[:, 1:, 0].copy()
    parts = {}
    if order >= 1:
        grads = raw[:, :, 1:1 + d]
        parts["grad_x_g"] = grads[:, 0, :n].copy()
        parts["grad_y_g"] = grads[:, 0, n:].copy()
        parts["jac_x_h"] = grads[:, 1:, :n].copy()
        parts["jac_y_h"] = grads[:, 1:, n:].copy()
    if order >= 2:
        _, slots = _hessian_slots(d)
        H = raw[:, :, slots]
        parts["hess_yy_g"] = H[:, 0, n:, n:].copy()
        parts["hess_xy_g"] = H[:, 0, :n, n:].copy()
        parts["hess_yy_h"] = H[:, 1:, n:, n:].copy()
        parts["hess_xy_h"] = H[:, 1:, :n, n:].copy()

    if problem.b_shift is not None:
        g = g + Y @ problem.b_shift
        if order >= 1:
            parts["grad_y_g"] = parts["grad_y_g"] + problem.b_shift
    if problem.a_shift is not None:
        h = h + problem.a_shift

    batch = EvalBatch(g=g, h=h.reshape(len(X), k), **parts)
    if not check_finite:
        return batch
    for name, value in vars(batch).items():
        if value is not None and not np.all(np.isfinite(value)):
            raise NonFiniteError(f"Non-finite {name} in '{problem.name}'")
    return batch


def evaluate(problem: ParametricProblem, x, y,
             tol: Tolerances = DEFAULT_TOLERANCES) -> EvalRecord:
    """
    Evaluate every quantity of the lower-level problem at (x, y).

    Args:
        problem: The problem
        x: Parameter vector of length n (scalar accepted when n == 1)
        y: Lower-level point of length m

    Returns:
        EvalRecord with exact derivatives

    Raises:
        DomainError: x outside the domain by more than the slack
        NonFiniteError: Any output is NaN/Inf
    """
    y = np.asarray(y, dtype=float).reshape(problem.m)
    if not np.all(np.isfinite(y)):
        raise NonFiniteError(f"Non-finite y={y.tolist()}")
    return evaluate_batch(problem, np.asarray(x, dtype=float).reshape(1, problem.n),
                          y.reshape(1, problem.m), order=2, tol=tol).record(0)


def evaluate_upper(problem: ParametricProblem, x, y,
                   tol: Tolerances = DEFAULT_TOLERANCES) -> Tuple[float, np.ndarray, np.ndarray]:
    """
    Upper-level objective f and its x/y gradients.

    Raises:
        ValueError: The problem declares no upper-level objective
    """
    if problem.f is None:
        raise ValueError(f"Problem '{problem.name}' declares no upper-level objective f")
    X = clamp_x(problem, np.asarray(x, dtype=float).reshape(1, problem.n), tol)
    Y = np.asarray(y, dtype=float).reshape(1, problem.m)
    out = problem.f.derivatives(X, Y, 1, slack=tol.domain_slack)[0]
    n = problem.n
    return float(out[0]), out[1:1 + n].copy(), out[1 + n:].copy()


def fd_check(problem: ParametricProblem, x, y, step: float,
             tol: Tolerances = DEFAULT_TOLERANCES) -> float:
    """
    Worst relative discrepancy between analytic derivatives and central differences.

    First derivatives are differenced from values, second derivatives from the
    analytic first derivatives. The polynomial piece active at the base point
    is frozen so steps across a breakpoint do not mix pieces.

    Args:
        problem: The problem
        x: Base parameter
        y: Base lower-level point
        step: Finite-difference step (> 0)

    Returns:
        max |analytic - fd| / max(1, |analytic|) over all derivative entries
    """
    if step <= 0:
        raise ValueError("step must be positive")
    n, m = problem.n, problem.m
    x = clamp_x(problem, np.asarray(x, dtype=float).reshape(1, n), tol)[0]
    y = np.asarray(y, dtype=float).reshape(m)
    frozen = [int(fld.locate(x[None, :], tol.domain_slack)[0]) for fld in problem.fields]

    def at(xv, yv, order):
        return evaluate_batch(problem, xv[None, :], yv[None, :], order=order,
                              tol=tol, pieces=frozen, check_domain=False)

    base = at(x, y, 2)
    worst = 0.0

    def compare(analytic, numeric):
        nonlocal worst
        analytic = np.asarray(analytic, dtype=float)
        err = np.abs(analytic - numeric) / np.maximum(1.0, np.abs(analytic))
        if not np.all(np.isfinite(err)):
            raise NonFiniteError("Non-finite finite-difference discrepancy")
        if err.size:
            worst = max(worst, float(np.max(err)))

    for j in range(m):
        e = np.zeros(m)
        e[j] = step
        plus, minus = at(x, y + e, 1), at(x, y - e, 1)
        compare(base.grad_y_g[0, j], (plus.g[0] - minus.g[0]) / (2 * step))
        compare(base.jac_y_h[0, :, j], (plus.h[0] - minus.h[0]) / (2 * step))
        compare(base.hess_yy_g[0, :, j], (plus.grad_y_g[0] - minus.grad_y_g[0]) / (2 * step))
        compare(base.hess_yy_h[0, :, :, j], (plus.jac_y_h[0] - minus.jac_y_h[0]) / (2 * step))

    for c in range(n):
        e = np.zeros(n)
        e[c] = step
        plus, minus = at(x + e, y, 1), at(x - e, y, 1)
        compare(base.jac_x_h[0, :, c], (plus.h[0] - minus.h[0]) / (2 * step))
        compare(base.hess_xy_g[0, c, :], (plus.grad_y_g[0] - minus.grad_y_g[0]) / (2 * step))
        compare(base.hess_xy_h[0, :, c, :], (plus.jac_y_h[0] - minus.jac_y_h[0]) / (2 * step))

    return worst


# =============================================================================
# Grids over y
# =============================================================================

def y_grid(box: np.ndarray, res: int) -> np.ndarray:
    """All points of a res^m tensor grid over box (m, 2), ij ordering."""
    axes = [np.linspace(lo, hi, res) for lo, hi in np.asarray(box, dtype=float)]
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.column_stack([a.ravel() for a in mesh])


def slater_point(problem: ParametricProblem, x, grid_res: int = 41) -> Tuple[np.ndarray, float]:
    """
    Deepest interior grid point of Y(x).

    Returns:
        (y, depth) where depth = -max_i h_i(x, y)
    """
    Y = y_grid(problem.y_box, grid_res)
    H = evaluate_batch(problem, np.asarray(x, dtype=float).reshape(1, problem.n), Y, order=0).h
    depth = -np.max(H, axis=1) if problem.k else np.full(len(Y), np.inf)
    best = int(np.argmax(depth))
    return Y[best], float(depth[best])


def slater_check(problem: ParametricProblem, n_x: int = 33, grid_res: int = 41) -> bool:
    """Grid check of the declared Slater margin at n_x evenly spaced x values."""
    if problem.slater_margin is None:
        return True
    axes = [np.linspace(lo, hi, n_x) for lo, hi in problem.x_domain]
    for x in product(*axes):
        _, depth = slater_point(problem, np.array(x), grid_res)
        if depth < problem.slater_margin:
            logger.warning(f"Slater margin {problem.slater_margin} fails for '{problem.name}' at x={x}: depth {depth:.4g}")
            return False
    return True


def feasible_box(problem: ParametricProblem, x, grid_res: int = 101,
                 level: float = 0.0, inflate: float = 0.05) -> np.ndarray:
    """
    Bounding box of {y in y_box : max_i h_i(x, y) <= level}, inflated.

    Raises:
        InfeasibleError: No grid point satisfies the level
    """
    Y = y_grid(problem.y_box, grid_res)
    H = evaluate_batch(problem, np.asarray(x, dtype=float).reshape(1, problem.n), Y, order=0).h
    ok = np.max(H, axis=1) <= level if problem.k else np.ones(len(Y), dtype=bool)
    if not np.any(ok):
        raise InfeasibleError(f"No feasible grid point for '{problem.name}' at x={np.ravel(x).tolist()}")
    lo, hi = Y[ok].min(axis=0), Y[ok].max(axis=0)
    cell = (problem.y_box[:, 1] - problem.y_box[:, 0]) / (grid_res - 1)
    pad = np.maximum(inflate * (hi - lo), cell)
    return np.column_stack([lo - pad, hi + pad])


# =============================================================================
# Problem files
# =============================================================================

def _bound(raw, n: int, default: np.ndarray, path: str) -> np.ndarray:
    if raw is None:
        return default.copy()
    arr = np.atleast_1d(np.asarray(raw, dtype=float))
    if arr.shape != (n,) or not np.all(np.isfinite(arr)):
        raise ParseError(f"expected {n} finite number(s), got {raw!r}", field=path)
    return arr


def _parse_field(raw, n: int, m: int, x_lo: np.ndarray, x_hi: np.ndarray,
                 path: str) -> PiecewisePolyField:
    if not isinstance(raw, dict):
        raise ParseError("field must be an object with 'pieces'", field=path)
    smoothness = raw.get("smoothness", "C2")
    if smoothness not in SMOOTHNESS_ORDERS:
        raise ParseError(f"smoothness must be one of {sorted(SMOOTHNESS_ORDERS)}", field=f"{path}.smoothness")
    pieces_raw = raw.get("pieces")
    if not isinstance(pieces_raw, list) or not pieces_raw:
        raise ParseError("'pieces' must be a non-empty list", field=f"{path}.pieces")

    pieces = []
    for pi, pr in enumerate(pieces_raw):
        ppath = f"{path}.pieces[{pi}]"
        if not isinstance(pr, dict):
            raise ParseError("piece must be an object", field=ppath)
        lo = _bound(pr.get("x_lo"), n, x_lo, f"{ppath}.x_lo")
        hi = _bound(pr.get("x_hi"), n, x_hi, f"{ppath}.x_hi")
        if np.any(lo > hi):
            raise ParseError("x_lo exceeds x_hi", field=ppath)
        origin = _bound(pr.get("x_origin"), n, np.zeros(n), f"{ppath}.x_origin")
        terms = pr.get("terms", [])
        if not isinstance(terms, list):
            raise ParseError("'terms' must be a list", field=f"{ppath}.terms")
        powers, coeffs = [], []
        for ti, term in enumerate(terms):
            tpath = f"{ppath}.terms[{ti}]"
            if not isinstance(term, dict) or "powers" not in term or "coeff" not in term:
                raise ParseError("term needs 'powers' and 'coeff'", field=tpath)
            pw = term["powers"]
            if (not isinstance(pw, list) or len(pw) != n + m
                    or not all(isinstance(p, int) and not isinstance(p, bool) for p in pw)):
                raise ParseError(f"powers must be {n + m} integers (x then y)", field=f"{tpath}.powers")
            if any(p < 0 for p in pw[n:]):
                raise ParseError("negative powers are only allowed in x", field=f"{tpath}.powers")
            try:
                coeff = float(term["coeff"])
            except (TypeError, ValueError):
                raise ParseError("coeff must be a number", field=f"{tpath}.coeff")
            if not np.isfinite(coeff):
                raise ParseError("coeff must be finite", field=f"{tpath}.coeff")
            powers.append(pw)
            coeffs.append(coeff)
        pieces.append(PolyPiece(
            lo=lo, hi=hi,
            powers=np.array(powers, dtype=int).reshape(len(powers), n + m),
            coeffs=np.array(coeffs, dtype=float),
            origin=origin,
        ))

    if n == 1:
        spans = sorted((float(p.lo[0]), float(p.hi[0])) for p in pieces)
        reach = spans[0][0]
        if reach > x_lo[0] + 1e-12:
            raise ParseError(f"pieces start at {reach}, after domain start {x_lo[0]}", field=f"{path}.pieces")
        reach = spans[0][1]
        for lo_p, hi_p in spans[1:]:
            if lo_p > reach + 1e-12:
                raise ParseError(f"gap in piece coverage between {reach} and {lo_p}", field=f"{path}.pieces")
            reach = max(reach, hi_p)
        if reach < x_hi[0] - 1e-12:
            raise ParseError(f"pieces end at {reach}, before domain end {x_hi[0]}", field=f"{path}.pieces")

    return PiecewisePolyField(pieces=tuple(pieces), smoothness=smoothness)


def problem_from_dict(data: dict, source: str = "") -> ParametricProblem:
    """
    Build a problem from the parsed problem-file structure.

    Raises:
        ParseError: Missing or malformed fields
    """
    if not isinstance(data, dict):
        raise ParseError("top level must be an object")
    for key in ("name", "n", "m", "k", "x_domain", "g", "h"):
        if key not in data:
            raise ParseError(f"missing required field '{key}'", field=key)
    try:
        n, m, k = int(data["n"]), int(data["m"]), int(data["k"])
    except (TypeError, ValueError):
        raise ParseError("n, m, k must be integers", field="n")
    if n < 1 or m < 1 or k < 0:
        raise ParseError("need n >= 1, m >= 1, k >= 0", field="n")

    dom = np.asarray(data["x_domain"], dtype=float)
    if dom.shape == (2,) and n == 1:
        dom = dom.reshape(1, 2)
    if dom.shape != (n, 2) or np.any(dom[:, 0] > dom[:, 1]):
        raise ParseError(f"x_domain must be {n} [lo, hi] pairs", field="x_domain")
    x_lo, x_hi = dom[:, 0].copy(), dom[:, 1].copy()

    if not isinstance(data["h"], list) or len(data["h"]) != k:
        raise ParseError(f"'h' must list exactly k={k} fields", field="h")

    g = _parse_field(data["g"], n, m, x_lo, x_hi, "g")
    h = tuple(_parse_field(raw, n, m, x_lo, x_hi, f"h[{i}]") for i, raw in enumerate(data["h"]))
    f = _parse_field(data["f"], n, m, x_lo, x_hi, "f") if data.get("f") is not None else None

    if "y_box" in data:
        y_box = np.asarray(data["y_box"], dtype=float)
        if y_box.shape == (2,) and m == 1:
            y_box = y_box.reshape(1, 2)
        if y_box.shape != (m, 2) or np.any(y_box[:, 0] >= y_box[:, 1]):
            raise ParseError(f"y_box must be {m} [lo, hi] pairs", field="y_box")
    else:
        y_box = np.tile([-DEFAULT_Y_HALF_WIDTH, DEFAULT_Y_HALF_WIDTH], (m, 1)).astype(float)

    rho = data.get("slater_margin")
    if rho is not None:
        rho = float(rho)
        if rho <= 0:
            raise ParseError("slater_margin must be positive", field="slater_margin")

    return ParametricProblem(
        name=str(data["name"]), n=n, m=m, k=k, x_lo=x_lo, x_hi=x_hi,
        g=g, h=h, y_box=y_box, slater_margin=rho, f=f,
        description=str(data.get("description", "")), source=source,
    )


def problem_to_dict(problem: ParametricProblem) -> dict:
    """Problem-file structure with any perturbation shifts folded into the fields."""
    n, m = problem.n, problem.m
    g = problem.g
    if problem.b_shift is not None:
        powers = np.zeros((m, n + m), dtype=int)
        powers[np.arange(m), n + np.arange(m)] = 1
        g = g.with_extra_terms(powers, np.asarray(problem.b_shift, dtype=float))
    h = list(problem.h)
    if problem.a_shift is not None:
        h = [
            fld.with_extra_terms(np.zeros((1, n + m), dtype=int), np.array([a]))
            for fld, a in zip(h, problem.a_shift)
        ]
    data = {
        "name": problem.name,
        "n": n, "m": m, "k": problem.k,
        "x_domain": problem.x_domain.tolist(),
        "y_box": problem.y_box.tolist(),
        "g": g.to_dict(n),
        "h": [fld.to_dict(n) for fld in h],
    }
    if problem.slater_margin is not None:
        data["slater_margin"] = problem.slater_margin
    if problem.f is not None:
        data["f"] = problem.f.to_dict(n)
    if problem.description:
        data["description"] = problem.description
    return data


def problem_hash(problem: ParametricProblem) -> str:
    """sha256 of the canonical problem JSON."""
    canonical = json.dumps(problem_to_dict(problem), sort_keys=True, separators=(",", ":"))
    return "sha256:" + hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def save_problem(problem: ParametricProblem, path: str) -> None:
    """Write a problem file that load_problem reads back."""
    with open(path, "w", encoding="utf-8") as f:
        json.dump(problem_to_dict(problem), f, indent=2)


def scale_constraint(problem: ParametricProblem, index: int, c: float) -> ParametricProblem:
    """Problem with h_index multiplied by c > 0 (verdicts must not change)."""
    if c <= 0:
        raise ValueError("scale must be positive")
    h = list(problem.h)
    h[index] = h[index].scaled(c)
    a_shift = None
    if problem.a_shift is not None:
        a_shift = problem.a_shift.copy()
        a_shift[index] *= c
    return replace(problem, h=tuple(h), a_shift=a_shift, name=f"{problem.name}*h{index}x{c:g}")


# =============================================================================
# Validation
# =============================================================================

def _face_points(p: PolyPiece, q: PolyPiece) -> List[np.ndarray]:
    """Sample x points on a face shared by two pieces (empty if none)."""
    n = len(p.lo)
    points = []
    for c in range(n):
        for a, b in ((p, q), (q, p)):
            if abs(a.hi[c] - b.lo[c]) > 1e-12:
                continue
            lo = np.maximum(a.lo, b.lo)
            hi = np.minimum(a.hi, b.hi)
            others = [i for i in range(n) if i != c]
            if any(lo[i] > hi[i] for i in others):
                continue
            choices = [[a.hi[c]] if i == c else sorted({lo[i], 0.5 * (lo[i] + hi[i]), hi[i]})
                       for i in range(n)]
            points.extend(np.array(pt) for pt in product(*choices))
    return points


def check_seams(problem: ParametricProblem, tol: Tolerances = DEFAULT_TOLERANCES) -> None:
    """
    Two-sided evaluation at every shared piece face.

    Raises:
        SeamError: A field jumps in a derivative its smoothness promises
    """
    Y = y_grid(problem.y_box, 3)
    names = ["g"] + [f"h[{i}]" for i in range(problem.k)] + (["f"] if problem.f is not None else [])
    fields = list(problem.fields) + ([problem.f] if problem.f is not None else [])
    for name, fld in zip(names, fields):
        order = SMOOTHNESS_ORDERS[fld.smoothness]
        for i, p in enumerate(fld.pieces):
            for q in fld.pieces[i + 1:]:
                for xf in _face_points(p, q):
                    X = np.repeat(xf[None, :], len(Y), axis=0)
                    left = p.derivatives(X, Y, order)
                    right = q.derivatives(X, Y, order)
                    scale = np.maximum(np.abs(left), np.abs(right))
                    jump = np.abs(left - right)
                    if np.any(jump > tol.seam_tol * (1.0 + scale)):
                        worst = float(np.max(jump))
                        raise SeamError(
                            f"Field {name} of '{problem.name}' declared {fld.smoothness} "
                            f"jumps by {worst:.3e} at x={xf.tolist()}"
                        )


def validate_problem(problem: ParametricProblem, tol: Tolerances = DEFAULT_TOLERANCES) -> None:
    """Seam checks plus a Hessian symmetry check at the box centers."""
    check_seams(problem, tol)
    xc = 0.5 * (problem.x_lo + problem.x_hi)
    yc = problem.y_box.mean(axis=1)
    rec = evaluate(problem, xc, yc, tol)
    hessians = [rec.hess_yy_g] + list(rec.hess_yy_h)
    for i, H in enumerate(hessians):
        if np.max(np.abs(H - H.T), initial=0.0) > 1e-12:
            raise ParseError(f"Hessian of field {i} is not symmetric", field="g" if i == 0 else f"h[{i - 1}]")


def _key_line(text: str, key: str) -> Optional[int]:
    """1-based line of the first '"key":' in text, or None."""
    match = re.search(rf'"{re.escape(key)}"\s*:', text)
    return text.count("\n", 0, match.start()) + 1 if match else None


def _read_problem_file(path: str, source: str) -> ParametricProblem:
    try:
        with open(path, "r", encoding="utf-8") as f:
            text = f.read()
        data = json.loads(text)
    except json.JSONDecodeError as e:
        raise ParseError(e.msg, line=e.lineno)
    except OSError as e:
        raise ParseError(f"cannot read problem file {path}: {e}")
    try:
        return problem_from_dict(data, source=source)
    except ParseError as e:
        if e.line is not None or not e.field:
            raise
        line = _key_line(text, re.split(r"[.\[]", e.field, maxsplit=1)[0])
        if line is None:
            raise
        raise ParseError(e.message, line=line, field=e.field) from e


@functools.lru_cache(maxsize=None)
def _load_corpus_problem(corpus_id: str) -> ParametricProblem:
    from corpus import corpus_path

    problem = _read_problem_file(corpus_path(corpus_id), corpus_id)
    validate_problem(problem)
    if not slater_check(problem):
        raise InfeasibleError(f"Corpus problem '{corpus_id}' fails its declared Slater margin")
    logger.debug(f"Registered corpus problem {corpus_id}")
    return problem


def load_problem(source: str, tol: Tolerances = DEFAULT_TOLERANCES) -> ParametricProblem:
    """
    Load a corpus problem by id or a problem file by path.

    Args:
        source: Corpus id (see list_corpus) or path to a JSON problem file
        tol: Tolerances used by the seam checks

    Returns:
        Validated ParametricProblem

    Raises:
        ParseError: Unknown id, unreadable or malformed file
        SeamError: A field marked C0/C1/C2 jumps at a breakpoint
    """
    from corpus import CORPUS

    if source in CORPUS:
        return _load_corpus_problem(source)
    if not os.path.exists(source):
        raise ParseError(f"'{source}' is neither a corpus id nor a readable problem file")
    problem = _read_problem_file(source, os.path.abspath(source))
    validate_problem(problem, tol)
    return problem


def list_corpus() -> List[Tuple[str, str, List[str]]]:
    """(id, description, expected-outcome tags) for every built-in problem."""
    from corpus import CORPUS

    return [(cid, entry.description, list(entry.tags)) for cid, entry in CORPUS.items()]
