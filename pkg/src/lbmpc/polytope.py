"""H-representation polytope algebra on top of an embedded LP solver.

A polytope is the intersection of half-spaces {x : A x <= b}.  Every set
operation needed by the controller (supports, Pontryagin tightening,
membership, redundancy, emptiness, Chebyshev centers) reduces to small
dense linear programs, solved here by a two-phase primal simplex with
Bland's anti-cycling rule.  No vertex enumeration, no projection.

Tolerances: LP feasibility 1e-8, optimality 1e-9 relative, redundancy
slack 1e-9.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from enum import Enum
from typing import Optional

import numpy as np

log = logging.getLogger(__name__)

FEAS_TOL = 1e-8
OPT_TOL = 1e-9
REDUNDANCY_TOL = 1e-9
_PIVOT_TOL = 1e-9
# Bland's rule cannot cycle, but on heavily degenerate problems (many
# zero-rhs rows) it stalls through long runs of zero-progress pivots; the
# cap is sized so only a genuine breakdown trips it
_MAX_PIVOTS = 500_000
_STALL_LIMIT = 100


class LPStatus(Enum):
    OPTIMAL = "optimal"
    INFEASIBLE = "infeasible"
    UNBOUNDED = "unbounded"


class UnboundedDirection(ValueError):
    """The polytope is unbounded in the queried support direction."""


@dataclass(frozen=True, eq=False)
class LPResult:
    status: LPStatus
    value: float
    point: Optional[np.ndarray]


@dataclass(frozen=True, eq=False)
class HPolytope:
    """Immutable half-space intersection {x in R^d : A x <= b}."""

    A: np.ndarray
    b: np.ndarray

    def __post_init__(self):
        A = np.atleast_2d(np.asarray(self.A, dtype=float)).copy()
        b = np.asarray(self.b, dtype=float).reshape(-1).copy()
        if not (np.all(np.isfinite(A)) and np.all(np.isfinite(b))):
            raise ValueError("polytope data must be finite")
        if A.shape[0] != b.shape[0]:
            raise ValueError("row count mismatch between A and b")
        if A.shape[0] < 1:
            raise ValueError("polytope needs at least one row")
        zero_rows = ~np.any(A != 0.0, axis=1)
        if np.any(zero_rows & (b < 0)):
            log.warning("polytope has an immediately infeasible all-zero row")
        A.setflags(write=False)
        b.setflags(write=False)
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "b", b)

    @property
    def dim(self) -> int:
        return self.A.shape[1]

    @property
    def nrows(self) -> int:
        return self.A.shape[0]

    @staticmethod
    def box(lo, hi) -> "HPolytope":
        """Axis-aligned box {lo <= x <= hi}."""
        lo = np.asarray(lo, dtype=float).reshape(-1)
        hi = np.asarray(hi, dtype=float).reshape(-1)
        if lo.shape != hi.shape:
            raise ValueError("bound shapes differ")
        d = lo.size
        return HPolytope(np.vstack([np.eye(d), -np.eye(d)]), np.concatenate([hi, -lo]))

    def normalized(self) -> "HPolytope":
        """Scale each row to unit Euclidean norm.

        Rows with numerically zero normals are left untouched: dividing
        by a norm like 1e-14 would manufacture astronomically large
        offsets that wreck the scale heuristics of every LP downstream.
        """
        norms = np.linalg.norm(self.A, axis=1)
        scale = np.where(norms > 1e-12, norms, 1.0)
        return HPolytope(self.A / scale[:, None], self.b / scale)

    def without_row(self, index: int) -> "HPolytope":
        keep = [i for i in range(self.nrows) if i != index]
        if not keep:
            raise ValueError("cannot drop the only row")
        return HPolytope(self.A[keep], self.b[keep])

    def cartesian_product_with_origin(self, extra_dims: int) -> "HPolytope":
        """The product S x {0} in R^{d + extra_dims}."""
        k, d = self.A.shape
        A = np.zeros((k + 2 * extra_dims, d + extra_dims))
        A[:k, :d] = self.A
        A[k : k + extra_dims, d:] = np.eye(extra_dims)
        A[k + extra_dims :, d:] = -np.eye(extra_dims)
        b = np.concatenate([self.b, np.zeros(2 * extra_dims)])
        return HPolytope(A, b)

    def to_dict(self) -> dict:
        return {"A": self.A.tolist(), "b": self.b.tolist()}

    @staticmethod
    def from_dict(data: dict) -> "HPolytope":
        return HPolytope(np.array(data["A"], dtype=float), np.array(data["b"], dtype=float))


# ---------------------------------------------------------------------------
# simplex core: min c y  s.t.  T y = rhs, y >= 0, rhs >= 0


def _do_pivot(T, basis, row, col, obj=None):
    T[row] = T[row] / T[row, col]
    coef = T[:, col].copy()
    coef[row] = 0.0
    T -= np.outer(coef, T[row])
    if obj is not None and obj[col] != 0.0:
        obj -= obj[col] * T[row]
    basis[row] = col


def _pivot_loop(T, basis, obj, ncols, opt_tol):
    """Dantzig pivoting with a Bland fallback while degeneracy stalls.

    Dantzig's most-negative rule is fast but can cycle on degenerate
    vertices; after _STALL_LIMIT pivots without objective progress the
    entering rule switches to Bland's first-index rule, which cannot
    cycle, until progress resumes.  Any non-terminating run would have
    to stall forever and therefore end up in the Bland regime, so the
    loop terminates on every input.
    """
    stall = 0
    for _ in range(_MAX_PIVOTS):
        red = obj[:ncols]
        if stall < _STALL_LIMIT:
            enter = int(np.argmin(red))
            if red[enter] >= -opt_tol:
                return LPStatus.OPTIMAL
        else:
            negative = np.where(red < -opt_tol)[0]
            if negative.size == 0:
                return LPStatus.OPTIMAL
            enter = int(negative[0])
        col = T[:, enter]
        usable = col > _PIVOT_TOL
        if not usable.any():
            return LPStatus.UNBOUNDED
        ratios = np.full(T.shape[0], np.inf)
        ratios[usable] = T[usable, -1] / col[usable]
        best = ratios.min()
        ties = np.where(ratios <= best + 1e-9 * max(1.0, abs(best)))[0]
        leave = int(min(ties, key=lambda i: basis[i]))
        # obj[-1] carries the negated objective, so progress raises it
        before = obj[-1]
        _do_pivot(T, basis, leave, enter, obj)
        if obj[-1] > before + 1e-12 * max(1.0, abs(before)):
            stall = 0
        else:
            stall += 1
    raise RuntimeError("simplex pivot limit exceeded")


def _solve_standard(A, rhs, c, feas_tol, opt_tol):
    """Two-phase simplex for min c y s.t. A y = rhs (rhs >= 0), y >= 0.

    Returns (status, y, basis); the basis lists the basic column indices
    so callers can recover dual quantities, degenerate zero-valued basic
    columns included.
    """
    m, n = A.shape
    T = np.empty((m, n + m + 1))
    T[:, :n] = A
    T[:, n : n + m] = np.eye(m)
    T[:, -1] = rhs
    basis = list(range(n, n + m))

    # phase 1: artificial costs are all one, so the reduced objective row
    # is just the negated column sums of the tableau; its tolerance is
    # anchored to those unit costs, not to the caller's cost scale
    obj = np.zeros(n + m + 1)
    obj[n : n + m] = 1.0
    obj -= T.sum(axis=0)
    status = _pivot_loop(T, basis, obj, n + m, OPT_TOL)
    if status is not LPStatus.OPTIMAL or -obj[-1] > feas_tol:
        return LPStatus.INFEASIBLE, None, None
    # drive remaining artificials out of the basis; rows that cannot be
    # pivoted onto a real column are linearly dependent and get dropped
    drop = []
    for i in range(m):
        if basis[i] >= n:
            real = np.where(np.abs(T[i, :n]) > _PIVOT_TOL)[0]
            if real.size:
                _do_pivot(T, basis, i, int(real[0]))
            else:
                drop.append(i)
    if drop:
        keep = [i for i in range(m) if i not in drop]
        T = T[keep]
        basis = [basis[i] for i in keep]

    T = np.hstack([T[:, :n], T[:, -1:]])
    obj = np.concatenate([c, [0.0]])
    for i, bi in enumerate(basis):
        if obj[bi] != 0.0:
            obj = obj - obj[bi] * T[i]
    status = _pivot_loop(T, basis, obj, n, opt_tol)
    if status is LPStatus.UNBOUNDED:
        return LPStatus.UNBOUNDED, None, None
    y = np.zeros(n)
    y[basis] = T[:, -1]
    return LPStatus.OPTIMAL, y, list(basis)


def _solve_lp_primal(c_min: np.ndarray, region: HPolytope) -> LPResult:
    """Primal tableau for min c x over A x <= b with free x split x = xp - xm.

    The basis carries one column per polytope row, so this form is only
    economical when the row count is moderate; solve_lp prefers the dual
    route and falls back here.
    """
    d = region.dim
    sign = np.where(region.b < 0, -1.0, 1.0)
    As = region.A * sign[:, None]
    rhs = region.b * sign
    n_rows = region.nrows
    A_std = np.hstack([As, -As, np.diag(sign)])
    c_std = np.concatenate([c_min, -c_min, np.zeros(n_rows)])
    feas_tol = FEAS_TOL * max(1.0, np.max(np.abs(rhs)) if rhs.size else 1.0)
    opt_tol = OPT_TOL * max(1.0, np.max(np.abs(c_std)))
    status, y, _ = _solve_standard(A_std, rhs, c_std, feas_tol, opt_tol)
    if status is not LPStatus.OPTIMAL:
        return LPResult(status, np.nan, None)
    x = y[:d] - y[d : 2 * d]
    return LPResult(LPStatus.OPTIMAL, float(c_min @ x), x)


def solve_lp(cost: np.ndarray, region: HPolytope, sense: str = "min") -> LPResult:
    """Optimize a linear cost over an H-polytope.

    Solved through the dual min b'y s.t. A'y = c, y >= 0, whose tableau
    height is the space dimension rather than the row count; the primal
    point is recovered from the rows the optimal basis activates.  By
    duality an unbounded dual certifies an infeasible primal, and an
    infeasible dual leaves infeasible-or-unbounded to the Farkas
    emptiness test.  Degenerate recoveries fall back to the primal
    tableau.  The statuses Infeasible and Unbounded are results, not
    errors.
    """
    if sense not in ("min", "max"):
        raise ValueError("sense must be 'min' or 'max'")
    c = np.asarray(cost, dtype=float).reshape(-1)
    d = region.dim
    if c.size != d:
        raise ValueError("cost dimension mismatch")
    c_min = c if sense == "min" else -c
    c_max = -c_min  # the dual below is phrased for max c_max' x
    T = region.A.T.copy()
    rhs = c_max.copy()
    neg = rhs < 0
    T[neg] *= -1.0
    rhs[neg] *= -1.0
    scale_b = max(1.0, float(np.max(np.abs(region.b))))
    feas_tol = FEAS_TOL * max(1.0, float(np.max(np.abs(rhs))) if rhs.size else 1.0)
    status, y, basis = _solve_standard(
        T, rhs, region.b.copy(), feas_tol, OPT_TOL * scale_b
    )
    if status is LPStatus.UNBOUNDED:
        return LPResult(LPStatus.INFEASIBLE, np.nan, None)
    if status is LPStatus.INFEASIBLE:
        if is_empty(region):
            return LPResult(LPStatus.INFEASIBLE, np.nan, None)
        return LPResult(LPStatus.UNBOUNDED, np.nan, None)
    value_max = float(region.b @ y)
    rows = [i for i in basis if i < region.nrows]
    if rows:
        x, *_ = np.linalg.lstsq(region.A[rows], region.b[rows], rcond=None)
        feasible = np.all(region.A @ x <= region.b + FEAS_TOL * scale_b)
        agree = abs(float(c_max @ x) - value_max) <= 1e-7 * max(1.0, abs(value_max))
        if feasible and agree:
            return LPResult(LPStatus.OPTIMAL, float(c @ x), x)
    res = _solve_lp_primal(c_min, region)
    if res.status is LPStatus.OPTIMAL:
        return LPResult(LPStatus.OPTIMAL, float(c @ res.point), res.point)
    return res


# ---------------------------------------------------------------------------
# set operations


def support(S: HPolytope, a: np.ndarray) -> float:
    """Support function h_S(a) = max a'x over S.

    Solved through the dual min b'y s.t. A'y = a, y >= 0, whose tableau
    height is the space dimension rather than the row count; support
    queries against many-row sets (the invariant-set construction) stay
    cheap that way.  A dual-unbounded outcome certifies S is empty; a
    dual-infeasible outcome means no nonnegative row combination points
    along a, i.e. a recession direction of S improves a.
    """
    a = np.asarray(a, dtype=float).reshape(-1)
    if a.size != S.dim:
        raise ValueError("direction dimension mismatch")
    T = S.A.T.copy()
    rhs = a.copy()
    neg = rhs < 0
    T[neg] *= -1.0
    rhs[neg] *= -1.0
    feas_tol = FEAS_TOL * max(1.0, float(np.max(np.abs(rhs))) if rhs.size else 1.0)
    status, y, _ = _solve_standard(T, rhs, S.b.copy(), feas_tol, OPT_TOL)
    if status is LPStatus.OPTIMAL:
        return float(S.b @ y)
    if status is LPStatus.UNBOUNDED:
        raise ValueError("support of an empty set")
    if is_empty(S):
        raise ValueError("support of an empty set")
    raise UnboundedDirection("support direction is unbounded")


def tighten(S: HPolytope, offsets: np.ndarray) -> HPolytope:
    """Rowwise Pontryagin tightening {x : A x <= b - offsets}.

    With offsets_i = h_V(a_i) this is exactly S (-) V for H-polytopes.
    The result may be empty; use is_empty to detect that.
    """
    offsets = np.asarray(offsets, dtype=float).reshape(-1)
    if offsets.size != S.nrows:
        raise ValueError("offsets length must match row count")
    return HPolytope(S.A, S.b - offsets)


def contains(S: HPolytope, x: np.ndarray, tol: float = FEAS_TOL) -> bool:
    """Rowwise membership test A x <= b + tol."""
    x = np.asarray(x, dtype=float).reshape(-1)
    if x.size != S.dim:
        raise ValueError("point dimension mismatch")
    return bool(np.all(S.A @ x <= S.b + tol))


def is_empty(S: HPolytope) -> bool:
    """Farkas-certificate emptiness test.

    {x : A x <= b} is empty iff some y >= 0 with A'y = 0 has b'y < 0.
    Normalizing to sum(y) = 1 compactifies the ray search, so the
    certificate LP has tableau height dim + 1 rather than the row count
    and emptiness stays cheap against many-row sets.  An infeasible
    certificate LP means no ray exists at all, hence a nonempty set.
    """
    T = np.vstack([S.A.T, np.ones((1, S.nrows))])
    rhs = np.zeros(S.dim + 1)
    rhs[-1] = 1.0
    scale = max(1.0, float(np.max(np.abs(S.b))))
    status, y, _ = _solve_standard(T, rhs, S.b.copy(), FEAS_TOL, OPT_TOL * scale)
    if status is LPStatus.OPTIMAL:
        return float(S.b @ y) < -FEAS_TOL * scale
    if status is LPStatus.INFEASIBLE:
        return False
    # unbounded cannot happen on the compact slice sum(y) = 1; fall back
    # to the primal phase-one verdict if the pivoting ever degenerates
    res = solve_lp(np.zeros(S.dim), S, sense="min")
    return res.status is LPStatus.INFEASIBLE


def is_redundant(S: HPolytope, row_index: int) -> bool:
    """True iff dropping the row does not enlarge the set.

    Maximizes the row normal over the remaining rows; the row is
    redundant when that value stays within REDUNDANCY_TOL of its offset.
    An infeasible relaxation makes the row vacuously redundant.
    """
    a = S.A[row_index]
    if S.nrows == 1:
        if not np.any(a != 0.0):
            return S.b[row_index] >= -REDUNDANCY_TOL
        return False
    rest = S.without_row(row_index)
    try:
        value = support(rest, a)
    except UnboundedDirection:
        return False
    except ValueError:
        return True
    return value <= S.b[row_index] + REDUNDANCY_TOL


def box_bounds(S: HPolytope) -> tuple[np.ndarray, np.ndarray]:
    """Extract (lo, hi) from an axis-aligned box polytope.

    Every row must touch exactly one coordinate and every coordinate
    must be bounded on both sides; anything else is rejected.
    """
    d = S.dim
    lo = np.full(d, -np.inf)
    hi = np.full(d, np.inf)
    for a, bound in zip(S.A, S.b):
        nz = np.nonzero(a)[0]
        if nz.size != 1:
            raise ValueError("polytope is not an axis-aligned box")
        j = nz[0]
        if a[j] > 0:
            hi[j] = min(hi[j], bound / a[j])
        else:
            lo[j] = max(lo[j], bound / a[j])
    if not (np.all(np.isfinite(lo)) and np.all(np.isfinite(hi))):
        raise ValueError("box is unbounded")
    if np.any(lo > hi):
        raise ValueError("box is empty")
    return lo, hi


def chebyshev_center(S: HPolytope) -> tuple[np.ndarray, float]:
    """Center and radius of the largest inscribed ball.

    Solved as max r subject to A x + ||a_i|| r <= b, through the dual
    min b'y s.t. [A | 1]' y = e_r, y >= 0 so the tableau height is
    dim + 2 rather than the row count.  The center is recovered from the
    rows the dual certificate activates; if that recovery degenerates,
    the primal LP decides.  The radius is positive exactly when S has
    interior; for an empty S it comes back nonpositive.
    """
    Sn = S.normalized()
    ext_A = np.hstack([Sn.A, np.ones((Sn.nrows, 1))])
    rhs = np.zeros(S.dim + 1)
    rhs[-1] = 1.0
    scale = max(1.0, float(np.max(np.abs(Sn.b))))
    status, y, basis = _solve_standard(
        ext_A.T.copy(), rhs, Sn.b.copy(), FEAS_TOL, OPT_TOL * scale
    )
    if status is LPStatus.INFEASIBLE:
        raise UnboundedDirection("inscribed radius is unbounded")
    if status is LPStatus.OPTIMAL:
        value = float(Sn.b @ y)
        # the center solves the basic rows' equalities, zero-valued
        # (degenerate) basic columns included
        active = [i for i in basis if i < Sn.nrows]
        if active:
            z, *_ = np.linalg.lstsq(ext_A[active], Sn.b[active], rcond=None)
            feasible = np.all(ext_A @ z <= Sn.b + FEAS_TOL * scale)
            if feasible and abs(z[-1] - value) <= 1e-7 * max(1.0, abs(value)):
                return z[:-1], value
    ext = HPolytope(ext_A, Sn.b)
    cost = np.zeros(S.dim + 1)
    cost[-1] = 1.0
    res = solve_lp(cost, ext, sense="max")
    if res.status is LPStatus.UNBOUNDED:
        raise UnboundedDirection("inscribed radius is unbounded")
    if res.status is LPStatus.INFEASIBLE:
        raise RuntimeError("chebyshev LP cannot be infeasible")
    return res.point[:-1], float(res.value)
