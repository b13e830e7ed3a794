"""Terminal set construction and tube tightening offsets.

The terminal set Omega lives in (x, theta) space: x is the nominal
state, theta parametrizes the steady-state manifold x_s = Lambda theta,
u_s = Psi theta.  Omega must satisfy two properties: every point meets
the state/input constraints (constraint satisfaction), and the augmented
map M_aug = [[A+BK, B(Psi-K Lambda)], [0, I]] maps Omega back into
itself under every disturbance from W x {0} (disturbance invariance).
Both are testable by sampling and verified a posteriori on every
computed set.

Tube cross sections R_i = (+)_{j<i} (A+BK)^j W are never materialized:
only their support values in the fixed constraint directions are
accumulated, which is exact for the rowwise Pontryagin tightening.
"""

from __future__ import annotations

import itertools
from collections import deque
from dataclasses import dataclass

import numpy as np

from .numerics import null_space_basis
from .polytope import (
    HPolytope,
    LPStatus,
    UnboundedDirection,
    box_bounds,
    chebyshev_center,
    contains,
    is_empty,
    is_redundant,
    solve_lp,
    support,
)

REDUNDANCY_TOL = 1e-9
# exact minimal representation needs one LP over the full row set per row and
# pass, which turns quadratic for slow-mode problems; above this size the
# cheap subset certificates below are the only pruning applied
EXACT_PRUNE_MAX_ROWS = 600


class EmptyTerminalSet(RuntimeError):
    """Constraint tightening emptied the terminal set."""


@dataclass(frozen=True, eq=False)
class SteadyStateMap:
    """Orthonormal parametrization of the nominal steady states."""

    Lambda: np.ndarray  # p x m
    Psi: np.ndarray  # m x m


def steady_state_map(A: np.ndarray, B: np.ndarray) -> SteadyStateMap:
    """Split null([(I - A), -B]) into the (Lambda, Psi) blocks.

    The null space must be exactly m-dimensional; a larger or smaller
    one means the steady-state manifold is not parametrized by the
    input dimension and is rejected.
    """
    A = np.atleast_2d(np.asarray(A, dtype=float))
    B = np.atleast_2d(np.asarray(B, dtype=float))
    p = A.shape[0]
    m = B.shape[1]
    basis = null_space_basis(np.hstack([np.eye(p) - A, -B]))
    if basis.shape[1] != m:
        raise ValueError(
            f"steady-state null space has dimension {basis.shape[1]}, expected {m}"
        )
    return SteadyStateMap(Lambda=basis[:p, :].copy(), Psi=basis[p:, :].copy())


@dataclass(frozen=True, eq=False)
class TubeOffsets:
    """Support values of the tube cross sections in constraint directions.

    Row i of state_offsets/input_offsets holds h_{R_i} (resp. h_{K R_i})
    of every constraint row, for i = 0..N; terminal_offsets holds
    h_{R_N} of the x-block of every Omega row.
    """

    state_offsets: np.ndarray  # (N+1) x rows(X)
    input_offsets: np.ndarray  # (N+1) x rows(U)
    terminal_offsets: np.ndarray  # rows(omega)


def tube_offsets(
    Acl: np.ndarray,
    K: np.ndarray,
    W: HPolytope,
    X: HPolytope,
    U: HPolytope,
    omega: HPolytope,
    N: int,
) -> TubeOffsets:
    """Accumulate h_{R_i} rowwise for the constraint families.

    Uses h of a Minkowski sum = sum of supports, so
    h_{R_i}(a) = sum_{j<i} h_W((A+BK)^j' a), exactly and without ever
    building R_i.  Requires 0 in W (otherwise the R_i are not nested and
    the offsets lose their monotone meaning) and a Schur-stable Acl.
    """
    Acl = np.atleast_2d(np.asarray(Acl, dtype=float))
    K = np.atleast_2d(np.asarray(K, dtype=float))
    p = Acl.shape[0]
    if np.max(np.abs(np.linalg.eigvals(Acl))) >= 1.0:
        raise ValueError("Acl must be Schur stable")
    if not contains(W, np.zeros(p), tol=1e-12):
        raise ValueError("W must contain the origin")
    if N < 1:
        raise ValueError("horizon must be at least 1")

    kX, kU, kO = X.nrows, U.nrows, omega.nrows
    state = np.zeros((N + 1, kX))
    inputs = np.zeros((N + 1, kU))
    # direction carriers: row r of Dx at stage j is (X row r)' Acl^j
    Dx = X.A.copy()
    Du = U.A @ K
    Do = omega.A[:, :p].copy()
    terminal = np.zeros(kO)
    for i in range(1, N + 1):
        state[i] = state[i - 1] + [support(W, a) for a in Dx]
        inputs[i] = inputs[i - 1] + [support(W, a) for a in Du]
        terminal += [support(W, a) for a in Do]
        Dx = Dx @ Acl
        Du = Du @ Acl
        Do = Do @ Acl

    for i in range(1, N + 1):
        if is_empty(HPolytope(X.A, X.b - state[i])):
            raise ValueError(f"state constraints tightened by R_{i} are empty")
    for i in range(N):
        if is_empty(HPolytope(U.A, U.b - inputs[i])):
            raise ValueError(f"input constraints tightened by K R_{i} are empty")
    shrunk = HPolytope(omega.A, omega.b - terminal)
    if not contains(shrunk, np.zeros(shrunk.dim), tol=0.0) and is_empty(shrunk):
        raise ValueError("terminal set tightened by R_N is empty")
    return TubeOffsets(state, inputs, terminal)


@dataclass(frozen=True, eq=False)
class TerminalSet:
    """Omega plus the tube offsets consumed by the MPC constraint builder."""

    omega: HPolytope
    state_offsets: np.ndarray
    input_offsets: np.ndarray
    terminal_offsets: np.ndarray
    iterations: int
    converged: bool

    def to_dict(self) -> dict:
        return {
            "omega": self.omega.to_dict(),
            "state_offsets": self.state_offsets.tolist(),
            "input_offsets": self.input_offsets.tolist(),
            "terminal_offsets": self.terminal_offsets.tolist(),
            "iterations": self.iterations,
            "converged": self.converged,
            "tolerances": {"redundancy": REDUNDANCY_TOL},
        }

    @staticmethod
    def from_dict(data: dict) -> "TerminalSet":
        return TerminalSet(
            omega=HPolytope.from_dict(data["omega"]),
            state_offsets=np.array(data["state_offsets"], dtype=float),
            input_offsets=np.array(data["input_offsets"], dtype=float),
            terminal_offsets=np.array(data["terminal_offsets"], dtype=float),
            iterations=int(data["iterations"]),
            converged=bool(data["converged"]),
        )


def _base_constraints(K, Lambda, Psi, X, U):
    """Rows of the Eq.-(3)-style base set Y over z = (x, theta)."""
    p = Lambda.shape[0]
    m = Lambda.shape[1]
    blocks_A = [
        np.hstack([X.A, np.zeros((X.nrows, m))]),  # x in X
        np.hstack([np.zeros((X.nrows, p)), X.A @ Lambda]),  # Lambda theta in X
        np.hstack([U.A @ K, U.A @ (Psi - K @ Lambda)]),  # tracking input in U
        np.hstack([np.zeros((U.nrows, p)), U.A @ Psi]),  # Psi theta in U
    ]
    blocks_b = [X.b, X.b, U.b, U.b]
    A = np.vstack(blocks_A)
    b = np.concatenate(blocks_b)
    # a zero row of Lambda or Psi (a coordinate the steady-state manifold
    # pins to zero, like a settled actuator rate) produces a vacuous
    # 0 z <= b row; keeping it would only poison row normalization
    keep = np.linalg.norm(A, axis=1) > 1e-12
    return A[keep], b[keep]


def _row_redundant(P: HPolytope, a: np.ndarray, b: float, slack: float = REDUNDANCY_TOL) -> bool:
    """Candidate row against the running set; empty set means tightening won.

    Raising EmptyTerminalSet here (rather than returning a vacuous True)
    is what surfaces an over-large W during the iteration.
    """
    try:
        value = support(P, a)
    except UnboundedDirection:
        return False
    except ValueError:
        raise EmptyTerminalSet("terminal set emptied by accumulated tightening")
    return value <= b + slack


def _neighbor_prune_pass(
    A_all: np.ndarray,
    b_all: np.ndarray,
    fams: np.ndarray,
    n_base: int,
    window: int = 6,
) -> np.ndarray:
    """One certificate pass: drop rows redundant for a small neighbor subset.

    A row redundant for a subset of the other rows is redundant for all of
    them, so testing against the base rows plus the nearest surviving rows
    of the same family is sound and keeps every LP tiny.  Base rows are
    never dropped here; they anchor the certificates.
    """
    keep = np.ones(len(b_all), dtype=bool)
    base = np.arange(n_base)
    for fam in np.unique(fams[fams >= 0]):
        members = np.where(fams == fam)[0]
        for pos, r in enumerate(members):
            before = [i for i in members[:pos] if keep[i]][-window:]
            after = members[pos + 1 : pos + 1 + window]
            sel = np.concatenate([base, before, after]).astype(int)
            sub = HPolytope(A_all[sel], b_all[sel])
            try:
                if support(sub, A_all[r]) <= b_all[r] + REDUNDANCY_TOL:
                    keep[r] = False
            except UnboundedDirection:
                pass
            except ValueError:
                raise EmptyTerminalSet(
                    "terminal set emptied by accumulated tightening"
                )
    return keep


def compute_terminal_set(
    A: np.ndarray,
    B: np.ndarray,
    K: np.ndarray,
    Lambda: np.ndarray,
    Psi: np.ndarray,
    X: HPolytope,
    U: HPolytope,
    W: HPolytope,
    N: int,
    max_iterations: int = 500,
) -> TerminalSet:
    """Maximal output admissible disturbance invariant set, iteratively.

    Starting from the base constraint family Y, iteration t adds the
    rows (a_r' M_aug^t) z <= b_r - sum_{j<t} h_{W x 0}(M_aug^j' a_r) and
    stops once every row of the next generation is redundant.  A row
    that is redundant for a subset of the accumulated rows is redundant
    for all of them (fewer rows describe a larger set), so candidates
    are tested against a small core of base rows plus each family's most
    recent additions; that keeps the LPs flat while slow closed-loop
    modes contribute thin slivers for hundreds of generations.  Rows the
    core test cannot certify are added even if the full set would prove
    them redundant, and a final pruning pass removes them.  Termination
    at the cap is flagged, not fatal: a truncated set keeps constraint
    satisfaction but its invariance must be re-verified before use (see
    verify_terminal_set).

    Raises EmptyTerminalSet when the accumulated tightening empties the
    set, which happens when W is too large for the constraints.
    """
    A = np.atleast_2d(np.asarray(A, dtype=float))
    B = np.atleast_2d(np.asarray(B, dtype=float))
    K = np.atleast_2d(np.asarray(K, dtype=float))
    p, m = B.shape
    Acl = A + B @ K
    if np.max(np.abs(np.linalg.eigvals(Acl))) >= 1.0:
        raise ValueError("A + BK must be Schur stable")
    M_aug = np.block([[Acl, B @ (Psi - K @ Lambda)], [np.zeros((m, p)), np.eye(m)]])
    W_aug = W.cartesian_product_with_origin(m)

    Y_A, Y_b = _base_constraints(K, Lambda, Psi, X, U)
    P = HPolytope(Y_A, Y_b)
    if is_empty(P):
        raise EmptyTerminalSet("base constraint set is empty")

    C = Y_A.copy()  # generation-t row normals (a_r' M_aug^t)
    sigma = np.zeros(Y_b.shape)  # accumulated disturbance supports
    iterations = max_iterations
    converged = False
    rows_A: list[np.ndarray] = list(Y_A)
    rows_b: list[float] = list(Y_b)
    families: list[int] = [-1] * Y_A.shape[0]
    recent: dict[int, deque] = {r: deque(maxlen=3) for r in range(Y_A.shape[0])}

    def core() -> HPolytope:
        extra = [row for dq in recent.values() for row in dq]
        if not extra:
            return HPolytope(Y_A, Y_b)
        A_extra = np.array([a for a, _ in extra])
        b_extra = np.array([bb for _, bb in extra])
        return HPolytope(np.vstack([Y_A, A_extra]), np.concatenate([Y_b, b_extra]))

    for t in range(1, max_iterations + 1):
        sigma = sigma + np.array([support(W_aug, a) for a in C])
        C = C @ M_aug
        d = Y_b - sigma
        added_any = False
        Pc = core()
        for r in range(C.shape[0]):
            if _row_redundant(Pc, C[r], d[r]):
                continue
            rows_A.append(C[r].copy())
            rows_b.append(float(d[r]))
            families.append(r)
            recent[r].append((C[r].copy(), float(d[r])))
            added_any = True
            Pc = core()
        if not added_any:
            iterations = t - 1
            converged = True
            break
    A_all = np.array(rows_A)
    b_all = np.array(rows_b)
    fam_all = np.array(families)
    P = HPolytope(A_all, b_all)
    # the equilibrium z = 0 is a free nonemptiness witness; the LP only
    # runs when tightening has pushed some row past the origin
    if not contains(P, np.zeros(P.dim), tol=0.0) and is_empty(P):
        raise EmptyTerminalSet("terminal set emptied by accumulated tightening")

    # cheap certificate prune to a fixpoint: slivers superseded by their own
    # family's later rows disappear without any LP over the full row set
    while True:
        keep = _neighbor_prune_pass(A_all, b_all, fam_all, Y_A.shape[0])
        if keep.all():
            break
        A_all, b_all, fam_all = A_all[keep], b_all[keep], fam_all[keep]
    P = HPolytope(A_all, b_all)

    # exact prune: removing a redundant row never changes the set; repeat
    # until a full pass removes nothing so borderline verdicts settle
    if P.nrows <= EXACT_PRUNE_MAX_ROWS:
        while True:
            removed = False
            r = 0
            while r < P.nrows:
                if P.nrows > 1 and is_redundant(P, r):
                    P = P.without_row(r)
                    removed = True
                else:
                    r += 1
            if not removed:
                break

    P = P.normalized()  # unit row norms condition the downstream QP
    off = tube_offsets(Acl, K, W, X, U, P, N)
    return TerminalSet(
        omega=P,
        state_offsets=off.state_offsets,
        input_offsets=off.input_offsets,
        terminal_offsets=off.terminal_offsets,
        iterations=iterations,
        converged=converged,
    )


# ---------------------------------------------------------------------------
# sampling-based verification


def sample_polytope(P: HPolytope, n: int, seed: int = 0) -> np.ndarray:
    """Deterministic interior samples by ray shooting from the center.

    Draws random directions from the Chebyshev center, walks to the
    boundary, scales back by a uniform factor, then mixes random pairs
    with random convex weights for better coverage of the interior.
    """
    center, _ = chebyshev_center(P)
    rng = np.random.default_rng(seed)
    d = P.dim
    pts = np.empty((n, d))
    slack = P.b - P.A @ center
    for i in range(n):
        g = rng.standard_normal(d)
        g /= np.linalg.norm(g)
        rates = P.A @ g
        hit = rates > 1e-12
        t_max = np.min(slack[hit] / rates[hit]) if np.any(hit) else 0.0
        pts[i] = center + rng.uniform() * t_max * g
    for i in range(0, n - 1, 2):
        lam = rng.uniform()
        j, k = rng.integers(0, n, size=2)
        pts[i] = lam * pts[j] + (1.0 - lam) * pts[k]
    return pts


def _box_vertices_of(P: HPolytope) -> np.ndarray:
    """Vertices of an axis-aligned box polytope (rows must be +-e_i)."""
    lo, hi = box_bounds(P)
    return np.array(list(itertools.product(*zip(lo, hi))))


@dataclass(frozen=True)
class TerminalSetReport:
    n_samples: int
    constraint_violations: int
    invariance_violations: int

    @property
    def ok(self) -> bool:
        return self.constraint_violations == 0 and self.invariance_violations == 0


def verify_terminal_set(
    terminal: TerminalSet,
    A: np.ndarray,
    B: np.ndarray,
    K: np.ndarray,
    Lambda: np.ndarray,
    Psi: np.ndarray,
    X: HPolytope,
    U: HPolytope,
    W: HPolytope,
    n_samples: int = 1000,
    seed: int = 0,
    tol: float = 1e-8,
) -> TerminalSetReport:
    """Sample Omega and test the two defining set inclusions.

    Constraint satisfaction: every z = (x, theta) keeps x in X,
    Lambda theta in X, Kx + (Psi - K Lambda) theta in U, Psi theta in U.
    Disturbance invariance: M_aug z + (w, 0) stays in Omega for every
    vertex w of the disturbance box.
    """
    A = np.atleast_2d(np.asarray(A, dtype=float))
    B = np.atleast_2d(np.asarray(B, dtype=float))
    K = np.atleast_2d(np.asarray(K, dtype=float))
    p, m = B.shape
    Acl = A + B @ K
    M_aug = np.block([[Acl, B @ (Psi - K @ Lambda)], [np.zeros((m, p)), np.eye(m)]])
    w_verts = _box_vertices_of(W)
    pts = sample_polytope(terminal.omega, n_samples, seed=seed)

    bad_constraint = 0
    bad_invariance = 0
    for z in pts:
        x, theta = z[:p], z[p:]
        sat = (
            contains(X, x, tol)
            and contains(X, Lambda @ theta, tol)
            and contains(U, K @ x + (Psi - K @ Lambda) @ theta, tol)
            and contains(U, Psi @ theta, tol)
        )
        if not sat:
            bad_constraint += 1
        z_next = M_aug @ z
        for w in w_verts:
            pushed = z_next + np.concatenate([w, np.zeros(m)])
            if not contains(terminal.omega, pushed, tol):
                bad_invariance += 1
                break
    return TerminalSetReport(n_samples, bad_constraint, bad_invariance)
