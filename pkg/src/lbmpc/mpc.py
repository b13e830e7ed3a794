"""Per-step control program: tube constraints on the nominal model, cost
on the learned model.

Decision variables are the N feedforward corrections c_i and the
steady-state parameter theta.  Both model rollouts share the same input
sequence u_i = K xbar_i + c_i, so the constraint polytope over (c, theta)
is affine in the measured state and independent of the oracle.  With a
zero oracle the program is a strictly convex QP solved exactly by an
active-set method; a nonlinear oracle is handled by SQP with damped BFGS
curvature and an Armijo backtracking line search.
"""

import dataclasses
import functools
import time
from enum import Enum
from typing import Optional

import numpy as np

from .numerics import solve_discrete_lyapunov
from .oracle import OracleKind, OracleState, oracle_jacobian, oracle_value
from .polytope import (
    HPolytope,
    LPStatus,
    UnboundedDirection,
    chebyshev_center,
    contains,
    solve_lp,
)
from .invariant import TerminalSet

CONSTRAINT_TOL = 1e-6
QP_KKT_TOL = 1e-8
SQP_KKT_TOL = 1e-6
ARMIJO_C1 = 1e-4
BACKTRACK = 0.5


class MPCStatus(Enum):
    OPTIMAL = "Optimal"
    FALLBACK_FEASIBLE = "FallbackFeasible"
    INFEASIBLE = "Infeasible"


class _QPFailure(RuntimeError):
    """Active-set iteration limit or a singular working-set system."""


@dataclasses.dataclass(frozen=True, eq=False)
class DecisionPoint:
    """Feedforward sequence c (N x m) and steady-state parameter theta (m,)."""

    c: np.ndarray
    theta: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "c", np.atleast_2d(np.asarray(self.c, dtype=float)))
        object.__setattr__(
            self, "theta", np.asarray(self.theta, dtype=float).reshape(-1)
        )


@dataclasses.dataclass(frozen=True, eq=False)
class MPCSolution:
    point: Optional[DecisionPoint]
    u_apply: Optional[np.ndarray]
    cost_value: float
    status: MPCStatus
    iterations: int
    solve_time: float


@dataclasses.dataclass(frozen=True, eq=False)
class ControllerConfig:
    """Everything a single controller instance needs, fixed over a run."""

    A: np.ndarray
    B: np.ndarray
    K: np.ndarray
    N: int
    Q: np.ndarray
    R: np.ndarray
    T_w: np.ndarray
    P: np.ndarray
    X: HPolytope
    U: HPolytope
    W: HPolytope
    terminal: TerminalSet
    Lambda: np.ndarray
    Psi: np.ndarray
    theta_ref: np.ndarray
    x_target: np.ndarray
    constraint_tol: float = CONSTRAINT_TOL
    qp_kkt_tol: float = QP_KKT_TOL
    sqp_kkt_tol: float = SQP_KKT_TOL
    armijo_c1: float = ARMIJO_C1
    backtrack: float = BACKTRACK
    max_sqp_iterations: int = 50


def _symmetric_pd(name: str, M: np.ndarray) -> np.ndarray:
    M = np.atleast_2d(np.asarray(M, dtype=float))
    if not np.allclose(M, M.T, atol=1e-12):
        raise ValueError(f"{name} must be symmetric")
    if np.min(np.linalg.eigvalsh(M)) <= 0:
        raise ValueError(f"{name} must be positive definite")
    return M


def make_controller_config(
    A,
    B,
    K,
    N,
    Q,
    R,
    T_w,
    X,
    U,
    W,
    terminal,
    Lambda,
    Psi,
    theta_ref=None,
    x_target=None,
    **tolerances,
) -> ControllerConfig:
    """Validate the ingredients and solve for the terminal weight P.

    P satisfies (A+BK)' P (A+BK) - P = -(Q + K'RK); the residual of that
    identity is checked to 1e-10.  A+BK must be Schur stable and the
    weights symmetric positive definite.
    """
    A = np.atleast_2d(np.asarray(A, dtype=float))
    B = np.atleast_2d(np.asarray(B, dtype=float))
    K = np.atleast_2d(np.asarray(K, dtype=float))
    Q = _symmetric_pd("Q", Q)
    R = _symmetric_pd("R", R)
    T_w = _symmetric_pd("T_w", T_w)
    if N < 1:
        raise ValueError("horizon N must be at least 1")
    Acl = A + B @ K
    P = solve_discrete_lyapunov(Acl, Q + K.T @ R @ K)
    resid = Acl.T @ P @ Acl - P + (Q + K.T @ R @ K)
    if np.max(np.abs(resid)) > 1e-10:
        raise ValueError("terminal weight P fails the Lyapunov identity")
    Lambda = np.atleast_2d(np.asarray(Lambda, dtype=float))
    Psi = np.atleast_2d(np.asarray(Psi, dtype=float))
    m = B.shape[1]
    if theta_ref is None and x_target is None:
        theta_ref = np.zeros(m)
    if theta_ref is None:
        theta_ref, *_ = np.linalg.lstsq(Lambda, np.asarray(x_target, float), rcond=None)
    theta_ref = np.asarray(theta_ref, dtype=float).reshape(-1)
    if x_target is None:
        x_target = Lambda @ theta_ref
    x_target = np.asarray(x_target, dtype=float).reshape(-1)
    return ControllerConfig(
        A=A,
        B=B,
        K=K,
        N=int(N),
        Q=Q,
        R=R,
        T_w=T_w,
        P=P,
        X=X,
        U=U,
        W=W,
        terminal=terminal,
        Lambda=Lambda,
        Psi=Psi,
        theta_ref=theta_ref,
        x_target=x_target,
        **tolerances,
    )


# ---------------------------------------------------------------------------
# rollouts and cost


def rollout_nominal(x_n, point: DecisionPoint, config: ControllerConfig):
    """Propagate xbar_{i+1} = A xbar_i + B (K xbar_i + c_i) from x_n.

    Returns (xbar, ucheck) with shapes (N+1, p) and (N, m).
    """
    x = np.asarray(x_n, dtype=float).reshape(-1)
    N = config.N
    m = config.B.shape[1]
    xbar = np.empty((N + 1, x.size))
    ucheck = np.empty((N, m))
    xbar[0] = x
    for i in range(N):
        ucheck[i] = config.K @ xbar[i] + point.c[i]
        xbar[i + 1] = config.A @ xbar[i] + config.B @ ucheck[i]
    return xbar, ucheck


def rollout_learned(x_n, point: DecisionPoint, oracle: OracleState, config):
    """Propagate the oracle-corrected model under the nominal input sequence."""
    x = np.asarray(x_n, dtype=float).reshape(-1)
    _, ucheck = rollout_nominal(x, point, config)
    xtilde = np.empty((config.N + 1, x.size))
    xtilde[0] = x
    for i in range(config.N):
        xtilde[i + 1] = (
            config.A @ xtilde[i]
            + config.B @ ucheck[i]
            + oracle_value(oracle, xtilde[i], ucheck[i])
        )
    return xtilde


def cost(point: DecisionPoint, xtilde, ucheck, config: ControllerConfig) -> float:
    """Tracking cost around the parameterized steady state (Lambda t, Psi t)."""
    lam_t = config.Lambda @ point.theta
    psi_t = config.Psi @ point.theta
    dx = xtilde[: config.N] - lam_t
    du = ucheck - psi_t
    total = np.einsum("ij,jk,ik->", dx, config.Q, dx)
    total += np.einsum("ij,jk,ik->", du, config.R, du)
    dN = xtilde[config.N] - lam_t
    total += dN @ config.P @ dN
    ds = config.x_target - lam_t
    total += ds @ config.T_w @ ds
    return float(total)


# ---------------------------------------------------------------------------
# affine structure over the stacked decision vector v = (c_0..c_{N-1}, theta)


@functools.lru_cache(maxsize=16)
def _affine_maps(config: ControllerConfig):
    """Dense maps xbar_i = Fx[i] x + Gc[i] c and ucheck_i = Fu[i] x + Gu[i] c."""
    p = config.A.shape[0]
    m = config.B.shape[1]
    N = config.N
    Acl = config.A + config.B @ config.K
    Fx = np.empty((N + 1, p, p))
    Gc = np.zeros((N + 1, p, N * m))
    Fu = np.empty((N, m, p))
    Gu = np.zeros((N, m, N * m))
    Fx[0] = np.eye(p)
    for i in range(N):
        Fu[i] = config.K @ Fx[i]
        Gu[i] = config.K @ Gc[i]
        Gu[i][:, i * m : (i + 1) * m] += np.eye(m)
        Fx[i + 1] = Acl @ Fx[i]
        Gc[i + 1] = Acl @ Gc[i]
        Gc[i + 1][:, i * m : (i + 1) * m] += config.B
    return Fx, Gc, Fu, Gu


def _pack(point: DecisionPoint) -> np.ndarray:
    return np.concatenate([point.c.ravel(), point.theta])


def _unpack(v: np.ndarray, config: ControllerConfig) -> DecisionPoint:
    m = config.B.shape[1]
    return DecisionPoint(c=v[: config.N * m].reshape(config.N, m), theta=v[config.N * m :])


def quadratic_cost_matrices(x_n, config: ControllerConfig):
    """Zero-oracle cost as v' H v + f' v + const over v = (c, theta)."""
    x = np.asarray(x_n, dtype=float).reshape(-1)
    Fx, Gc, Fu, Gu = _affine_maps(config)
    m = config.B.shape[1]
    N = config.N
    n_v = N * m + m
    H = np.zeros((n_v, n_v))
    f = np.zeros(n_v)
    const = 0.0

    def accumulate(Gpart, col_map, r0, Wt):
        # residual M v + r0 with M = [Gpart, col_map]
        M = np.hstack([Gpart, col_map])
        WM = Wt @ M
        nonlocal const
        H_local = M.T @ WM
        H[:, :] += H_local
        f[:] += 2.0 * (WM.T @ r0)
        const += r0 @ Wt @ r0

    for i in range(N):
        accumulate(Gc[i], -config.Lambda, Fx[i] @ x, config.Q)
        accumulate(Gu[i], -config.Psi, Fu[i] @ x, config.R)
    accumulate(Gc[N], -config.Lambda, Fx[N] @ x, config.P)
    accumulate(np.zeros((x.size, N * m)), -config.Lambda, config.x_target, config.T_w)
    H = 0.5 * (H + H.T)
    return H, f, float(const)


def cost_gradient(x_n, point: DecisionPoint, oracle: OracleState, config):
    """Exact gradient of the learned-model cost in (c, theta).

    Sensitivities of the learned states follow
    xtilde_{i+1}' = (A + dO/dx) xtilde_i' + (B + dO/du) ucheck_i',
    with the input sensitivities taken from the nominal rollout.
    """
    x = np.asarray(x_n, dtype=float).reshape(-1)
    p = x.size
    m = config.B.shape[1]
    N = config.N
    n_v = N * m + m
    _, ucheck = rollout_nominal(x, point, config)
    lam_t = config.Lambda @ point.theta
    psi_t = config.Psi @ point.theta

    Th = np.zeros((m, n_v))
    Th[:, N * m :] = np.eye(m)
    DLam = config.Lambda @ Th
    DPsi = config.Psi @ Th

    grad = np.zeros(n_v)
    Dxb = np.zeros((p, n_v))  # nominal state sensitivity
    Dxt = np.zeros((p, n_v))  # learned state sensitivity
    xt = x.copy()
    Acl = config.A + config.B @ config.K
    for i in range(N):
        Du = config.K @ Dxb
        Du[:, i * m : (i + 1) * m] += np.eye(m)
        grad += 2.0 * (config.Q @ (xt - lam_t)) @ (Dxt - DLam)
        grad += 2.0 * (config.R @ (ucheck[i] - psi_t)) @ (Du - DPsi)
        J = oracle_jacobian(oracle, xt, ucheck[i])
        o = oracle_value(oracle, xt, ucheck[i])
        Dxt = (config.A + J[:, :p]) @ Dxt + (config.B + J[:, p:]) @ Du
        xt = config.A @ xt + config.B @ ucheck[i] + o
        Dxb = Acl @ Dxb
        Dxb[:, i * m : (i + 1) * m] += config.B
    grad += 2.0 * (config.P @ (xt - lam_t)) @ (Dxt - DLam)
    grad += 2.0 * (config.T_w @ (config.x_target - lam_t)) @ (-DLam)
    return grad


# ---------------------------------------------------------------------------
# constraints


@functools.lru_cache(maxsize=16)
def _constraint_template(config: ControllerConfig):
    """State-independent parts: A_v v <= b0 - Bx x_n."""
    Fx, Gc, Fu, Gu = _affine_maps(config)
    p = config.A.shape[0]
    m = config.B.shape[1]
    N = config.N
    n_v = N * m + m
    term = config.terminal
    rows_A = []
    rows_b0 = []
    rows_Bx = []
    for k in range(1, N + 1):
        block = np.zeros((config.X.nrows, n_v))
        block[:, : N * m] = config.X.A @ Gc[k]
        rows_A.append(block)
        rows_b0.append(config.X.b - term.state_offsets[k])
        rows_Bx.append(config.X.A @ Fx[k])
    for i in range(N):
        block = np.zeros((config.U.nrows, n_v))
        block[:, : N * m] = config.U.A @ Gu[i]
        rows_A.append(block)
        rows_b0.append(config.U.b - term.input_offsets[i])
        rows_Bx.append(config.U.A @ Fu[i])
    Wx = term.omega.A[:, :p]
    Wt = term.omega.A[:, p:]
    block = np.zeros((term.omega.nrows, n_v))
    block[:, : N * m] = Wx @ Gc[N]
    block[:, N * m :] = Wt
    rows_A.append(block)
    rows_b0.append(term.omega.b - term.terminal_offsets)
    rows_Bx.append(Wx @ Fx[N])
    return np.vstack(rows_A), np.concatenate(rows_b0), np.vstack(rows_Bx)


def build_constraints(x_n, config: ControllerConfig) -> HPolytope:
    """Feasible set of (c, theta): tightened state, input, and terminal rows.

    Only the right-hand side depends on the measured state.
    """
    x = np.asarray(x_n, dtype=float).reshape(-1)
    A_v, b0, Bx = _constraint_template(config)
    return HPolytope(A_v, b0 - Bx @ x)


# ---------------------------------------------------------------------------
# QP: primal active-set for strictly convex objectives


def _polish_qp(H2, f, A, b, v, working, u, viol_tol, iters):
    """Re-solve the final working-set KKT system in one shot.

    The incremental dual updates accumulate roundoff that is visible
    against a large linear term, so the returned stationarity residual
    would scale with ||f||; one direct solve removes it.  Falls back to
    the iterates when the polished point drifts infeasible.
    """
    if not working:
        return v, working, u, iters
    k = len(working)
    n = f.size
    Aw = A[working]
    KKT = np.zeros((n + k, n + k))
    KKT[:n, :n] = H2
    KKT[:n, n:] = Aw.T
    KKT[n:, :n] = Aw
    rhs = np.concatenate([-f, b[working]])
    try:
        sol = np.linalg.solve(KKT, rhs)
    except np.linalg.LinAlgError:
        sol, *_ = np.linalg.lstsq(KKT, rhs, rcond=None)
    v_new, u_new = sol[:n], sol[n:]
    if (
        np.all(np.isfinite(v_new))
        and float(np.max(A @ v_new - b)) <= viol_tol
        and (u_new.size == 0 or float(u_new.min()) >= -1e-9)
    ):
        return v_new, working, u_new, iters
    return v, working, u, iters


def _solve_qp(H2, f, A, b, v0=None, max_iter=None):
    """Minimize 0.5 v'H2 v + f'v over A v <= b (dual active-set).

    Goldfarb-Idnani iteration: start at the unconstrained minimum and
    add the most violated row, taking dual steps that drop blocking
    rows along the way.  No feasible starting point is needed, and a
    violated row that is dependent on the working set resolves through
    a pure dual step instead of a singular KKT system, which matters
    here because tightened terminal rows come in near-parallel bundles.
    v0 is ignored (kept for call-site symmetry).
    Returns (v, working_set, multipliers, iterations).
    """
    n = f.size
    nrows = len(b)
    if max_iter is None:
        max_iter = 5 * nrows + 50 * n + 100
    Ginv = np.linalg.inv(H2)
    v = -(Ginv @ f)
    working: list[int] = []
    u = np.empty(0)
    viol_tol = 1e-10 * max(1.0, float(np.linalg.norm(b, np.inf)))
    it = 0
    while it < max_iter:
        slack = A @ v - b
        p = int(np.argmax(slack))
        if slack[p] <= viol_tol:
            return _polish_qp(H2, f, A, b, v, working, u, viol_tol, it + 1)
        a_hat = -A[p]
        u_p = 0.0
        while it < max_iter:
            it += 1
            Gn = Ginv @ a_hat
            if working:
                Nw = A[working].T  # n x k, columns -a_hat_i
                M = Nw.T @ Ginv @ Nw
                try:
                    r = np.linalg.solve(M, -(Nw.T @ Gn))
                except np.linalg.LinAlgError:
                    r, *_ = np.linalg.lstsq(M, -(Nw.T @ Gn), rcond=None)
                if not np.all(np.isfinite(r)):
                    raise _QPFailure("working-set system is numerically singular")
                z = Gn + Ginv @ (Nw @ r)
            else:
                r = np.empty(0)
                z = Gn
            znorm = float(np.linalg.norm(z, np.inf))
            # a_hat' z = || z ||_G^2 of the projected direction; guard the
            # ratio so a denormal denominator cannot overflow into inf/NaN
            denom = float(a_hat @ z) if znorm > 1e-11 else 0.0
            if denom > 0.0 and slack[p] < denom * 1e300:
                t2 = slack[p] / denom
            else:
                t2 = np.inf
            t1 = np.inf
            blocker = -1
            for j in range(len(working)):
                if r[j] > 1e-13:
                    ratio = u[j] / r[j]
                    if ratio < t1:
                        t1 = ratio
                        blocker = j
            t = min(t1, t2)
            if not np.isfinite(t):
                raise _QPFailure("dual step unbounded: constraints inconsistent")
            if t2 < np.inf:
                v = v + t * z
                slack[p] = float(A[p] @ v - b[p])
            u = u - t * r
            u_p += t
            if t2 <= t1:
                working.append(p)
                u = np.append(u, u_p)
                break
            working.pop(blocker)
            u = np.delete(u, blocker)
    raise _QPFailure(f"dual active-set iteration limit ({max_iter}) exceeded")


def _qp_kkt_residual(H2, f, A, v, working, mu):
    g = H2 @ v + f
    if working:
        g = g + A[working].T @ mu
    return float(np.linalg.norm(g, np.inf))


# ---------------------------------------------------------------------------
# SQP for nonlinear oracles


def _cost_at(v, x, oracle, config):
    point = _unpack(v, config)
    xt = rollout_learned(x, point, oracle, config)
    _, uc = rollout_nominal(x, point, config)
    return cost(point, xt, uc, config)


def _solve_sqp(x, oracle, config, v0, A, b):
    """Majorize-and-step loop; returns (v, converged, majors)."""
    v = v0.copy()
    Bh, _, _ = quadratic_cost_matrices(x, config)
    Bh = 2.0 * Bh  # positive definite curvature seed
    phi = _cost_at(v, x, oracle, config)
    g = cost_gradient(x, _unpack(v, config), oracle, config)
    majors = 0
    for majors in range(1, config.max_sqp_iterations + 1):
        r = np.maximum(b - A @ v, 0.0)
        try:
            d, working, mu, _ = _solve_qp(Bh, g, A, r)
        except _QPFailure:
            return v, False, majors
        kkt = _qp_kkt_residual(Bh, g, A, d, working, mu) + np.linalg.norm(
            Bh @ d, np.inf
        )
        if np.linalg.norm(d, np.inf) <= 1e-10 and kkt <= config.sqp_kkt_tol:
            return v, True, majors
        slope = g @ d
        if slope >= -1e-14 * max(1.0, abs(phi)):
            # the quadratic model sees no descent: accept v as stationary
            return v, kkt <= config.sqp_kkt_tol, majors
        alpha = 1.0
        accepted = False
        while alpha >= 1e-10:
            v_new = v + alpha * d
            phi_new = _cost_at(v_new, x, oracle, config)
            if phi_new <= phi + config.armijo_c1 * alpha * slope:
                accepted = True
                break
            alpha *= config.backtrack
        if not accepted:
            return v, False, majors
        g_new = cost_gradient(x, _unpack(v_new, config), oracle, config)
        s = v_new - v
        y = g_new - g
        sBs = s @ Bh @ s
        sy = s @ y
        if sBs > 0:
            if sy < 0.2 * sBs:  # damped update keeps Bh positive definite
                tau = 0.8 * sBs / (sBs - sy)
                y = tau * y + (1.0 - tau) * (Bh @ s)
                sy = s @ y
            Bs = Bh @ s
            Bh = Bh - np.outer(Bs, Bs) / sBs + np.outer(y, y) / sy
            Bh = 0.5 * (Bh + Bh.T)
        v, phi, g = v_new, phi_new, g_new
    g_final = g
    return v, float(np.linalg.norm(g_final, np.inf)) <= config.sqp_kkt_tol, majors


# ---------------------------------------------------------------------------
# top-level solve


def _repair_point(poly, v, tol):
    """Push a barely infeasible point back inside via its violated rows.

    A shifted warm start sits on the previous active set, so a handful of
    rows stick out by roundoff; the minimum-norm correction on those rows
    (plus a small interior offset) rescues it without touching the LP.
    """
    for _ in range(3):
        slack = poly.A @ v - poly.b
        bad = np.flatnonzero(slack > -1e-12)
        if slack.max() <= -1e-12:
            return v
        Ab = poly.A[bad]
        target = slack[bad] + 1e-10
        step, *_ = np.linalg.lstsq(Ab, target, rcond=None)
        v = v - step
    return v if contains(poly, v, tol=tol) else None


def _initial_point(poly, warm_start, config):
    """Feasible start: warm start, cheap guesses, then a Chebyshev center.

    The center LP runs in the dual, so its cost scales with the decision
    dimension rather than the row count; a plain feasibility LP over
    thousands of tightened rows is far slower.
    """
    candidates = []
    if warm_start is not None:
        candidates.append(_pack(warm_start))
    n_v = poly.dim
    candidates.append(np.zeros(n_v))
    guess = np.zeros(n_v)
    guess[config.N * config.B.shape[1] :] = config.theta_ref
    candidates.append(guess)
    for v in candidates:
        if contains(poly, v, tol=1e-9):
            return v
    if warm_start is not None:
        v = _repair_point(poly, _pack(warm_start), 1e-9)
        if v is not None:
            return v
    try:
        center, radius = chebyshev_center(poly)
    except (UnboundedDirection, ValueError):
        return None
    if radius < 0 or not contains(poly, center, tol=1e-9):
        return None
    return center


def solve(
    x_n,
    oracle: OracleState,
    config: ControllerConfig,
    warm_start: Optional[DecisionPoint] = None,
    method: str = "auto",
) -> MPCSolution:
    """Solve the per-step program and return the applied input.

    method: "auto" picks the exact QP for a zero oracle and SQP
    otherwise; "qp" and "sqp" force a path (the QP path requires a
    zero oracle).
    """
    t0 = time.perf_counter()
    x = np.asarray(x_n, dtype=float).reshape(-1)
    poly = build_constraints(x, config)
    v0 = _initial_point(poly, warm_start, config)
    if v0 is None:
        return MPCSolution(
            point=None,
            u_apply=None,
            cost_value=float("nan"),
            status=MPCStatus.INFEASIBLE,
            iterations=0,
            solve_time=time.perf_counter() - t0,
        )
    if method == "auto":
        method = "qp" if oracle.kind is OracleKind.ZERO else "sqp"
    if method == "qp" and oracle.kind is not OracleKind.ZERO:
        raise ValueError("the exact QP path applies only to the zero oracle")

    status = MPCStatus.FALLBACK_FEASIBLE
    v = v0
    iterations = 0
    if method == "qp":
        H, f, _ = quadratic_cost_matrices(x, config)
        try:
            v_opt, working, mu, iterations = _solve_qp(2.0 * H, f, poly.A, poly.b, v0)
            kkt = _qp_kkt_residual(2.0 * H, f, poly.A, v_opt, working, mu)
            if kkt <= config.qp_kkt_tol and contains(
                poly, v_opt, tol=config.constraint_tol
            ):
                v, status = v_opt, MPCStatus.OPTIMAL
        except _QPFailure:
            pass
    else:
        # The oracle only perturbs the quadratic cost, so the exact
        # zero-oracle optimum is a far better SQP seed than a bare
        # feasible point (a Chebyshev center applies near-arbitrary
        # inputs whenever the line search quits early).
        H, f, _ = quadratic_cost_matrices(x, config)
        try:
            v_qp, _, _, _ = _solve_qp(2.0 * H, f, poly.A, poly.b)
            if contains(poly, v_qp, tol=config.constraint_tol):
                v0 = v_qp
        except _QPFailure:
            pass
        v_opt, converged, iterations = _solve_sqp(x, oracle, config, v0, poly.A, poly.b)
        if contains(poly, v_opt, tol=config.constraint_tol):
            v = v_opt
            status = MPCStatus.OPTIMAL if converged else MPCStatus.FALLBACK_FEASIBLE
        elif contains(poly, v0, tol=config.constraint_tol):
            v = v0

    point = _unpack(v, config)
    value = _cost_at(v, x, oracle, config)
    u = config.K @ x + point.c[0]
    return MPCSolution(
        point=point,
        u_apply=u,
        cost_value=value,
        status=status,
        iterations=iterations,
        solve_time=time.perf_counter() - t0,
    )


def control_law(x_n, solution: MPCSolution, K) -> np.ndarray:
    """Applied input u = K x_n + c_0 from a non-infeasible solution."""
    if solution.point is None:
        raise ValueError("no input available from an infeasible solution")
    return np.atleast_2d(np.asarray(K, float)) @ np.asarray(x_n, float).reshape(
        -1
    ) + solution.point.c[0]


def shift_warm_start(
    previous: DecisionPoint, terminal_gain: Optional[np.ndarray] = None
) -> DecisionPoint:
    """One-step shift: drop c_0, append the terminal tail, keep theta.

    With terminal_gain G the appended correction is G theta, which keeps
    the shifted input sequence inside the terminal controller's family;
    without it a plain zero is appended.
    """
    m = previous.c.shape[1]
    if terminal_gain is None:
        tail = np.zeros(m)
    else:
        tail = np.atleast_2d(np.asarray(terminal_gain, float)) @ previous.theta
    c = np.vstack([previous.c[1:], tail])
    return DecisionPoint(c=c, theta=previous.theta.copy())
