"""Learned-model corrections added on top of the nominal linear model.

An oracle supplies the correction O(x, u) that the controller adds to
A x + B u when rolling out the cost model.  Four kinds are provided:

* zero: O = 0, which makes the scheme coincide with linear MPC;
* linear parametric: O = F x + G u fitted by least squares;
* L2-regularized Nadaraya-Watson kernel regression (L2NW);
* true-model: wraps the known simulation residual, used only as the
  comparison baseline in convergence experiments.

The L2NW estimate is O(x,u) = sum_i Y_i k(Xi_i) / (lam + sum_i k(Xi_i))
with Xi_i = ||xi_sel - X_i,sel||^2 / h^2 and an Epanechnikov profile k.
Because the weights {lam, k(Xi_1), ...} average the points {0, Y_1, ...},
the estimate always stays inside any convex W that contains 0 and every
stored residual; residuals are projected onto W on admission to keep
that hypothesis true under real data.

The gradient implemented here is the exact derivative of the estimator
(quotient rule with d/dxi_k k(Xi_i) = dk(Xi_i) * 2 [xi - X_i]_k / h^2);
columns outside the feature selector are identically zero.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Callable, Optional

import numpy as np

from .polytope import HPolytope, box_bounds, contains


class OracleKind(Enum):
    ZERO = "zero"
    LINEAR_PARAMETRIC = "linear-parametric"
    L2NW = "l2nw"
    TRUE_MODEL = "true-model"


class RankDeficient(RuntimeError):
    """Least-squares regressors are insufficiently exciting."""


@dataclass(frozen=True, eq=False)
class Sample:
    xi: np.ndarray  # stacked (x, u) in R^{p+m}
    y: np.ndarray  # one-step residual in R^p


@dataclass(frozen=True, eq=False)
class OracleState:
    kind: OracleKind
    buffer: tuple = ()
    lam: float = 1e-3
    h: float = 0.5
    capacity: int = 2000
    feature_selector: Optional[tuple] = None
    F: Optional[np.ndarray] = None
    G: Optional[np.ndarray] = None
    g_handle: Optional[Callable] = None
    h_schedule_C: Optional[float] = None
    # stacked copies of the buffer for vectorized queries
    xi_mat: Optional[np.ndarray] = field(default=None, repr=False)
    y_mat: Optional[np.ndarray] = field(default=None, repr=False)


def zero_oracle() -> OracleState:
    return OracleState(kind=OracleKind.ZERO)


def l2nw_oracle(
    h: float = 0.5,
    lam: float = 1e-3,
    capacity: int = 2000,
    feature_selector=None,
    h_schedule_C: Optional[float] = None,
) -> OracleState:
    if lam <= 0:
        raise ValueError("lam must be positive")
    if h <= 0:
        raise ValueError("h must be positive")
    sel = tuple(int(i) for i in feature_selector) if feature_selector is not None else None
    return OracleState(
        kind=OracleKind.L2NW,
        lam=lam,
        h=h,
        capacity=capacity,
        feature_selector=sel,
        h_schedule_C=h_schedule_C,
    )


def linear_parametric_oracle(capacity: int = 2000) -> OracleState:
    return OracleState(kind=OracleKind.LINEAR_PARAMETRIC, capacity=capacity)


def true_model_oracle(g: Callable[[np.ndarray, np.ndarray], np.ndarray]) -> OracleState:
    """Wrap the known discrete residual; gradients by central differences."""
    return OracleState(kind=OracleKind.TRUE_MODEL, g_handle=g)


# ---------------------------------------------------------------------------
# data management


def residual(x, u, x_next, A, B) -> np.ndarray:
    """One-step residual Y = x_next - (A x + B u)."""
    x = np.asarray(x, dtype=float).reshape(-1)
    u = np.asarray(u, dtype=float).reshape(-1)
    x_next = np.asarray(x_next, dtype=float).reshape(-1)
    return x_next - (np.asarray(A) @ x + np.asarray(B) @ u)


def admit_sample(state: OracleState, x, u, x_next, A, B, W: HPolytope) -> OracleState:
    """Store a residual sample, projected onto W, with FIFO eviction.

    The projection (a per-axis clamp, W being a box) preserves the
    boundedness hypothesis that every stored residual lies in W.
    """
    x = np.asarray(x, dtype=float).reshape(-1)
    u = np.asarray(u, dtype=float).reshape(-1)
    if not contains(W, np.zeros(W.dim), tol=1e-12):
        raise ValueError("W must contain the origin")
    y = residual(x, u, x_next, A, B)
    if not contains(W, y, tol=0.0):
        lo, hi = box_bounds(W)
        y = np.clip(y, lo, hi)
    sample = Sample(xi=np.concatenate([x, u]), y=y)
    buffer = (state.buffer + (sample,))[-state.capacity :]
    if state.xi_mat is not None and len(buffer) == len(state.buffer) + 1:
        xi_mat = np.vstack([state.xi_mat, sample.xi])
        y_mat = np.vstack([state.y_mat, sample.y])
    else:
        xi_mat = np.array([s.xi for s in buffer])
        y_mat = np.array([s.y for s in buffer])
    return replace(state, buffer=buffer, xi_mat=xi_mat, y_mat=y_mat)


# ---------------------------------------------------------------------------
# Epanechnikov kernel


def kernel(nu: float) -> float:
    """0.75 (1 - nu^2) inside |nu| < 1, zero outside."""
    return 0.75 * (1.0 - nu * nu) if abs(nu) < 1.0 else 0.0


def dkernel(nu: float) -> float:
    """Derivative of the kernel; 0 on and outside the support boundary."""
    return -1.5 * nu if abs(nu) < 1.0 else 0.0


def _kernel_vec(nu: np.ndarray) -> np.ndarray:
    inside = np.abs(nu) < 1.0
    return np.where(inside, 0.75 * (1.0 - nu * nu), 0.0)


def _dkernel_vec(nu: np.ndarray) -> np.ndarray:
    inside = np.abs(nu) < 1.0
    return np.where(inside, -1.5 * nu, 0.0)


# ---------------------------------------------------------------------------
# L2NW estimator


def _selector(state: OracleState, dim: int) -> np.ndarray:
    if state.feature_selector is None:
        return np.arange(dim)
    return np.asarray(state.feature_selector, dtype=int)


def effective_bandwidth(state: OracleState) -> float:
    """Fixed h, or the n^(-1/(p+m)) schedule when configured."""
    if state.h_schedule_C is None or not state.buffer:
        return state.h
    n = len(state.buffer)
    dim = state.buffer[0].xi.size
    return state.h_schedule_C * n ** (-1.0 / dim)


def _weights(state: OracleState, xi: np.ndarray):
    sel = _selector(state, xi.size)
    h = effective_bandwidth(state)
    diffs = xi[sel] - state.xi_mat[:, sel]
    Xi = np.sum(diffs * diffs, axis=1) / (h * h)
    return sel, h, diffs, Xi


def l2nw_value(state: OracleState, x, u) -> np.ndarray:
    x = np.asarray(x, dtype=float).reshape(-1)
    u = np.asarray(u, dtype=float).reshape(-1)
    if not state.buffer:
        return np.zeros(x.size)
    xi = np.concatenate([x, u])
    _, _, _, Xi = _weights(state, xi)
    kv = _kernel_vec(Xi)
    denom = state.lam + kv.sum()
    return (state.y_mat.T @ kv) / denom


def l2nw_gradient(state: OracleState, x, u) -> np.ndarray:
    """Exact derivative of the estimator, p x (p+m)."""
    x = np.asarray(x, dtype=float).reshape(-1)
    u = np.asarray(u, dtype=float).reshape(-1)
    p = x.size
    dim = p + u.size
    if not state.buffer:
        return np.zeros((p, dim))
    xi = np.concatenate([x, u])
    sel, h, diffs, Xi = _weights(state, xi)
    kv = _kernel_vec(Xi)
    dkv = _dkernel_vec(Xi)
    D = state.lam + kv.sum()
    num = state.y_mat.T @ kv  # p
    # d k(Xi_i)/d xi_sel = dk(Xi_i) * 2 diffs_i / h^2
    term1 = (state.y_mat * dkv[:, None]).T @ diffs  # p x |sel|
    term2 = np.outer(num, dkv @ diffs) / D  # p x |sel|
    grad_sel = (2.0 / (h * h * D)) * (term1 - term2)
    grad = np.zeros((p, dim))
    grad[:, sel] = grad_sel
    return grad


# ---------------------------------------------------------------------------
# linear parametric oracle


def fit_linear_parametric(buffer) -> tuple[np.ndarray, np.ndarray]:
    """Least-squares fit of Y ~ F x + G u by the normal equations.

    Raises RankDeficient when the regressor moment matrix is singular
    at relative tolerance 1e-10 (insufficient excitation); callers keep
    their previous coefficients in that case.
    """
    if not buffer:
        raise RankDeficient("empty buffer")
    Z = np.array([s.xi for s in buffer])
    Y = np.array([s.y for s in buffer])
    n, dim = Z.shape
    p = Y.shape[1]
    m = dim - p
    if n < dim:
        raise RankDeficient(f"need at least {dim} samples, have {n}")
    M = Z.T @ Z
    svals = np.linalg.svd(M, compute_uv=False)
    if svals[-1] <= 1e-10 * svals[0]:
        raise RankDeficient("regressor moment matrix is numerically singular")
    theta = np.linalg.solve(M, Z.T @ Y).T  # p x (p+m)
    return theta[:, :p].copy(), theta[:, p:].copy()


def refit(state: OracleState) -> OracleState:
    """Refresh fitted coefficients where the oracle kind has any."""
    if state.kind is not OracleKind.LINEAR_PARAMETRIC:
        return state
    try:
        F, G = fit_linear_parametric(state.buffer)
    except RankDeficient:
        return state
    return replace(state, F=F, G=G)


# ---------------------------------------------------------------------------
# uniform dispatch used by the controller


def oracle_value(state: OracleState, x, u) -> np.ndarray:
    x = np.asarray(x, dtype=float).reshape(-1)
    u = np.asarray(u, dtype=float).reshape(-1)
    if state.kind is OracleKind.ZERO:
        return np.zeros(x.size)
    if state.kind is OracleKind.L2NW:
        return l2nw_value(state, x, u)
    if state.kind is OracleKind.LINEAR_PARAMETRIC:
        if state.F is None:
            return np.zeros(x.size)
        return state.F @ x + state.G @ u
    if state.kind is OracleKind.TRUE_MODEL:
        return np.asarray(state.g_handle(x, u), dtype=float).reshape(-1)
    raise ValueError(f"unknown oracle kind {state.kind}")


def oracle_jacobian(state: OracleState, x, u) -> np.ndarray:
    """d O / d (x, u) as a p x (p+m) matrix."""
    x = np.asarray(x, dtype=float).reshape(-1)
    u = np.asarray(u, dtype=float).reshape(-1)
    p = x.size
    dim = p + u.size
    if state.kind is OracleKind.ZERO:
        return np.zeros((p, dim))
    if state.kind is OracleKind.L2NW:
        return l2nw_gradient(state, x, u)
    if state.kind is OracleKind.LINEAR_PARAMETRIC:
        if state.F is None:
            return np.zeros((p, dim))
        return np.hstack([state.F, state.G])
    if state.kind is OracleKind.TRUE_MODEL:
        step = 1e-6
        xi = np.concatenate([x, u])
        cols = []
        for k in range(dim):
            e = np.zeros(dim)
            e[k] = step
            hi = oracle_value(state, (xi + e)[:p], (xi + e)[p:])
            lo = oracle_value(state, (xi - e)[:p], (xi - e)[p:])
            cols.append((hi - lo) / (2.0 * step))
        return np.column_stack(cols)
    raise ValueError(f"unknown oracle kind {state.kind}")


# ---------------------------------------------------------------------------
# buffer snapshots


def export_buffer(state: OracleState, path) -> None:
    """Write the sample buffer as CSV with xi and y component columns."""
    if state.buffer:
        dim = state.buffer[0].xi.size
        p = state.buffer[0].y.size
    else:
        dim = p = 0
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([f"xi{i}" for i in range(dim)] + [f"y{j}" for j in range(p)])
        for s in state.buffer:
            writer.writerow([f"{v:.17g}" for v in s.xi] + [f"{v:.17g}" for v in s.y])


def import_buffer(state: OracleState, path) -> OracleState:
    """Load a buffer snapshot into a fresh copy of the given state."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        dim = sum(1 for name in header if name.startswith("xi"))
        rows = [np.array([float(v) for v in row]) for row in reader]
    buffer = tuple(Sample(xi=row[:dim], y=row[dim:]) for row in rows)
    buffer = buffer[-state.capacity :]
    xi_mat = np.array([s.xi for s in buffer]) if buffer else None
    y_mat = np.array([s.y for s in buffer]) if buffer else None
    return replace(state, buffer=buffer, xi_mat=xi_mat, y_mat=y_mat)
