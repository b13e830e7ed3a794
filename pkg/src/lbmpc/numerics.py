"""Dense linear algebra and integration kernels shared by the toolkit.

Everything here operates on small dense arrays (state dimension 4, input
dimension 1, horizons up to 100), so the implementations favor clarity
over asymptotics: the discrete Lyapunov equation is solved through its
Kronecker-vectorized linear system, and the matrix exponential uses plain
scaling-and-squaring with a truncated Taylor series.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

# Relative tolerance for rank decisions in orthogonal factorizations.
RANK_TOL = 1e-10

# Truncation tolerance for the matrix exponential series and the norm
# threshold below which no further scaling is applied.
EXPM_TOL = 1e-13
EXPM_SCALE_NORM = 0.5


class IntegrationError(RuntimeError):
    """An integrator produced or received a non-finite value."""


def _check_finite(name: str, arr: np.ndarray) -> np.ndarray:
    arr = np.asarray(arr, dtype=float)
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite entries")
    return arr


def null_space_basis(M: np.ndarray) -> np.ndarray:
    """Orthonormal basis of null(M) as columns, via SVD.

    Singular values below ``RANK_TOL`` times the largest one count as
    zero.  A trivial null space yields a matrix with zero columns.
    """
    M = np.atleast_2d(_check_finite("M", M))
    _, s, Vt = np.linalg.svd(M)
    cutoff = RANK_TOL * (s[0] if s.size else 0.0)
    rank = int(np.sum(s > cutoff))
    return Vt[rank:].T.copy()


def solve_discrete_lyapunov(Acl: np.ndarray, Qbar: np.ndarray) -> np.ndarray:
    """Solve Acl' P Acl - P = -Qbar for symmetric P.

    Uses the vectorized form (I - Acl' (x) Acl') vec(P) = vec(Qbar),
    valid only for Schur-stable Acl; spectral radius >= 1 - 1e-9 is
    rejected.
    """
    A = np.atleast_2d(_check_finite("Acl", Acl))
    Q = np.atleast_2d(_check_finite("Qbar", Qbar))
    n = A.shape[0]
    if A.shape != (n, n) or Q.shape != (n, n):
        raise ValueError("Acl and Qbar must be square of equal size")
    rho = np.max(np.abs(np.linalg.eigvals(A)))
    if rho >= 1.0 - 1e-9:
        raise ValueError(f"Acl spectral radius {rho:.6g} is not < 1")
    At = A.T
    lhs = np.eye(n * n) - np.kron(At, At)
    P = np.linalg.solve(lhs, Q.reshape(-1)).reshape(n, n)
    return 0.5 * (P + P.T)


def _expm(M: np.ndarray) -> np.ndarray:
    """Matrix exponential by scaling-and-squaring of a Taylor series."""
    n = M.shape[0]
    norm = np.max(np.abs(M).sum(axis=1)) if n else 0.0
    squarings = 0
    while norm > EXPM_SCALE_NORM:
        norm /= 2.0
        squarings += 1
    S = M / (2.0**squarings)
    E = np.eye(n)
    term = np.eye(n)
    k = 1
    while True:
        term = term @ S / k
        E = E + term
        if np.max(np.abs(term)) <= EXPM_TOL * max(1.0, np.max(np.abs(E))):
            break
        k += 1
        if k > 60:  # unreachable for ||S|| <= 0.5; guards bad input
            raise ValueError("matrix exponential series did not converge")
    for _ in range(squarings):
        E = E @ E
    return E


def discretize_exact(
    Ac: np.ndarray, Bc: np.ndarray, Ts: float
) -> tuple[np.ndarray, np.ndarray]:
    """Exact zero-order-hold discretization of xdot = Ac x + Bc u.

    Returns (A, B) = (e^{Ac Ts}, int_0^Ts e^{Ac s} ds Bc), read off the
    exponential of the augmented block matrix [[Ac, Bc], [0, 0]] * Ts.
    """
    Ac = np.atleast_2d(_check_finite("Ac", Ac))
    Bc = np.atleast_2d(_check_finite("Bc", Bc))
    if Ts <= 0:
        raise ValueError("Ts must be positive")
    p = Ac.shape[0]
    m = Bc.shape[1]
    if Ac.shape != (p, p) or Bc.shape[0] != p:
        raise ValueError("dimension mismatch between Ac and Bc")
    aug = np.zeros((p + m, p + m))
    aug[:p, :p] = Ac
    aug[:p, p:] = Bc
    E = _expm(aug * Ts)
    return E[:p, :p].copy(), E[:p, p:].copy()


def rk4_step(
    f: Callable[[np.ndarray, np.ndarray], np.ndarray],
    x: np.ndarray,
    u: np.ndarray,
    dt: float,
) -> np.ndarray:
    """One classical 4th-order Runge-Kutta step of xdot = f(x, u)."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    k1 = np.asarray(f(x, u), dtype=float)
    k2 = np.asarray(f(x + 0.5 * dt * k1, u), dtype=float)
    k3 = np.asarray(f(x + 0.5 * dt * k2, u), dtype=float)
    k4 = np.asarray(f(x + dt * k3, u), dtype=float)
    out = x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    if not np.all(np.isfinite(out)):
        raise IntegrationError("non-finite state produced during RK4 step")
    return out
