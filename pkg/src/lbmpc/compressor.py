"""Moore-Greitzer compressor benchmark: surge dynamics with a throttle
actuator, equilibrium and linearization, model-error bounding, and the
closed-loop simulation harness.

State is [Phi, Psi, r, r_dot]: mass flow, pressure rise, throttle
opening, and throttle rate.  The throttle actuator r(s)/u(s) =
w_n^2 / (s^2 + 2 zeta w_n s + w_n^2) is realized in controllable
canonical form.  The controller works in deviation coordinates around a
chosen equilibrium; absolute coordinates appear only at the plant
boundary.
"""

import dataclasses
import logging
import math
from typing import Callable, Optional

import numpy as np

from .mpc import (
    ControllerConfig,
    MPCStatus,
    shift_warm_start,
    solve,
)
from .numerics import rk4_step
from .oracle import OracleKind, OracleState, admit_sample, oracle_value, refit
from .polytope import HPolytope, box_bounds

logger = logging.getLogger(__name__)

PLANT_SUBSTEPS = 10


class DomainError(ValueError):
    """Pressure rise left the square-root domain (Psi <= 0)."""


class SimulationAborted(RuntimeError):
    """Closed loop hit an infeasible program or a plant domain error."""


@dataclasses.dataclass(frozen=True)
class MGParams:
    beta: float = 1.0
    psi_c: float = 0.0
    zeta: float = 1.0 / math.sqrt(2.0)
    w_n: float = math.sqrt(1000.0)
    sample_time: float = 0.01

    def __post_init__(self):
        if self.beta <= 0 or self.w_n <= 0 or self.sample_time <= 0:
            raise ValueError("beta, w_n, and sample_time must be positive")


@dataclasses.dataclass(frozen=True)
class PlantState:
    Phi: float
    Psi: float
    r: float
    r_dot: float

    def as_array(self) -> np.ndarray:
        return np.array([self.Phi, self.Psi, self.r, self.r_dot], dtype=float)

    @staticmethod
    def from_array(x) -> "PlantState":
        x = np.asarray(x, dtype=float).reshape(-1)
        return PlantState(Phi=x[0], Psi=x[1], r=x[2], r_dot=x[3])


def _state_vector(state) -> np.ndarray:
    if isinstance(state, PlantState):
        return state.as_array()
    return np.asarray(state, dtype=float).reshape(-1)


# ---------------------------------------------------------------------------
# dynamics


def _rhs_batch(params: MGParams, x: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Vectorized flow field for (n, 4) states and (n,) inputs."""
    Phi = x[..., 0]
    Psi = x[..., 1]
    r = x[..., 2]
    r_dot = x[..., 3]
    if np.any(Psi <= 0):
        raise DomainError("Psi must stay positive (square-root domain)")
    dPhi = -Psi + params.psi_c + 1.0 + 1.5 * Phi - 0.5 * Phi**3
    dPsi = (Phi + 1.0 - r * np.sqrt(Psi)) / params.beta**2
    ddr = params.w_n**2 * (u - r) - 2.0 * params.zeta * params.w_n * r_dot
    return np.stack([dPhi, dPsi, r_dot, ddr], axis=-1)


def mg_dynamics(params: MGParams, state, u) -> np.ndarray:
    """Flow field [dPhi, dPsi, dr, ddr] at one state and throttle command."""
    x = _state_vector(state)
    u = float(np.asarray(u).reshape(-1)[0])
    return _rhs_batch(params, x[None, :], np.array([u]))[0]


def equilibrium(params: MGParams, Phi0: float = 0.5):
    """Equilibrium (PlantState, u0) at mass flow Phi0.

    Psi0 = psi_c + 1 + 3 Phi0/2 - Phi0^3/2, r0 = (Phi0 + 1)/sqrt(Psi0),
    r_dot0 = 0, and u0 = r0.
    """
    Psi0 = params.psi_c + 1.0 + 1.5 * Phi0 - 0.5 * Phi0**3
    if Psi0 <= 0:
        raise DomainError(f"equilibrium pressure rise {Psi0} is not positive")
    r0 = (Phi0 + 1.0) / math.sqrt(Psi0)
    return PlantState(Phi=Phi0, Psi=Psi0, r=r0, r_dot=0.0), r0


def linearize(params: MGParams, x0, u0):
    """Analytic continuous-time (Ac, Bc) about an equilibrium."""
    x = _state_vector(x0)
    Phi0, Psi0, r0 = x[0], x[1], x[2]
    if Psi0 <= 0:
        raise DomainError("linearization point must have positive Psi")
    b2 = params.beta**2
    sq = math.sqrt(Psi0)
    Ac = np.array(
        [
            [1.5 - 1.5 * Phi0**2, -1.0, 0.0, 0.0],
            [1.0 / b2, -r0 / (2.0 * b2 * sq), -sq / b2, 0.0],
            [0.0, 0.0, 0.0, 1.0],
            [0.0, 0.0, -params.w_n**2, -2.0 * params.zeta * params.w_n],
        ]
    )
    Bc = np.array([[0.0], [0.0], [0.0], [params.w_n**2]])
    return Ac, Bc


# ---------------------------------------------------------------------------
# integration


def _integrate_batch(params, x: np.ndarray, u: np.ndarray, dt: float, substeps: int):
    h = dt / substeps
    for _ in range(substeps):
        k1 = _rhs_batch(params, x, u)
        k2 = _rhs_batch(params, x + 0.5 * h * k1, u)
        k3 = _rhs_batch(params, x + 0.5 * h * k2, u)
        k4 = _rhs_batch(params, x + h * k3, u)
        x = x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    return x


def step_plant(params: MGParams, state, u, substeps: int = PLANT_SUBSTEPS):
    """Advance the true plant one controller sample under a held input."""
    x = _state_vector(state)
    u_held = float(np.asarray(u).reshape(-1)[0])
    f = lambda xs, us: _rhs_batch(params, xs[None, :], np.array([us]))[0]
    h = params.sample_time / substeps
    for _ in range(substeps):
        x = rk4_step(f, x, u_held, h)
    return x


# ---------------------------------------------------------------------------
# model error bound


def estimate_model_error_bound(
    params: MGParams,
    A: np.ndarray,
    B: np.ndarray,
    X: HPolytope,
    U: HPolytope,
    x_eq,
    u_eq: float,
    grid_density: int = 9,
    margin: float = 0.1,
    floor: float = 1e-9,
    rhs: Optional[Callable[[np.ndarray, np.ndarray], np.ndarray]] = None,
) -> HPolytope:
    """Axis-aligned disturbance box from gridded one-step residuals.

    Per state coordinate, the bound is the max over a grid covering the
    deviation boxes X x U of |true one-sample flow - (A dx + B du)|,
    inflated by the relative margin plus an absolute floor (the floor
    keeps W full-dimensional for the exactly-linear actuator rows, whose
    gridded residual is at integration-noise level).  Grid points whose
    pressure rise leaves the admissible domain are excluded and counted.
    """
    x_eq = _state_vector(x_eq)
    lo_x, hi_x = box_bounds(X)
    lo_u, hi_u = box_bounds(U)
    axes = [np.linspace(lo_x[i], hi_x[i], grid_density) for i in range(lo_x.size)]
    axes.append(np.linspace(lo_u[0], hi_u[0], grid_density))
    mesh = np.meshgrid(*axes, indexing="ij")
    pts = np.stack([m.ravel() for m in mesh], axis=1)
    dx = pts[:, :-1]
    du = pts[:, -1]

    x_abs = x_eq + dx
    u_abs = u_eq + du
    valid = x_abs[:, 1] > 0
    skipped = int(np.sum(~valid))
    if skipped:
        logger.warning("excluded %d grid points with nonpositive Psi", skipped)
    x_abs = x_abs[valid]
    u_abs = u_abs[valid]
    dx = dx[valid]
    du = du[valid]

    flow = rhs if rhs is not None else _rhs_batch
    h = params.sample_time / PLANT_SUBSTEPS
    x_next = x_abs
    for _ in range(PLANT_SUBSTEPS):
        k1 = flow(params, x_next, u_abs)
        k2 = flow(params, x_next + 0.5 * h * k1, u_abs)
        k3 = flow(params, x_next + 0.5 * h * k2, u_abs)
        k4 = flow(params, x_next + h * k3, u_abs)
        x_next = x_next + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)

    predicted = dx @ np.asarray(A).T + du[:, None] * np.asarray(B).reshape(1, -1)
    residual = (x_next - x_eq) - predicted
    bound = np.max(np.abs(residual), axis=0)
    bound = bound * (1.0 + margin) + floor
    return HPolytope.box(-bound, bound)


# ---------------------------------------------------------------------------
# closed-loop simulation


@dataclasses.dataclass(frozen=True, eq=False)
class CompressorPlant:
    """Plant parameters plus the deviation-coordinate anchor."""

    params: MGParams
    x_eq: np.ndarray
    u_eq: float


def make_plant(params: MGParams, Phi0: float = 0.5) -> CompressorPlant:
    eq, u0 = equilibrium(params, Phi0)
    return CompressorPlant(params=params, x_eq=eq.as_array(), u_eq=u0)


@dataclasses.dataclass
class TrajectoryLog:
    """Per-step records of a closed-loop run (absolute plant coordinates)."""

    step: np.ndarray
    t: np.ndarray
    states: np.ndarray  # (n, 4)
    u: np.ndarray
    c0: np.ndarray
    cost: np.ndarray
    status: list
    solve_time: np.ndarray  # seconds
    oracle_norm: np.ndarray
    min_margin: np.ndarray
    oracle_final: Optional[OracleState] = None

    def __len__(self):
        return self.step.size


CSV_HEADER = "step,t,phi,psi,r,rdot,u,c0,cost,status,solve_ms,oracle_norm,min_margin"


def write_csv(log: TrajectoryLog, path, include_timing: bool = False) -> None:
    """Fixed column order, floats at 12 significant digits.

    Timing is environment noise; it is zeroed unless explicitly
    requested so identical configurations produce byte-identical files.
    """
    with open(path, "w") as fh:
        fh.write(CSV_HEADER + "\n")
        for i in range(len(log)):
            ms = log.solve_time[i] * 1e3 if include_timing else 0.0
            row = [
                str(int(log.step[i])),
                f"{log.t[i]:.12g}",
                f"{log.states[i, 0]:.12g}",
                f"{log.states[i, 1]:.12g}",
                f"{log.states[i, 2]:.12g}",
                f"{log.states[i, 3]:.12g}",
                f"{log.u[i]:.12g}",
                f"{log.c0[i]:.12g}",
                f"{log.cost[i]:.12g}",
                log.status[i],
                f"{ms:.12g}",
                f"{log.oracle_norm[i]:.12g}",
                f"{log.min_margin[i]:.12g}",
            ]
            fh.write(",".join(row) + "\n")


def read_csv(path) -> dict:
    """Columns of a trajectory CSV as arrays (status as a list of str)."""
    with open(path) as fh:
        header = fh.readline().strip()
        if header != CSV_HEADER:
            raise ValueError(f"unexpected trajectory header: {header}")
        rows = [line.strip().split(",") for line in fh if line.strip()]
    cols = CSV_HEADER.split(",")
    out = {}
    for j, name in enumerate(cols):
        if name == "status":
            out[name] = [r[j] for r in rows]
        elif name == "step":
            out[name] = np.array([int(r[j]) for r in rows])
        else:
            out[name] = np.array([float(r[j]) for r in rows])
    return out


def simulate_closed_loop(
    plant: CompressorPlant,
    controller: ControllerConfig,
    oracle: OracleState,
    x_init,
    steps: int,
) -> TrajectoryLog:
    """Measure, solve, hold the input for one sample, learn, repeat.

    x_init is in absolute plant coordinates.  The run aborts with a
    diagnostic if the program goes infeasible or the plant leaves the
    model's domain.  Returns one record per controller step; the oracle
    state after the final admission rides along as log.oracle_final.
    """
    x_abs = _state_vector(x_init)
    terminal_gain = controller.Psi - controller.K @ controller.Lambda
    warm = None
    n = int(steps)
    rec_states = np.empty((n, 4))
    rec_u = np.empty(n)
    rec_c0 = np.empty(n)
    rec_cost = np.empty(n)
    rec_status = []
    rec_time = np.empty(n)
    rec_onorm = np.empty(n)
    rec_margin = np.empty(n)
    for k in range(n):
        dx = x_abs - plant.x_eq
        sol = solve(dx, oracle, controller, warm_start=warm)
        if sol.status is MPCStatus.INFEASIBLE:
            raise SimulationAborted(
                f"program infeasible at step {k}, state {x_abs.tolist()}"
            )
        du = sol.u_apply
        u_abs = plant.u_eq + float(du[0])
        margin = min(
            float(np.min(controller.X.b - controller.X.A @ dx)),
            float(np.min(controller.U.b - controller.U.A @ du)),
        )
        rec_states[k] = x_abs
        rec_u[k] = u_abs
        rec_c0[k] = float(sol.point.c[0, 0])
        rec_cost[k] = sol.cost_value
        rec_status.append(sol.status.value)
        rec_time[k] = sol.solve_time
        rec_onorm[k] = float(np.linalg.norm(oracle_value(oracle, dx, du)))
        rec_margin[k] = margin
        try:
            x_next = step_plant(plant.params, x_abs, u_abs)
        except DomainError as err:
            raise SimulationAborted(f"plant domain error at step {k}: {err}")
        oracle = admit_sample(
            oracle,
            dx,
            du,
            x_next - plant.x_eq,
            controller.A,
            controller.B,
            controller.W,
        )
        if oracle.kind is OracleKind.LINEAR_PARAMETRIC:
            oracle = refit(oracle)
        warm = shift_warm_start(sol.point, terminal_gain=terminal_gain)
        x_abs = x_next
    Ts = plant.params.sample_time
    return TrajectoryLog(
        step=np.arange(n),
        t=np.arange(n) * Ts,
        states=rec_states,
        u=rec_u,
        c0=rec_c0,
        cost=rec_cost,
        status=rec_status,
        solve_time=rec_time,
        oracle_norm=rec_onorm,
        min_margin=rec_margin,
        oracle_final=oracle,
    )
