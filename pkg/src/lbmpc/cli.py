"""Command line front end: config ingestion and pipeline orchestration.

One JSON file describes a full run (plant, constraints, gains, weights,
disturbance set, oracle, run options).  Subcommands build the terminal
set (with an on-disk cache keyed by a configuration hash), simulate a
closed loop to CSV, compare two trajectory logs, and run scenario
sweeps in a parallel job pool.  Exit codes: 0 success, 1 aborted run,
2 empty terminal set, 3 terminal-set iteration cap hit, 64 bad command
line, 65 bad configuration.
"""

import argparse
import copy
import dataclasses
import hashlib
import json
import logging
import os
import shutil
import sys
from concurrent.futures import ProcessPoolExecutor
from typing import Optional

import numpy as np

from .compressor import (
    CompressorPlant,
    MGParams,
    SimulationAborted,
    estimate_model_error_bound,
    make_plant,
    read_csv,
    simulate_closed_loop,
    step_plant,
    write_csv,
)
from .invariant import (
    EmptyTerminalSet,
    TerminalSet,
    compute_terminal_set,
    steady_state_map,
    tube_offsets,
)
from .mpc import ControllerConfig, make_controller_config
from .numerics import discretize_exact
from .oracle import (
    OracleState,
    l2nw_oracle,
    linear_parametric_oracle,
    true_model_oracle,
    zero_oracle,
)
from .polytope import HPolytope, chebyshev_center

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_ABORTED = 1
EXIT_EMPTY = 2
EXIT_NOT_CONVERGED = 3
EXIT_USAGE = 64
EXIT_CONFIG = 65

CONTROLLERS = ("linear", "lbmpc-l2nw", "lbmpc-param", "true-model")
SETTLING_TOL = 0.01


class ConfigError(ValueError):
    """Configuration file failed schema or consistency checks."""


def default_config_dict() -> dict:
    """Benchmark defaults: compressor surge rig, N = 15 primary horizon."""
    return {
        "plant": {
            "beta": 1.0,
            "psi_c": 0.0,
            "zeta": 0.7071067811865476,
            "w_n": 31.622776601683793,
            "sample_time": 0.01,
            "Phi0": 0.5,
        },
        "constraints": {
            "state_lo": [0.0, 1.1875, 0.1547, -20.0],
            "state_hi": [1.0, 2.1875, 2.1547, 20.0],
            "input_lo": [0.1547],
            "input_hi": [2.1547],
        },
        "K": [[-3.0741, 2.0957, 0.1195, -0.0090]],
        "N": 15,
        "weights": {
            "Q": [
                [1.0, 0.0, 0.0, 0.0],
                [0.0, 1.0, 0.0, 0.0],
                [0.0, 0.0, 1.0, 0.0],
                [0.0, 0.0, 0.0, 1.0],
            ],
            "R": [[1.0]],
            "T_w": [
                [1000.0, 0.0, 0.0, 0.0],
                [0.0, 1000.0, 0.0, 0.0],
                [0.0, 0.0, 1000.0, 0.0],
                [0.0, 0.0, 0.0, 1000.0],
            ],
        },
        "disturbance": {
            "mode": "explicit",
            "halfwidth": [8e-4, 5e-4, 1e-6, 1e-5],
            "grid_density": 9,
            "margin": 0.1,
        },
        "oracle": {
            "kind": "l2nw",
            "h": 0.5,
            "lam": 1e-3,
            "capacity": 2000,
            "features": [0, 1, 4],
            "h_schedule_C": 0.5,
        },
        "run": {
            "steps": 1500,
            "x_init": "benchmark",
            "seed": 0,
            "record_timing": False,
        },
        "terminal": {"max_iterations": 2500, "cache": "terminal_cache.json"},
    }


@dataclasses.dataclass
class RunConfig:
    """Plain-python mirror of the JSON schema; arrays stay as lists."""

    plant: dict
    constraints: dict
    K: list
    N: int
    weights: dict
    disturbance: dict
    oracle: dict
    run: dict
    terminal: dict
    system: Optional[dict] = None
    sweep: Optional[dict] = None

    def to_dict(self) -> dict:
        out = {
            "plant": copy.deepcopy(self.plant),
            "constraints": copy.deepcopy(self.constraints),
            "K": copy.deepcopy(self.K),
            "N": self.N,
            "weights": copy.deepcopy(self.weights),
            "disturbance": copy.deepcopy(self.disturbance),
            "oracle": copy.deepcopy(self.oracle),
            "run": copy.deepcopy(self.run),
            "terminal": copy.deepcopy(self.terminal),
        }
        if self.system is not None:
            out["system"] = copy.deepcopy(self.system)
        if self.sweep is not None:
            out["sweep"] = copy.deepcopy(self.sweep)
        return out

    @staticmethod
    def from_dict(data: dict) -> "RunConfig":
        merged = _merge_with_defaults(data)
        _validate_config(merged)
        return RunConfig(
            plant=merged["plant"],
            constraints=merged["constraints"],
            K=merged["K"],
            N=merged["N"],
            weights=merged["weights"],
            disturbance=merged["disturbance"],
            oracle=merged["oracle"],
            run=merged["run"],
            terminal=merged["terminal"],
            system=merged.get("system"),
            sweep=merged.get("sweep"),
        )


def _merge_with_defaults(user: dict) -> dict:
    base = default_config_dict()
    known = set(base) | {"system", "sweep"}
    unknown = set(user) - known
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    merged = copy.deepcopy(base)
    for key, value in user.items():
        if key in ("system", "sweep"):
            merged[key] = copy.deepcopy(value)
        elif isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"config key {key!r} must be an object")
            extra = set(value) - set(base[key])
            if extra:
                raise ConfigError(f"unknown keys under {key!r}: {sorted(extra)}")
            merged[key].update(copy.deepcopy(value))
        else:
            merged[key] = copy.deepcopy(value)
    return merged


def _require_numbers(name: str, values, length: int):
    arr = np.asarray(values, dtype=float)
    if arr.shape != (length,):
        raise ConfigError(f"{name} must be a flat list of {length} numbers")
    if not np.all(np.isfinite(arr)):
        raise ConfigError(f"{name} must be finite")
    return arr


def _require_matrix(name: str, values, rows: int, cols: int):
    arr = np.asarray(values, dtype=float)
    if arr.shape != (rows, cols):
        raise ConfigError(f"{name} must be a {rows}x{cols} matrix")
    if not np.all(np.isfinite(arr)):
        raise ConfigError(f"{name} must be finite")
    return arr


def _validate_config(cfg: dict) -> None:
    plant = cfg["plant"]
    for key in ("beta", "psi_c", "zeta", "w_n", "sample_time", "Phi0"):
        if not isinstance(plant.get(key), (int, float)):
            raise ConfigError(f"plant.{key} must be a number")
    cons = cfg["constraints"]
    lo = _require_numbers("constraints.state_lo", cons["state_lo"], 4)
    hi = _require_numbers("constraints.state_hi", cons["state_hi"], 4)
    if np.any(lo >= hi):
        raise ConfigError("state bounds must satisfy lo < hi")
    ulo = _require_numbers("constraints.input_lo", cons["input_lo"], 1)
    uhi = _require_numbers("constraints.input_hi", cons["input_hi"], 1)
    if np.any(ulo >= uhi):
        raise ConfigError("input bounds must satisfy lo < hi")
    _require_matrix("K", cfg["K"], 1, 4)
    if not isinstance(cfg["N"], int) or cfg["N"] < 1:
        raise ConfigError("N must be a positive integer")
    _require_matrix("weights.Q", cfg["weights"]["Q"], 4, 4)
    _require_matrix("weights.R", cfg["weights"]["R"], 1, 1)
    _require_matrix("weights.T_w", cfg["weights"]["T_w"], 4, 4)
    dist = cfg["disturbance"]
    if dist["mode"] not in ("explicit", "estimated"):
        raise ConfigError("disturbance.mode must be 'explicit' or 'estimated'")
    if dist["mode"] == "explicit" and cfg.get("system") is None:
        hw = _require_numbers("disturbance.halfwidth", dist["halfwidth"], 4)
        if np.any(hw < 0):
            raise ConfigError("disturbance halfwidths must be nonnegative")
    kind = cfg["oracle"].get("kind")
    if kind not in ("zero", "l2nw", "linear-parametric", "true-model"):
        raise ConfigError(f"unknown oracle kind {kind!r}")
    run = cfg["run"]
    if not isinstance(run["steps"], int) or run["steps"] < 1:
        raise ConfigError("run.steps must be a positive integer")
    if run["x_init"] != "benchmark":
        _require_numbers("run.x_init", run["x_init"], 4)
    term = cfg["terminal"]
    if not isinstance(term["max_iterations"], int) or term["max_iterations"] < 1:
        raise ConfigError("terminal.max_iterations must be a positive integer")
    if cfg.get("sweep") is not None:
        sweep = cfg["sweep"]
        scenarios = sweep.get("scenarios")
        if not isinstance(scenarios, list) or not scenarios:
            raise ConfigError("sweep.scenarios must be a nonempty list")
        seen = set()
        for sc in scenarios:
            sid = sc.get("id")
            if not isinstance(sid, str) or not sid:
                raise ConfigError("every sweep scenario needs a string id")
            if sid in seen:
                raise ConfigError(f"duplicate sweep scenario id {sid!r}")
            seen.add(sid)
            if sc.get("controller", "linear") not in CONTROLLERS:
                raise ConfigError(f"scenario {sid!r} has an unknown controller")


def load_config(path) -> RunConfig:
    with open(path) as fh:
        try:
            data = json.load(fh)
        except json.JSONDecodeError as err:
            raise ConfigError(f"config is not valid JSON: {err}")
    if not isinstance(data, dict):
        raise ConfigError("config root must be a JSON object")
    return RunConfig.from_dict(data)


def save_config(config: RunConfig, path) -> None:
    with open(path, "w") as fh:
        json.dump(config.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")


# ---------------------------------------------------------------------------
# system assembly


@dataclasses.dataclass(frozen=True, eq=False)
class SystemBundle:
    """Everything derived from a config short of the terminal set."""

    A: np.ndarray
    B: np.ndarray
    K: np.ndarray
    X: HPolytope
    U: HPolytope
    W: HPolytope
    Lambda: np.ndarray
    Psi: np.ndarray
    plant: Optional[CompressorPlant] = None


def build_system(config: RunConfig) -> SystemBundle:
    """Discretize, anchor boxes at the equilibrium, resolve W."""
    if config.system is not None:
        return _build_custom_system(config)
    p = config.plant
    params = MGParams(
        beta=p["beta"],
        psi_c=p["psi_c"],
        zeta=p["zeta"],
        w_n=p["w_n"],
        sample_time=p["sample_time"],
    )
    plant = make_plant(params, Phi0=p["Phi0"])
    from .compressor import linearize

    Ac, Bc = linearize(params, plant.x_eq, plant.u_eq)
    A, B = discretize_exact(Ac, Bc, params.sample_time)
    K = _require_matrix("K", config.K, 1, 4)
    cons = config.constraints
    lo = np.asarray(cons["state_lo"], float) - plant.x_eq
    hi = np.asarray(cons["state_hi"], float) - plant.x_eq
    X = HPolytope.box(lo, hi)
    ulo = np.asarray(cons["input_lo"], float) - plant.u_eq
    uhi = np.asarray(cons["input_hi"], float) - plant.u_eq
    U = HPolytope.box(ulo, uhi)
    dist = config.disturbance
    if dist["mode"] == "explicit":
        hw = np.asarray(dist["halfwidth"], float)
        W = HPolytope.box(-hw, hw)
    else:
        W = estimate_model_error_bound(
            params,
            A,
            B,
            X,
            U,
            plant.x_eq,
            plant.u_eq,
            grid_density=int(dist["grid_density"]),
            margin=float(dist["margin"]),
        )
    ss = steady_state_map(A, B)
    return SystemBundle(
        A=A, B=B, K=K, X=X, U=U, W=W, Lambda=ss.Lambda, Psi=ss.Psi, plant=plant
    )


def _build_custom_system(config: RunConfig) -> SystemBundle:
    """Explicit (A, B, K) and boxes: demo systems for the invariant command."""
    sysd = config.system
    required = {"A", "B", "K", "state_lo", "state_hi", "input_lo", "input_hi"}
    missing = required - set(sysd)
    if missing:
        raise ConfigError(f"system block missing keys: {sorted(missing)}")
    A = np.atleast_2d(np.asarray(sysd["A"], dtype=float))
    p = A.shape[0]
    if A.shape != (p, p):
        raise ConfigError("system.A must be square")
    B = np.asarray(sysd["B"], dtype=float).reshape(p, -1)
    m = B.shape[1]
    K = np.asarray(sysd["K"], dtype=float).reshape(m, p)
    X = HPolytope.box(
        _require_numbers("system.state_lo", sysd["state_lo"], p),
        _require_numbers("system.state_hi", sysd["state_hi"], p),
    )
    U = HPolytope.box(
        _require_numbers("system.input_lo", sysd["input_lo"], m),
        _require_numbers("system.input_hi", sysd["input_hi"], m),
    )
    dist = config.disturbance
    if dist["mode"] != "explicit":
        raise ConfigError("custom systems need an explicit disturbance box")
    hw = _require_numbers("disturbance.halfwidth", dist["halfwidth"], p)
    W = HPolytope.box(-hw, hw)
    ss = steady_state_map(A, B)
    return SystemBundle(A=A, B=B, K=K, X=X, U=U, W=W, Lambda=ss.Lambda, Psi=ss.Psi)


def resolve_x_init(config: RunConfig, plant: CompressorPlant) -> np.ndarray:
    """Absolute initial state; "benchmark" is the deep surge-side excursion."""
    choice = config.run["x_init"]
    if choice == "benchmark":
        xeq = plant.x_eq
        return np.array([xeq[0] - 0.35, xeq[1] - 0.40, xeq[2], 0.0])
    return np.asarray(choice, dtype=float)


def make_oracle(controller: str, config: RunConfig, bundle: SystemBundle) -> OracleState:
    """Oracle instance for a controller menu entry.

    The controller name picks the kind; hyperparameters come from the
    config's oracle block.
    """
    opts = config.oracle
    if controller == "linear":
        return zero_oracle()
    if controller == "lbmpc-l2nw":
        features = opts.get("features")
        return l2nw_oracle(
            h=float(opts["h"]),
            lam=float(opts["lam"]),
            capacity=int(opts["capacity"]),
            feature_selector=tuple(features) if features is not None else None,
            h_schedule_C=opts.get("h_schedule_C"),
        )
    if controller == "lbmpc-param":
        return linear_parametric_oracle(capacity=int(opts["capacity"]))
    if controller == "true-model":
        if bundle.plant is None:
            raise ConfigError("true-model controller needs the compressor plant")
        return true_model_oracle(make_true_residual(bundle))
    raise ConfigError(f"unknown controller {controller!r}")


def make_true_residual(bundle: SystemBundle):
    """Exact one-step residual of the plant against the nominal model."""
    plant = bundle.plant
    A, B = bundle.A, bundle.B

    def g(x, u):
        x = np.asarray(x, dtype=float).reshape(-1)
        u = np.asarray(u, dtype=float).reshape(-1)
        x_next = step_plant(plant.params, plant.x_eq + x, plant.u_eq + u[0])
        return (x_next - plant.x_eq) - (A @ x + B @ u)

    return g


# ---------------------------------------------------------------------------
# terminal-set cache


def terminal_cache_key(bundle: SystemBundle, max_iterations: int) -> str:
    """Hash of everything that determines Omega (horizon excluded)."""
    key_obj = {
        "A": bundle.A.tolist(),
        "B": bundle.B.tolist(),
        "K": bundle.K.tolist(),
        "X_A": bundle.X.A.tolist(),
        "X_b": bundle.X.b.tolist(),
        "U_A": bundle.U.A.tolist(),
        "U_b": bundle.U.b.tolist(),
        "W_A": bundle.W.A.tolist(),
        "W_b": bundle.W.b.tolist(),
        "max_iterations": max_iterations,
    }
    blob = json.dumps(key_obj, sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()


def _offsets_to_dict(ts: TerminalSet) -> dict:
    return {
        "state_offsets": ts.state_offsets.tolist(),
        "input_offsets": ts.input_offsets.tolist(),
        "terminal_offsets": ts.terminal_offsets.tolist(),
    }


def ensure_terminal_set(
    config: RunConfig,
    cache_path,
    bundle: Optional[SystemBundle] = None,
    force: bool = False,
):
    """Terminal set for the config's horizon, from cache when possible.

    The cache stores Omega once plus tube offsets per horizon, so asking
    for a new N on a cached system only recomputes the (cheap) offsets,
    never the set iteration.  Returns (TerminalSet, cache_hit).
    """
    if bundle is None:
        bundle = build_system(config)
    max_iterations = int(config.terminal["max_iterations"])
    key = terminal_cache_key(bundle, max_iterations)
    N = int(config.N)
    if not force and cache_path is not None and os.path.exists(cache_path):
        try:
            with open(cache_path) as fh:
                data = json.load(fh)
        except (OSError, json.JSONDecodeError):
            data = None
        if data is not None and data.get("key") == key:
            ts = _terminal_from_cache(data, bundle, N, cache_path)
            return ts, True
    ts = compute_terminal_set(
        bundle.A,
        bundle.B,
        bundle.K,
        bundle.Lambda,
        bundle.Psi,
        bundle.X,
        bundle.U,
        bundle.W,
        N=N,
        max_iterations=max_iterations,
    )
    if cache_path is not None:
        data = {
            "key": key,
            "omega": ts.omega.to_dict(),
            "iterations": ts.iterations,
            "converged": ts.converged,
            "horizons": {str(N): _offsets_to_dict(ts)},
        }
        with open(cache_path, "w") as fh:
            json.dump(data, fh, sort_keys=True)
    return ts, False


def _terminal_from_cache(data: dict, bundle: SystemBundle, N: int, cache_path):
    omega = HPolytope.from_dict(data["omega"])
    horizons = data.setdefault("horizons", {})
    if str(N) not in horizons:
        Acl = bundle.A + bundle.B @ bundle.K
        off = tube_offsets(Acl, bundle.K, bundle.W, bundle.X, bundle.U, omega, N)
        horizons[str(N)] = {
            "state_offsets": off.state_offsets.tolist(),
            "input_offsets": off.input_offsets.tolist(),
            "terminal_offsets": off.terminal_offsets.tolist(),
        }
        if cache_path is not None:
            with open(cache_path, "w") as fh:
                json.dump(data, fh, sort_keys=True)
    entry = horizons[str(N)]
    return TerminalSet(
        omega=omega,
        state_offsets=np.array(entry["state_offsets"], dtype=float),
        input_offsets=np.array(entry["input_offsets"], dtype=float),
        terminal_offsets=np.array(entry["terminal_offsets"], dtype=float),
        iterations=int(data["iterations"]),
        converged=bool(data["converged"]),
    )


def build_controller(
    config: RunConfig, bundle: SystemBundle, terminal: TerminalSet
) -> ControllerConfig:
    w = config.weights
    return make_controller_config(
        A=bundle.A,
        B=bundle.B,
        K=bundle.K,
        N=int(config.N),
        Q=np.asarray(w["Q"], float),
        R=np.asarray(w["R"], float),
        T_w=np.asarray(w["T_w"], float),
        X=bundle.X,
        U=bundle.U,
        W=bundle.W,
        terminal=terminal,
        Lambda=bundle.Lambda,
        Psi=bundle.Psi,
    )


# ---------------------------------------------------------------------------
# metrics


def settling_step(phi, psi, phi_eq: float, psi_eq: float, tol: float = SETTLING_TOL):
    """First step after which max(|phi - phi_eq|, |psi - psi_eq|) <= tol
    holds for the rest of the log; None when the log never settles."""
    dev = np.maximum(np.abs(np.asarray(phi) - phi_eq), np.abs(np.asarray(psi) - psi_eq))
    ok = dev <= tol
    if ok.size == 0 or not ok[-1]:
        return None
    bad = np.nonzero(~ok)[0]
    return 0 if bad.size == 0 else int(bad[-1]) + 1


def cumulative_stage_cost(cols: dict, config: RunConfig) -> float:
    """Sum of deviation stage costs dx'Q dx + du'R du over a parsed log."""
    p = config.plant
    params = MGParams(
        beta=p["beta"],
        psi_c=p["psi_c"],
        zeta=p["zeta"],
        w_n=p["w_n"],
        sample_time=p["sample_time"],
    )
    plant = make_plant(params, Phi0=p["Phi0"])
    states = np.stack([cols["phi"], cols["psi"], cols["r"], cols["rdot"]], axis=1)
    dx = states - plant.x_eq
    du = cols["u"] - plant.u_eq
    Q = np.asarray(config.weights["Q"], float)
    R = float(np.asarray(config.weights["R"], float)[0, 0])
    return float(np.sum(np.einsum("ij,jk,ik->i", dx, Q, dx)) + R * np.sum(du**2))


def max_constraint_violation(log, bundle: SystemBundle) -> float:
    """Worst positive slack of the state/input rows over a run (0 if none).

    Exactly-active rows carry roundoff at machine precision, so slack
    below 1e-12 counts as satisfied.
    """
    dx = log.states - bundle.plant.x_eq
    du = (log.u - bundle.plant.u_eq)[:, None]
    sx = dx @ bundle.X.A.T - bundle.X.b
    su = du @ bundle.U.A.T - bundle.U.b
    worst = float(max(sx.max(), su.max()))
    return worst if worst > 1e-12 else 0.0


def write_plot_script(csv_path, script_path) -> None:
    """Gnuplot script over the trajectory CSV; no rendering dependency."""
    csv_name = os.path.basename(csv_path)
    stem = os.path.splitext(csv_name)[0]
    lines = [
        "# generated plotting script; run with: gnuplot <this file>",
        "set datafile separator ','",
        "set xlabel 't [s]'",
        "set terminal pngcairo size 960,640",
        f"set output '{stem}.png'",
        (
            f"plot '{csv_name}' using 2:3 with lines title 'phi', "
            "'' using 2:4 with lines title 'psi', "
            "'' using 2:7 with lines title 'u'"
        ),
    ]
    with open(script_path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# commands


def _cache_path_for(config: RunConfig, config_path) -> str:
    cache = config.terminal["cache"]
    if os.path.isabs(cache):
        return cache
    return os.path.join(os.path.dirname(os.path.abspath(config_path)), cache)


def cmd_invariant(config_path, out_path, force: bool = False) -> int:
    """Build (or reuse) the terminal set and report its vitals."""
    try:
        config = load_config(config_path)
        bundle = build_system(config)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        ts, hit = ensure_terminal_set(config, out_path, bundle=bundle, force=force)
    except EmptyTerminalSet as err:
        print(f"empty terminal set: {err}", file=sys.stderr)
        return EXIT_EMPTY
    if hit:
        print(f"cache hit: reused {out_path}")
    center_radius = chebyshev_center(ts.omega)[1]
    print(f"t* = {ts.iterations} ({'converged' if ts.converged else 'cap hit'})")
    print(f"rows = {ts.omega.nrows}")
    print(f"chebyshev radius = {center_radius:.6g}")
    if not hit:
        print(f"wrote {out_path}")
    if not ts.converged:
        print(
            "iteration cap reached; invariance must be re-verified before use",
            file=sys.stderr,
        )
        return EXIT_NOT_CONVERGED
    return EXIT_OK


def _run_simulation(config: RunConfig, controller: str, out_path, cache_path) -> dict:
    """Shared worker behind simulate and sweep; returns a summary dict."""
    bundle = build_system(config)
    if bundle.plant is None:
        raise ConfigError("simulation needs the compressor plant, not a custom system")
    ts, _ = ensure_terminal_set(config, cache_path, bundle=bundle)
    controller_cfg = build_controller(config, bundle, ts)
    oracle = make_oracle(controller, config, bundle)
    x0 = resolve_x_init(config, bundle.plant)
    steps = int(config.run["steps"])
    log = simulate_closed_loop(bundle.plant, controller_cfg, oracle, x0, steps)
    write_csv(log, out_path, include_timing=bool(config.run["record_timing"]))
    xeq = bundle.plant.x_eq
    settle = settling_step(log.states[:, 0], log.states[:, 1], xeq[0], xeq[1])
    return {
        "controller": controller,
        "rows": len(log),
        "settling": settle,
        "final_cost": float(log.cost[-1]),
        "max_violation": max_constraint_violation(log, bundle),
        "mean_solve_ms": float(np.mean(log.solve_time) * 1e3),
        "out": str(out_path),
    }


def cmd_simulate(
    config_path, controller, out_path, plot_script=None, cache_path=None
) -> int:
    if controller not in CONTROLLERS:
        print(
            f"unknown controller {controller!r}; choose from {', '.join(CONTROLLERS)}",
            file=sys.stderr,
        )
        return EXIT_USAGE
    try:
        config = load_config(config_path)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    if cache_path is None:
        cache_path = _cache_path_for(config, config_path)
    try:
        summary = _run_simulation(config, controller, out_path, cache_path)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except EmptyTerminalSet as err:
        print(f"empty terminal set: {err}", file=sys.stderr)
        return EXIT_EMPTY
    except SimulationAborted as err:
        print(f"simulation aborted: {err}", file=sys.stderr)
        return EXIT_ABORTED
    settle = summary["settling"]
    print(f"controller = {summary['controller']}")
    print(f"settling step = {settle if settle is not None else 'none'}")
    print(f"final cost = {summary['final_cost']:.12g}")
    print(f"max constraint violation = {summary['max_violation']:.12g}")
    print(f"wrote {summary['out']} ({summary['rows']} rows)")
    if plot_script is not None:
        write_plot_script(out_path, plot_script)
        print(f"wrote {plot_script}")
    return EXIT_OK


def compare_logs(cols_a: dict, cols_b: dict, config: RunConfig) -> dict:
    """Settling, cumulative stage cost, and per-step input gap of two logs."""
    p = config.plant
    params = MGParams(
        beta=p["beta"],
        psi_c=p["psi_c"],
        zeta=p["zeta"],
        w_n=p["w_n"],
        sample_time=p["sample_time"],
    )
    plant = make_plant(params, Phi0=p["Phi0"])
    xeq = plant.x_eq
    n = min(cols_a["u"].size, cols_b["u"].size)
    gap = np.abs(cols_a["u"][:n] - cols_b["u"][:n])
    return {
        "settling": {
            "a": settling_step(cols_a["phi"], cols_a["psi"], xeq[0], xeq[1]),
            "b": settling_step(cols_b["phi"], cols_b["psi"], xeq[0], xeq[1]),
        },
        "cum_cost": {
            "a": cumulative_stage_cost(cols_a, config),
            "b": cumulative_stage_cost(cols_b, config),
        },
        "control_gap": {"median": float(np.median(gap)), "max": float(np.max(gap))},
    }


def cmd_compare(log_a, log_b, metric="all", config_path=None, json_out=None) -> int:
    if metric not in ("settling", "cum_cost", "control_gap", "all"):
        print(f"unknown metric {metric!r}", file=sys.stderr)
        return EXIT_USAGE
    try:
        config = (
            load_config(config_path)
            if config_path is not None
            else RunConfig.from_dict({})
        )
        cols_a = read_csv(log_a)
        cols_b = read_csv(log_b)
    except (ConfigError, ValueError, OSError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    report = compare_logs(cols_a, cols_b, config)
    wanted = ("settling", "cum_cost", "control_gap") if metric == "all" else (metric,)
    if "settling" in wanted:
        s = report["settling"]
        print(f"settling: a = {s['a']}, b = {s['b']}")
    if "cum_cost" in wanted:
        c = report["cum_cost"]
        print(f"cum_cost: a = {c['a']:.12g}, b = {c['b']:.12g}")
    if "control_gap" in wanted:
        g = report["control_gap"]
        print(f"control_gap: median = {g['median']:.12g}, max = {g['max']:.12g}")
    selected = {k: report[k] for k in wanted}
    if json_out is not None:
        with open(json_out, "w") as fh:
            json.dump(selected, fh, indent=2, sort_keys=True)
            fh.write("\n")
    else:
        print(json.dumps(selected, sort_keys=True))
    return EXIT_OK


def _sweep_job(args) -> dict:
    """Isolated scenario run; must stay a top-level function (pickled)."""
    config_dict, controller, out_path, cache_path = args
    try:
        config = RunConfig.from_dict(config_dict)
        summary = _run_simulation(config, controller, out_path, cache_path)
        summary["error"] = None
        return summary
    except (ConfigError, EmptyTerminalSet, SimulationAborted) as err:
        return {"out": str(out_path), "error": str(err), "controller": controller}


def cmd_sweep(config_path, out_dir, jobs=None) -> int:
    try:
        config = load_config(config_path)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    if config.sweep is None:
        print("config has no sweep block", file=sys.stderr)
        return EXIT_CONFIG
    os.makedirs(out_dir, exist_ok=True)
    base = config.to_dict()
    base.pop("sweep", None)
    scenarios = config.sweep["scenarios"]
    if jobs is None:
        jobs = int(config.sweep.get("jobs", 2))

    tasks = []
    cache_paths = {}
    for sc in scenarios:
        merged = copy.deepcopy(base)
        for key, value in sc.get("overrides", {}).items():
            if isinstance(merged.get(key), dict) and isinstance(value, dict):
                merged[key].update(value)
            else:
                merged[key] = value
        try:
            sc_config = RunConfig.from_dict(merged)
        except ConfigError as err:
            print(f"scenario {sc['id']!r}: config error: {err}", file=sys.stderr)
            return EXIT_CONFIG
        bundle = build_system(sc_config)
        key = terminal_cache_key(bundle, int(sc_config.terminal["max_iterations"]))
        if key not in cache_paths:
            cache_paths[key] = os.path.join(out_dir, f"terminal_{key[:12]}.json")
            # warm the cache up front so parallel jobs never race the build;
            # an existing matching cache from the config is reused verbatim
            source = _cache_path_for(sc_config, config_path)
            if os.path.exists(source) and not os.path.exists(cache_paths[key]):
                try:
                    with open(source) as fh:
                        if json.load(fh).get("key") == key:
                            shutil.copyfile(source, cache_paths[key])
                except (OSError, json.JSONDecodeError):
                    pass
            ensure_terminal_set(sc_config, cache_paths[key], bundle=bundle)
        out_csv = os.path.join(out_dir, f"{sc['id']}.csv")
        tasks.append(
            (merged, sc.get("controller", "linear"), out_csv, cache_paths[key])
        )

    failures = 0
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        for sc, summary in zip(scenarios, pool.map(_sweep_job, tasks)):
            if summary["error"] is not None:
                failures += 1
                print(f"{sc['id']}: FAILED ({summary['error']})", file=sys.stderr)
            else:
                settle = summary["settling"]
                print(
                    f"{sc['id']}: controller = {summary['controller']}, "
                    f"settling = {settle if settle is not None else 'none'}, "
                    f"wrote {summary['out']}"
                )
    return EXIT_OK if failures == 0 else EXIT_ABORTED


# ---------------------------------------------------------------------------
# entry point


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="lbmpc",
        description="Tube MPC with learned-model cost: build, simulate, compare.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_inv = sub.add_parser("invariant", help="build or reuse the terminal set")
    p_inv.add_argument("--config", required=True)
    p_inv.add_argument("--out", required=True, help="terminal-set JSON (cache) path")
    p_inv.add_argument("--force", action="store_true", help="ignore any cached set")

    p_sim = sub.add_parser("simulate", help="run one closed loop to CSV")
    p_sim.add_argument("--config", required=True)
    p_sim.add_argument("--controller", required=True, help="|".join(CONTROLLERS))
    p_sim.add_argument("--out", required=True, help="trajectory CSV path")
    p_sim.add_argument("--plot-script", default=None, help="emit a gnuplot script")
    p_sim.add_argument("--terminal-cache", default=None, help="override cache path")

    p_cmp = sub.add_parser("compare", help="compare two trajectory logs")
    p_cmp.add_argument("log_a")
    p_cmp.add_argument("log_b")
    p_cmp.add_argument(
        "--metric",
        default="all",
        help="settling|cum_cost|control_gap|all",
    )
    p_cmp.add_argument("--config", default=None, help="weights/equilibrium source")
    p_cmp.add_argument("--json-out", default=None)

    p_swp = sub.add_parser("sweep", help="run scenarios in a parallel pool")
    p_swp.add_argument("--config", required=True)
    p_swp.add_argument("--out-dir", required=True)
    p_swp.add_argument("--jobs", type=int, default=None)
    return parser


def main(argv=None) -> int:
    level = getattr(
        logging, os.environ.get("LBMPC_LOG", "WARNING").upper(), logging.WARNING
    )
    logging.basicConfig(level=level)
    logging.getLogger("lbmpc").setLevel(level)
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as err:
        return EXIT_USAGE if err.code not in (0, None) else 0
    if args.command == "invariant":
        return cmd_invariant(args.config, args.out, force=args.force)
    if args.command == "simulate":
        return cmd_simulate(
            args.config,
            args.controller,
            args.out,
            plot_script=args.plot_script,
            cache_path=args.terminal_cache,
        )
    if args.command == "compare":
        return cmd_compare(
            args.log_a,
            args.log_b,
            metric=args.metric,
            config_path=args.config,
            json_out=args.json_out,
        )
    if args.command == "sweep":
        return cmd_sweep(args.config, args.out_dir, jobs=args.jobs)
    parser.print_usage(sys.stderr)
    return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
