"""Command line front end tests.

Commands run in-process through main() so exit codes and printed
reports are asserted directly.  The compressor scenarios point at the
shared on-disk terminal cache, keeping every invocation fast.
"""

import json
import logging
import math
import os

import numpy as np
import pytest

import mg_setup
from lbmpc.cli import (
    EXIT_CONFIG,
    EXIT_EMPTY,
    EXIT_NOT_CONVERGED,
    EXIT_OK,
    EXIT_USAGE,
    ConfigError,
    RunConfig,
    default_config_dict,
    load_config,
    main,
    save_config,
    settling_step,
)
from lbmpc.compressor import read_csv
from lbmpc.invariant import TerminalSet
from lbmpc.polytope import HPolytope, support


@pytest.fixture(scope="module", autouse=True)
def _warm_terminal_cache():
    # make sure the shared benchmark cache exists before CLI runs use it
    mg_setup.get_terminal()


def write_json(path, data):
    with open(path, "w") as fh:
        json.dump(data, fh)
    return str(path)


def mg_config(tmp_path, name="cfg.json", **overrides):
    data = {"terminal": {"cache": mg_setup.TERMINAL_CACHE}}
    data.update(overrides)
    return write_json(tmp_path / name, data)


def scalar_demo_config(tmp_path, w_half=0.1, name="demo.json", max_iterations=50):
    # x+ = 0.5 x + w, |x| <= 1: converges immediately, omega = [-1, 1]
    data = {
        "system": {
            "A": [[0.5]],
            "B": [[0.0]],
            "K": [[0.0]],
            "state_lo": [-1.0],
            "state_hi": [1.0],
            "input_lo": [-0.5],
            "input_hi": [0.5],
        },
        "disturbance": {"mode": "explicit", "halfwidth": [w_half]},
        "N": 3,
        "terminal": {"max_iterations": max_iterations, "cache": "demo_ts.json"},
    }
    return write_json(tmp_path / name, data)


# ---------------------------------------------------------------------------
# configuration


def test_default_config_round_trip():
    cfg = RunConfig.from_dict({})
    assert RunConfig.from_dict(cfg.to_dict()) == cfg
    assert cfg.to_dict() == default_config_dict()


def test_config_file_round_trip(tmp_path):
    cfg = RunConfig.from_dict(
        {"N": 7, "run": {"steps": 9, "seed": 4}, "oracle": {"h": 0.25}}
    )
    path = tmp_path / "cfg.json"
    save_config(cfg, path)
    again = load_config(path)
    assert again == cfg
    save_config(again, tmp_path / "cfg2.json")
    assert (tmp_path / "cfg.json").read_text() == (tmp_path / "cfg2.json").read_text()


def test_config_rejects_unknown_keys():
    with pytest.raises(ConfigError, match="unknown config keys"):
        RunConfig.from_dict({"horizon": 10})
    with pytest.raises(ConfigError, match="unknown keys under"):
        RunConfig.from_dict({"run": {"step": 5}})


def test_config_rejects_bad_shapes():
    with pytest.raises(ConfigError, match="K"):
        RunConfig.from_dict({"K": [[1.0, 2.0]]})
    with pytest.raises(ConfigError, match="state bounds"):
        RunConfig.from_dict(
            {"constraints": {"state_lo": [2.0, 1.1875, 0.1547, -20.0]}}
        )
    with pytest.raises(ConfigError, match="steps"):
        RunConfig.from_dict({"run": {"steps": 0}})
    with pytest.raises(ConfigError, match="oracle"):
        RunConfig.from_dict({"oracle": {"kind": "magic"}})


def test_config_rejects_invalid_json(tmp_path):
    path = tmp_path / "broken.json"
    path.write_text("{not json")
    with pytest.raises(ConfigError, match="JSON"):
        load_config(path)


# ---------------------------------------------------------------------------
# invariant command


def test_invariant_scalar_demo(tmp_path, capsys):
    cfg = scalar_demo_config(tmp_path)
    out = tmp_path / "ts.json"
    assert main(["invariant", "--config", cfg, "--out", str(out)]) == EXIT_OK
    printed = capsys.readouterr().out
    assert "t* = 0" in printed
    assert "rows" in printed and "chebyshev radius" in printed
    data = json.loads(out.read_text())
    ts = TerminalSet.from_dict(
        {
            "omega": data["omega"],
            "iterations": data["iterations"],
            "converged": data["converged"],
            **data["horizons"]["3"],
        }
    )
    assert ts.iterations == 0 and ts.converged
    assert abs(support(ts.omega, np.array([1.0, 0.0])) - 1.0) < 1e-9
    assert abs(support(ts.omega, np.array([-1.0, 0.0])) - 1.0) < 1e-9


def test_invariant_cache_hit_on_second_invocation(tmp_path, capsys):
    cfg = scalar_demo_config(tmp_path)
    out = tmp_path / "ts.json"
    assert main(["invariant", "--config", cfg, "--out", str(out)]) == EXIT_OK
    stamp = out.stat().st_mtime_ns
    capsys.readouterr()
    assert main(["invariant", "--config", cfg, "--out", str(out)]) == EXIT_OK
    assert "cache hit" in capsys.readouterr().out
    assert out.stat().st_mtime_ns == stamp  # untouched on a clean hit


def test_invariant_oversized_disturbance_exits_2(tmp_path, capsys):
    cfg = scalar_demo_config(tmp_path, w_half=2.0)
    rc = main(["invariant", "--config", cfg, "--out", str(tmp_path / "ts.json")])
    assert rc == EXIT_EMPTY
    assert "empty terminal set" in capsys.readouterr().err


def test_invariant_iteration_cap_exits_3(tmp_path, capsys):
    c, s = math.cos(0.7), math.sin(0.7)
    data = {
        "system": {
            "A": [[0.995 * c, -0.995 * s], [0.995 * s, 0.995 * c]],
            "B": [[0.0], [1.0]],
            "K": [[0.0, 0.0]],
            "state_lo": [-1.0, -1.0],
            "state_hi": [1.0, 1.0],
            "input_lo": [-1.0],
            "input_hi": [1.0],
        },
        "disturbance": {"mode": "explicit", "halfwidth": [1e-4, 1e-4]},
        "N": 2,
        "terminal": {"max_iterations": 2, "cache": "rot.json"},
    }
    cfg = write_json(tmp_path / "rot.json", data)
    rc = main(["invariant", "--config", cfg, "--out", str(tmp_path / "ts.json")])
    assert rc == EXIT_NOT_CONVERGED
    printed = capsys.readouterr()
    assert "cap hit" in printed.out
    assert "re-verified" in printed.err


def test_invariant_moore_greitzer_cache_reuse(capsys):
    cfg_path = os.path.join(mg_setup.CACHE_DIR, "default_cfg.json")
    write_json(cfg_path, {"terminal": {"cache": mg_setup.TERMINAL_CACHE}})
    rc = main(["invariant", "--config", cfg_path, "--out", mg_setup.TERMINAL_CACHE])
    assert rc == EXIT_OK
    assert "cache hit" in capsys.readouterr().out


# ---------------------------------------------------------------------------
# simulate command


def test_simulate_writes_row_count_and_reports(tmp_path, capsys):
    cfg = mg_config(tmp_path, run={"steps": 5})
    out = tmp_path / "lin.csv"
    rc = main(["simulate", "--config", cfg, "--controller", "linear", "--out", str(out)])
    assert rc == EXIT_OK
    printed = capsys.readouterr().out
    assert "settling step = " in printed
    assert "final cost = " in printed
    assert "max constraint violation = 0" in printed
    cols = read_csv(out)
    assert cols["u"].size == 5


def test_simulate_rejects_unknown_controller(tmp_path, capsys):
    cfg = mg_config(tmp_path)
    rc = main(
        ["simulate", "--config", cfg, "--controller", "pid", "--out", str(tmp_path / "x.csv")]
    )
    assert rc == EXIT_USAGE
    assert "choose from" in capsys.readouterr().err


def test_simulate_rejects_custom_system(tmp_path, capsys):
    cfg = scalar_demo_config(tmp_path)
    rc = main(
        ["simulate", "--config", cfg, "--controller", "linear", "--out", str(tmp_path / "x.csv")]
    )
    assert rc == EXIT_CONFIG
    assert "config error" in capsys.readouterr().err


def test_simulate_deterministic_byte_identical(tmp_path):
    cfg = mg_config(tmp_path, run={"steps": 12})
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    for out in (a, b):
        rc = main(
            ["simulate", "--config", cfg, "--controller", "lbmpc-l2nw", "--out", str(out)]
        )
        assert rc == EXIT_OK
    assert a.read_bytes() == b.read_bytes()


def test_simulate_emits_plot_script(tmp_path):
    cfg = mg_config(tmp_path, run={"steps": 3})
    out = tmp_path / "run.csv"
    script = tmp_path / "run.gnuplot"
    rc = main(
        [
            "simulate",
            "--config",
            cfg,
            "--controller",
            "linear",
            "--out",
            str(out),
            "--plot-script",
            str(script),
        ]
    )
    assert rc == EXIT_OK
    text = script.read_text()
    assert "set datafile separator ','" in text
    assert "run.csv" in text


# ---------------------------------------------------------------------------
# compare command


def _two_linear_logs(tmp_path):
    cfg = mg_config(tmp_path, run={"steps": 8})
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    for out in (a, b):
        assert (
            main(["simulate", "--config", cfg, "--controller", "linear", "--out", str(out)])
            == EXIT_OK
        )
    return cfg, a, b


def test_compare_identical_logs(tmp_path, capsys):
    cfg, a, b = _two_linear_logs(tmp_path)
    report_path = tmp_path / "report.json"
    rc = main(
        ["compare", str(a), str(b), "--config", cfg, "--json-out", str(report_path)]
    )
    assert rc == EXIT_OK
    report = json.loads(report_path.read_text())
    assert report["control_gap"]["max"] == 0.0
    assert report["settling"]["a"] == report["settling"]["b"]
    assert report["cum_cost"]["a"] == report["cum_cost"]["b"]
    printed = capsys.readouterr().out
    assert "control_gap: median = 0, max = 0" in printed


def test_compare_single_metric_and_stdout_json(tmp_path, capsys):
    _, a, b = _two_linear_logs(tmp_path)
    capsys.readouterr()
    rc = main(["compare", str(a), str(b), "--metric", "control_gap"])
    assert rc == EXIT_OK
    printed = capsys.readouterr().out.strip().splitlines()
    assert printed[0].startswith("control_gap:")
    report = json.loads(printed[-1])
    assert set(report) == {"control_gap"}


def test_compare_unknown_metric_exits_64(tmp_path, capsys):
    _, a, b = _two_linear_logs(tmp_path)
    assert main(["compare", str(a), str(b), "--metric", "speed"]) == EXIT_USAGE


def test_compare_missing_log_exits_config(tmp_path, capsys):
    assert main(["compare", "/nonexistent/a.csv", "/nonexistent/b.csv"]) == EXIT_CONFIG


def test_settling_step_definition():
    phi = np.array([0.3, 0.02, 0.005, 0.004, 0.003])
    psi = np.zeros(5)
    assert settling_step(phi, psi, 0.0, 0.0) == 2
    assert settling_step(phi + 1.0, psi, 1.0, 0.0) == 2  # offset equilibria
    assert settling_step(np.array([0.5, 0.5]), np.zeros(2), 0.0, 0.0) is None
    assert settling_step(np.zeros(3), np.zeros(3), 0.0, 0.0) == 0


# ---------------------------------------------------------------------------
# sweep command


def test_sweep_runs_scenarios_in_pool(tmp_path, capsys):
    data = {
        "terminal": {"cache": mg_setup.TERMINAL_CACHE},
        "run": {"steps": 4},
        "sweep": {
            "jobs": 2,
            "scenarios": [
                {"id": "lin", "controller": "linear"},
                {
                    "id": "param",
                    "controller": "lbmpc-param",
                    "overrides": {"run": {"steps": 6}},
                },
            ],
        },
    }
    cfg = write_json(tmp_path / "sweep.json", data)
    out_dir = tmp_path / "out"
    rc = main(["sweep", "--config", cfg, "--out-dir", str(out_dir)])
    assert rc == EXIT_OK
    lin = read_csv(out_dir / "lin.csv")
    par = read_csv(out_dir / "param.csv")
    assert lin["u"].size == 4
    assert par["u"].size == 6
    printed = capsys.readouterr().out
    assert "lin:" in printed and "param:" in printed
    # the shared cache was copied in, not rebuilt
    cache_files = [p for p in os.listdir(out_dir) if p.startswith("terminal_")]
    assert len(cache_files) == 1


def test_sweep_requires_sweep_block(tmp_path, capsys):
    cfg = mg_config(tmp_path)
    rc = main(["sweep", "--config", cfg, "--out-dir", str(tmp_path / "out")])
    assert rc == EXIT_CONFIG
    assert "no sweep block" in capsys.readouterr().err


def test_sweep_rejects_duplicate_ids(tmp_path):
    data = {
        "sweep": {
            "scenarios": [
                {"id": "a", "controller": "linear"},
                {"id": "a", "controller": "linear"},
            ]
        }
    }
    with pytest.raises(ConfigError, match="duplicate"):
        RunConfig.from_dict(data)


# ---------------------------------------------------------------------------
# entry point plumbing


def test_env_var_sets_log_level(tmp_path, monkeypatch, capsys):
    monkeypatch.setenv("LBMPC_LOG", "DEBUG")
    cfg = scalar_demo_config(tmp_path)
    assert main(["invariant", "--config", cfg, "--out", str(tmp_path / "t.json")]) == EXIT_OK
    assert logging.getLogger("lbmpc").level == logging.DEBUG
    monkeypatch.setenv("LBMPC_LOG", "WARNING")
    assert main(["invariant", "--config", cfg, "--out", str(tmp_path / "t.json")]) == EXIT_OK
    assert logging.getLogger("lbmpc").level == logging.WARNING


def test_bad_arguments_exit_usage(capsys):
    assert main(["invariant"]) == EXIT_USAGE
    assert main(["frobnicate"]) == EXIT_USAGE
