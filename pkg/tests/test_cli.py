import csv
import json
import subprocess
import sys
import time

import numpy as np
import pytest

from feiopt import admm, energy, problem
from feiopt.cli import ALLOC_HEADER, main, read_allocation, resolve_config
from feiopt.scenario import paper_analog, random_instance


@pytest.fixture
def cfg_path(tmp_path):
    path = tmp_path / "cfg.json"
    path.write_text(random_instance(7).to_json())
    return path


@pytest.fixture(scope="module")
def analog_runs(tmp_path_factory):
    base = tmp_path_factory.mktemp("analog")
    codes, times = {}, {}
    for mode in ("joint", "lb-only", "ub-only"):
        t0 = time.perf_counter()
        codes[mode] = main(["solve", "--config", "paper-analog", "--mode", mode, "--out", str(base / mode)])
        times[mode] = time.perf_counter() - t0
    return base, codes, times


def read_rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def test_solve_writes_artifacts(cfg_path, tmp_path):
    out = tmp_path / "run"
    assert main(["solve", "--config", str(cfg_path), "--out", str(out)]) == 0
    summary = json.loads((out / "summary.json").read_text())
    assert {"converged", "iterations", "objective", "cost", "utilization_slack", "energy", "residuals"} <= set(summary)
    assert set(summary["residuals"]) == {"primal", "dual"}
    with open(out / "allocation.csv") as fh:
        assert fh.readline().strip().split(",") == ALLOC_HEADER
    assert admm.audit_trace(admm.read_trace(out / "trace.jsonl"), random_instance(7)).passed


def test_analog_config_converges_quickly(analog_runs):
    _, codes, times = analog_runs
    assert codes["joint"] == 0
    assert times["joint"] < 60


def test_lb_only_sends_nothing_unlicensed(analog_runs):
    base, codes, _ = analog_runs
    rows = read_rows(base / "lb-only" / "allocation.csv")
    assert all(float(r["ub_bits"]) == 0.0 for r in rows)
    rows = read_rows(base / "ub-only" / "allocation.csv")
    assert all(float(r["lb_bits"]) == 0.0 for r in rows)


def test_artifacts_round_trip(analog_runs):
    base, _, _ = analog_runs
    cfg = paper_analog()
    for mode in ("joint", "lb-only", "ub-only"):
        summary = json.loads((base / mode / "summary.json").read_text())
        alloc = read_allocation(base / mode / "allocation.csv", cfg)
        ev = problem.evaluate(alloc, cfg)
        assert energy.total_energy(alloc, cfg) == pytest.approx(summary["energy"], rel=1e-9)
        assert energy.total_cost(alloc, cfg) == pytest.approx(summary["cost"], rel=1e-9)
        assert ev.objective == pytest.approx(summary["objective"], rel=1e-9)
        money = sum(float(r["money"]) for r in read_rows(base / mode / "allocation.csv"))
        assert money == pytest.approx(summary["cost"], rel=1e-9)


def test_mode_all(tmp_path):
    out = tmp_path / "all"
    assert main(["solve", "--config", "paper-analog", "--mode", "all", "--out", str(out)]) == 0
    table = json.loads((out / "modes.json").read_text())
    assert table["joint"]["objective"] <= min(table["lb-only"]["objective"], table["ub-only"]["objective"]) + 1e-9
    for mode in table:
        assert (out / mode / "allocation.csv").exists()


def test_not_converged_exit_code(cfg_path, tmp_path):
    assert main(["solve", "--config", str(cfg_path), "--max-iter", "2", "--out", str(tmp_path / "o")]) == 2
    assert (tmp_path / "o" / "summary.json").exists()


@pytest.mark.parametrize(
    "argv",
    [
        ["solve", "--config", "missing.json", "--out", "OUT"],
        ["solve", "--config", "BAD", "--out", "OUT"],
        ["solve", "--config", "paper-analog", "--eta", "-1", "--out", "OUT"],
        ["solve", "--config", "paper-analog"],
        ["sweep", "--config", "paper-analog", "--param", "compute_cap", "--values", "0.5,0.3", "--out", "OUT"],
        ["sweep", "--config", "paper-analog", "--param", "compute_cap", "--values", "a,b", "--out", "OUT"],
        ["sweep", "--config", "paper-analog", "--param", "tau", "--values", "1", "--out", "OUT"],
    ],
)
def test_invalid_input_exit_code(argv, tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text('{"tau": 1}')
    argv = [str(bad) if a == "BAD" else str(tmp_path / "o") if a == "OUT" else a for a in argv]
    assert main(argv) == 1
    assert "error" in capsys.readouterr().err


def test_fedsim_requires_allocation(tmp_path, capsys):
    code = main(["fedsim", "--config", "paper-analog", "--alloc", str(tmp_path / "nope.csv"), "--rounds", "3",
                 "--out", str(tmp_path)])
    assert code == 1
    assert "feiopt solve" in capsys.readouterr().err
    assert main(["fedsim", "--config", "paper-analog", "--rounds", "3", "--out", str(tmp_path)]) == 1


def test_fedsim_zero_rounds(analog_runs, tmp_path):
    base, _, _ = analog_runs
    out = tmp_path / "fl"
    code = main(["fedsim", "--config", "paper-analog", "--alloc", str(base / "joint" / "allocation.csv"),
                 "--rounds", "0", "--out", str(out)])
    assert code == 0
    assert (out / "curve.csv").read_text().splitlines() == ["round,participants,loss,accuracy"]


def test_fedsim_explicit_samples(tmp_path):
    code = main(["fedsim", "--config", "paper-analog", "--samples", "100,200,300,400", "--rounds", "4",
                 "--participation", "0.5", "--out", str(tmp_path)])
    assert code == 0
    assert len(read_rows(tmp_path / "curve.csv")) == 4


def test_joint_curve_close_to_lb_only(analog_runs, tmp_path):
    base, _, _ = analog_runs
    ratios = []
    for seed in range(5):
        finals = {}
        for mode in ("joint", "lb-only"):
            out = tmp_path / f"{mode}-{seed}"
            code = main(["fedsim", "--config", "paper-analog", "--alloc", str(base / mode / "allocation.csv"),
                         "--rounds", "30", "--seed", str(seed), "--out", str(out)])
            assert code == 0
            finals[mode] = float(read_rows(out / "curve.csv")[-1]["loss"])
        ratios.append(abs(finals["joint"] - finals["lb-only"]) / finals["lb-only"])
    assert np.median(ratios) <= 0.10


def test_sweep_compute_cap(tmp_path):
    out = tmp_path / "sw"
    code = main(["sweep", "--config", "paper-analog", "--param", "compute_cap", "--values", "0.15,0.3,0.5,0.8",
                 "--out", str(out)])
    assert code == 0
    rows = read_rows(out / "sweep.csv")
    assert [float(r["value"]) for r in rows] == [0.15, 0.3, 0.5, 0.8]
    costs = [float(r["reduced_objective"]) for r in rows]
    assert all(b <= a + 1e-9 for a, b in zip(costs, costs[1:]))
    flags = json.loads((out / "sweep_summary.json").read_text())
    assert flags["monotone"] and flags["diminishing_returns"]


@pytest.mark.parametrize("param, values", [("energy_budget", "1,2,5,10"), ("gamma", "0.01,0.05,0.2")])
def test_sweep_other_parameters_monotone(tmp_path, param, values):
    out = tmp_path / param
    assert main(["sweep", "--config", "paper-analog", "--param", param, "--values", values, "--out", str(out)]) == 0
    assert json.loads((out / "sweep_summary.json").read_text())["monotone"]


def test_sweep_requirement(tmp_path):
    out = tmp_path / "req"
    code = main(["sweep", "--config", "paper-analog", "--param", "requirement", "--values", "0.95,0.975,0.985",
                 "--round-budget", "200", "--out", str(out)])
    assert code == 0
    rows = read_rows(out / "sweep.csv")
    objs = [float(r["objective"]) for r in rows]
    assert all(b >= a - 1e-9 for a, b in zip(objs, objs[1:]))


def test_sweep_records_failed_rows(tmp_path):
    out = tmp_path / "fail"
    code = main(["sweep", "--config", "paper-analog", "--param", "compute_cap", "--values", "0.01,0.5",
                 "--out", str(out)])
    assert code == 2
    rows = read_rows(out / "sweep.csv")
    assert rows[0]["error"] and not rows[1]["error"]
    assert float(rows[1]["objective"]) > 0


def test_sweep_parallel_matches_serial(tmp_path):
    args = ["sweep", "--config", "paper-analog", "--param", "gamma", "--values", "0.02,0.05,0.1"]
    assert main(args + ["--out", str(tmp_path / "a")]) == 0
    assert main(args + ["--jobs", "3", "--out", str(tmp_path / "b")]) == 0
    assert (tmp_path / "a" / "sweep.csv").read_bytes() == (tmp_path / "b" / "sweep.csv").read_bytes()


def test_builtin_config_matches_generator():
    assert resolve_config("paper-analog") == paper_analog()


def test_module_entry_point(tmp_path):
    proc = subprocess.run(
        [sys.executable, "-m", "feiopt", "solve", "--config", "paper-analog", "--max-iter", "1", "--out", str(tmp_path)],
        capture_output=True,
        text=True,
    )
    assert proc.returncode == 2
