"""Command-line runner: ``solve``, ``sweep`` and ``fedsim``.

Exit codes: 0 success (solver converged), 2 solver did not converge (or a
sweep row failed), 1 invalid input.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from importlib import resources
from pathlib import Path
from typing import Sequence

import numpy as np

from . import admm, energy, fedsim, loadmodel
from .problem import InfeasibleInstanceError
from .scenario import Allocation, ScenarioConfig, ScenarioError, load_config

EXIT_OK, EXIT_INVALID, EXIT_NOT_CONVERGED = 0, 1, 2
ALLOC_HEADER = ["device_id", "server_id", "ub_bits", "lb_bits", "energy_ub", "energy_lb", "money"]
SWEEP_PARAMS = ("compute_cap", "energy_budget", "gamma", "requirement")
BUILTIN_CONFIGS = {"paper-analog": "paper_analog.json"}


class UsageError(Exception):
    pass


def resolve_config(name: str) -> ScenarioConfig:
    if name in BUILTIN_CONFIGS:
        text = resources.files("feiopt.data").joinpath(BUILTIN_CONFIGS[name]).read_text()
        return load_config(json.loads(text))
    if not Path(name).exists():
        raise UsageError(f"config file {name!r} not found")
    return load_config(name)


# -- artifacts -------------------------------------------------------------------


def write_allocation(path, alloc: Allocation, cfg: ScenarioConfig) -> None:
    br = energy.breakdown(alloc, cfg)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(ALLOC_HEADER)
        for i, d in enumerate(cfg.devices):
            money = br.money_ub[i] + br.money_lb[i]
            w.writerow([
                d.id, int(alloc.server_of[i]), repr(float(alloc.ub_bits[i])), repr(float(alloc.lb_bits[i])),
                repr(float(br.energy_ub[i])), repr(float(br.energy_lb[i])), repr(float(money)),
            ])


def read_allocation(path, cfg: ScenarioConfig | None = None) -> Allocation:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != ALLOC_HEADER:
            raise UsageError(f"{path}: allocation header must be {','.join(ALLOC_HEADER)}")
        rows = sorted(reader, key=lambda r: int(r["device_id"]))
    alloc = Allocation(
        ub_bits=np.array([float(r["ub_bits"]) for r in rows]),
        lb_bits=np.array([float(r["lb_bits"]) for r in rows]),
        server_of=np.array([int(r["server_id"]) for r in rows]),
    )
    if cfg is not None and alloc.ub_bits.size != cfg.num_devices:
        raise UsageError(f"{path}: {alloc.ub_bits.size} devices, config has {cfg.num_devices}")
    return alloc


def solve_options(args) -> admm.AdmmOptions:
    return admm.AdmmOptions(eta=args.eta, max_iter=args.max_iter, seed=args.seed, workers=args.workers)


def _write_run(out: Path, result: admm.AdmmResult, cfg: ScenarioConfig, seed: int) -> None:
    out.mkdir(parents=True, exist_ok=True)
    summary = result.summary()
    summary.update(
        mode=cfg.mode,
        seed=seed,
        continuous_objective=result.continuous_objective,
        eta=result.eta,
        warnings=result.warnings,
    )
    (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    write_allocation(out / "allocation.csv", result.allocation, cfg)
    admm.write_trace(out / "trace.jsonl", result.trace)
    for msg in result.warnings:
        print(f"warning: {cfg.mode}: {msg}", file=sys.stderr)


def cmd_solve(args) -> int:
    cfg = resolve_config(args.config)
    out = Path(args.out)
    if args.mode == "all":
        results = admm.solve_modes(cfg, solve_options(args))
        for mode, res in results.items():
            _write_run(out / mode, res, cfg.with_mode(mode), args.seed)
        table = {m: {"objective": r.objective, "cost": r.cost, "converged": r.converged} for m, r in results.items()}
        (out / "modes.json").write_text(json.dumps(table, indent=2) + "\n")
        return EXIT_OK if all(r.converged for r in results.values()) else EXIT_NOT_CONVERGED
    if args.mode:
        cfg = cfg.with_mode(args.mode)
    result = admm.run(cfg, solve_options(args))
    _write_run(out, result, cfg, args.seed)
    return EXIT_OK if result.converged else EXIT_NOT_CONVERGED


# -- sweep -------------------------------------------------------------------------


def apply_param(cfg: ScenarioConfig, param: str, value: float, round_budget: int = 200) -> ScenarioConfig:
    if param == "compute_cap":
        return cfg.with_compute_cap(value)
    if param == "energy_budget":
        new = replace(cfg, energy_budget=float(value))
    elif param == "gamma":
        new = replace(cfg, gamma=float(value))
    elif param == "requirement":
        n_min = loadmodel.min_data_for(float(value), round_budget, loadmodel.table1_records())
        servers = tuple(replace(s, min_data_bits=n_min * cfg.bits_per_sample) for s in cfg.servers)
        new = replace(cfg, servers=servers)
    else:
        raise UsageError(f"unknown sweep parameter {param!r}; choose from {', '.join(SWEEP_PARAMS)}")
    new.validate()
    return new


def _sweep_row(job) -> dict:
    cfg, param, value, opts, round_budget = job
    row = {"value": value}
    try:
        sub = apply_param(cfg, param, value, round_budget)
        res = admm.run(sub, opts)
    except (InfeasibleInstanceError, ScenarioError, loadmodel.InfeasibleRequirementError, admm.NumericalError) as exc:
        row.update(error=str(exc), converged=False)
        return row
    mean_cap = float(np.mean([s.compute_cap for s in sub.servers]))
    row.update(
        objective=res.objective,
        reduced_objective=res.objective - mean_cap,
        cost=res.cost,
        utilization_slack=res.utilization_slack,
        energy=res.energy,
        converged=res.converged,
        iterations=res.iterations,
        error="",
    )
    return row


# expected direction of the tracked quantity as the parameter grows
_TRACK = {
    "compute_cap": ("reduced_objective", -1),
    "energy_budget": ("objective", -1),
    "gamma": ("objective", +1),
    "requirement": ("objective", +1),
}


def annotate(rows: list[dict], param: str, rtol: float = 1e-5, atol: float = 1e-6) -> dict:
    """Add monotonicity and marginal-gain columns; returns overall flags."""
    key, sign = _TRACK[param]
    prev = None
    prev_slope = None
    monotone, diminishing = True, True
    for row in rows:
        row["monotone"] = ""
        row["marginal_gain"] = ""
        row["diminishing"] = ""
        if row.get("error") or key not in row:
            continue
        if prev is not None:
            tol = atol + rtol * max(abs(prev[key]), abs(row[key]))
            delta = row[key] - prev[key]
            ok = sign * delta >= -tol
            row["monotone"] = ok
            monotone &= ok
            dv = row["value"] - prev["value"]
            if dv > 0:
                slope = sign * delta / dv  # change per unit of the parameter, in the expected direction
                row["marginal_gain"] = slope
                if param == "compute_cap" and prev_slope is not None:
                    shrink = slope <= prev_slope + tol / dv
                    row["diminishing"] = shrink
                    diminishing &= shrink
                prev_slope = slope
        prev = row
    flags = {"param": param, "tracked": key, "monotone": monotone}
    if param == "compute_cap":
        flags["diminishing_returns"] = diminishing
    return flags


SWEEP_HEADER = [
    "value", "objective", "reduced_objective", "cost", "utilization_slack", "energy", "converged", "iterations",
    "monotone", "marginal_gain", "diminishing", "error",
]


def run_sweep(cfg, param, values, opts, jobs=1, round_budget=200):
    tasks = [(cfg, param, v, opts, round_budget) for v in values]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            rows = list(pool.map(_sweep_row, tasks))  # map keeps input order
    else:
        rows = [_sweep_row(t) for t in tasks]
    flags = annotate(rows, param)
    return rows, flags


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return v


def cmd_sweep(args) -> int:
    cfg = resolve_config(args.config)
    if args.mode:
        cfg = cfg.with_mode(args.mode)
    if args.param not in SWEEP_PARAMS:
        raise UsageError(f"unknown sweep parameter {args.param!r}; choose from {', '.join(SWEEP_PARAMS)}")
    try:
        values = [float(v) for v in args.values.split(",") if v.strip()]
    except ValueError as exc:
        raise UsageError(f"--values must be comma-separated numbers ({exc})") from None
    if not values:
        raise UsageError("--values is empty")
    if any(b <= a for a, b in zip(values, values[1:])):
        raise UsageError("--values must be strictly ascending")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows, flags = run_sweep(cfg, args.param, values, solve_options(args), args.jobs, args.round_budget)
    with open(out / "sweep.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=SWEEP_HEADER)
        w.writeheader()
        for row in rows:
            w.writerow({k: _fmt(row.get(k, "")) for k in SWEEP_HEADER})
    (out / "sweep_summary.json").write_text(json.dumps(flags, indent=2) + "\n")
    bad = [r for r in rows if r.get("error") or not r.get("converged")]
    for r in bad:
        print(f"warning: value {r['value']}: {r.get('error') or 'not converged'}", file=sys.stderr)
    return EXIT_NOT_CONVERGED if bad else EXIT_OK


# -- fedsim ------------------------------------------------------------------------


def samples_from_allocation(alloc: Allocation, cfg: ScenarioConfig) -> list[int]:
    totals = np.bincount(alloc.server_of, weights=alloc.ub_bits + alloc.lb_bits, minlength=cfg.num_servers)
    return [int(math.floor(t / cfg.bits_per_sample + 1e-9)) for t in totals]


def cmd_fedsim(args) -> int:
    cfg = resolve_config(args.config)
    if args.samples:
        samples = [int(v) for v in args.samples.split(",")]
        if len(samples) != cfg.num_servers:
            raise UsageError(f"--samples needs {cfg.num_servers} values")
    else:
        if not args.alloc:
            raise UsageError("fedsim needs --alloc (an allocation.csv written by `feiopt solve`) or --samples")
        if not Path(args.alloc).exists():
            raise UsageError(f"allocation file {args.alloc!r} not found; run `feiopt solve` first")
        samples = samples_from_allocation(read_allocation(args.alloc, cfg), cfg)
    fed = fedsim.FedConfig(
        samples=tuple(samples),
        batch=tuple(s.batch for s in cfg.servers),
        passes=tuple(s.passes for s in cfg.servers),
        participation=args.participation,
        rounds=args.rounds,
        lr=args.lr,
        seed=args.seed,
    )
    try:
        fed.validate()
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    curve = fedsim.run_rounds(fed)
    curve.write_csv(out / "curve.csv")
    return EXIT_OK


# -- entry point -------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    """Argument errors exit with the invalid-input code, not argparse's 2."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_INVALID, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="feiopt", description="Federated edge data-upload optimisation.")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", required=True, help="scenario JSON path, or 'paper-analog'")
        sp.add_argument("--out", required=True, help="output directory")
        sp.add_argument("--seed", type=int, default=42)

    def solver(sp, modes=("joint", "lb-only", "ub-only")):
        sp.add_argument("--mode", choices=modes)
        sp.add_argument("--eta", type=float, default=1.0)
        sp.add_argument("--max-iter", type=int, default=2000)
        sp.add_argument("--workers", type=int, default=1, help="threads for the per-server updates")

    s = sub.add_parser("solve", help="solve one scenario")
    common(s)
    solver(s, ("joint", "lb-only", "ub-only", "all"))
    s.set_defaults(func=cmd_solve)

    w = sub.add_parser("sweep", help="solve over a range of one parameter")
    common(w)
    solver(w)
    w.add_argument("--param", required=True, choices=SWEEP_PARAMS)
    w.add_argument("--values", required=True, help="comma-separated, ascending")
    w.add_argument("--jobs", type=int, default=1, help="parallel sub-runs")
    w.add_argument("--round-budget", type=int, default=200, choices=[50, 200],
                   help="training rounds used to map an accuracy requirement to a data floor")
    w.set_defaults(func=cmd_sweep)

    f = sub.add_parser("fedsim", help="simulate federated training on solved data volumes")
    common(f)
    f.add_argument("--alloc", help="allocation.csv from `solve`")
    f.add_argument("--samples", help="comma-separated per-server sample counts (overrides --alloc)")
    f.add_argument("--rounds", type=int, required=True)
    f.add_argument("--participation", type=float, default=1.0)
    f.add_argument("--lr", type=float, default=0.05)
    f.set_defaults(func=cmd_fedsim)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # --help or an argument error
        return int(exc.code or 0)
    try:
        if getattr(args, "max_iter", 1) < 1 or getattr(args, "eta", 1.0) <= 0:
            raise UsageError("--max-iter must be >= 1 and --eta > 0")
        return args.func(args)
    except (UsageError, ScenarioError, InfeasibleInstanceError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
