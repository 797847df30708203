"""Command-line entry point: ``psps <command> [options]``."""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import math
import os
import platform
import sys
import time
from pathlib import Path
from typing import Any, Sequence

import numpy as np
import scipy

from . import __version__
from .bench import (
    STRATEGIES,
    SWEEP_STRATEGIES,
    BenchError,
    SweepPoint,
    build_model,
    emit_results,
    strategy_mode,
    sweep_strategies,
    value_ladder,
)
from .dispatch import FORECAST_RULES, DispatchError, run_receding_horizon, write_dispatch
from .formulation import (
    FirstStagePlan,
    FormulationError,
    PlanError,
    StochConfig,
    energized_wfpi,
    extract_plan,
    scenario_costs,
)
from .grid import (
    BUNDLED_CASE,
    CaseError,
    GridCase,
    bundled_case_path,
    load_case,
    slice_hours,
    with_voll,
)
from .milp import Status
from .scenarios import (
    ScenarioError,
    ScenarioSet,
    distribute_system_profile,
    quintile_from_case,
    read_historical_csv,
    read_scenarios_csv,
    reduce_scenarios,
    normal_quintile_set,
    single_scenario,
    slice_scenarios,
    synthetic_days,
)
from .solver import SolverConfig, solve_mip

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib

log = logging.getLogger("psps")

EXIT_OK, EXIT_USAGE, EXIT_INFEASIBLE, EXIT_LIMIT = 0, 1, 2, 3
COMMANDS = ("solve-det", "solve-sto", "dispatch", "sweep", "ladder")
SCENARIO_SOURCES = ("case", "quintile", "csv", "historical", "synthetic")

# values used when neither a flag nor the config file sets an option
DEFAULTS: dict[str, Any] = {
    "case": "ieee14.json",
    "strategy": "wfpi",
    "r_tol": None,
    "k": None,
    "active": None,
    "pi_tol": None,
    "beta": 0.0,
    "epsilon": 0.95,
    "voll": None,
    "hour": None,
    "horizon": None,
    "out": "out",
    "jobs": 1,
    "seed": 0,
    "mip_gap": 1e-6,
    "time_limit": None,
    "scenarios": None,  # per command: "case" for sweep, "quintile" otherwise
    "scenario_file": None,
    "n_scenarios": 5,
    "days": 90,
    "rel_sigma": 0.08,
    "budgets": None,
    "slack_weight": 1.0,
    "plan": None,
    "realized": None,
    "forecast": "perfect",
    "complete": True,
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str) -> None:  # usage problems exit with 1, not argparse's 2
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _floats(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a comma-separated list of numbers, got {text!r}") from None


def _ints(text: str) -> list[int]:
    try:
        out = []
        for part in text.split(","):
            part = part.strip()
            if not part:
                continue
            if "-" in part[1:]:
                lo, hi = part.split("-", 1)
                out.extend(range(int(lo), int(hi) + 1))
            else:
                out.append(int(part))
        return out
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected integers or ranges like 0-20, got {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    g = common.add_argument_group("inputs")
    g.add_argument("--case", help="case JSON (the bundled ieee14.json is used when the file is absent)")
    g.add_argument("--config", help="TOML or JSON run configuration; flags override its values")
    g.add_argument("--strategy", help=f"one of {', '.join(STRATEGIES)} (sweep also accepts 'all')")
    g.add_argument("--r-tol", dest="r_tol", type=_floats, help="WFPI tolerance (comma list for sweeps)")
    g.add_argument("--k", type=int, help="lines removed by nmks")
    g.add_argument("--active", type=int, help="active-line budget, translated per strategy")
    g.add_argument("--pi-tol", dest="pi_tol", type=float, help="probability bound for wlfp")
    g.add_argument("--budgets", type=_ints, help="sweep budgets, e.g. 0-20 or 6,7,8")
    g.add_argument("--beta", type=_floats, help="risk aversion in [0,1] (comma list for sweeps)")
    g.add_argument("--epsilon", type=float, help="CVaR confidence level in [0,1)")
    g.add_argument("--voll", type=float, help="override the value of lost load of every demand ($/MWh)")
    g.add_argument("--hour", type=int, help="first hour to model; alone it selects single-hour mode")
    g.add_argument("--horizon", type=int, help="number of hours to model")
    g.add_argument("--scenarios", choices=SCENARIO_SOURCES, help="scenario source for two-stage commands")
    g.add_argument("--scenario-file", dest="scenario_file", help="scenario or historical CSV")
    g.add_argument("--n-scenarios", dest="n_scenarios", type=int, help="scenarios kept by reduction")
    g.add_argument("--plan", help="plan JSON for dispatch (solved deterministically when absent)")
    g.add_argument("--realized", help="scenario CSV whose first scenario is the realized demand")
    g.add_argument("--forecast", choices=FORECAST_RULES, help="forecast rule for dispatch windows")
    g.add_argument("--no-complete", dest="complete", action="store_const", const=False,
                   help="skip the zero-cost energization pass in sweeps")
    r = common.add_argument_group("run")
    r.add_argument("--out", help="output directory")
    r.add_argument("--jobs", type=int, help="parallel sweep workers")
    r.add_argument("--seed", type=int, help="seed for synthetic scenarios")
    r.add_argument("--mip-gap", dest="mip_gap", type=float, help="relative MIP gap")
    r.add_argument("--time-limit", dest="time_limit", type=float, help="seconds per solve")

    parser = _Parser(prog="psps", description="Wildfire-aware de-energization planning on a transmission grid.")
    parser.add_argument("--version", action="version", version=f"psps {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="command")
    sub.required = True
    helps = {
        "solve-det": "solve the single-scenario planning model",
        "solve-sto": "solve the two-stage mean-CVaR planning model",
        "dispatch": "run receding-horizon dispatch under a fixed plan",
        "sweep": "sweep strategies over active-line budgets (and betas)",
        "ladder": "compute wait-and-see, recourse and expected-value costs",
    }
    for name in COMMANDS:
        sub.add_parser(name, parents=[common], help=helps[name], description=helps[name])
    return parser


def load_config_file(path: str | Path) -> dict[str, Any]:
    p = Path(path)
    try:
        raw = p.read_bytes()
    except OSError as exc:
        raise UsageError(f"cannot read config {p}: {exc}") from None
    try:
        if p.suffix.lower() == ".json":
            data = json.loads(raw.decode("utf-8"))
        else:
            data = tomllib.loads(raw.decode("utf-8"))
    except (ValueError, tomllib.TOMLDecodeError) as exc:
        raise UsageError(f"cannot parse config {p}: {exc}") from None
    if not isinstance(data, dict):
        raise UsageError(f"config {p} must hold a table of options")
    out = {}
    for key, value in data.items():
        name = key.replace("-", "_")
        if name not in DEFAULTS:
            raise UsageError(f"config {p}: unknown option {key!r}")
        out[name] = value
    return out


def resolve_options(args: argparse.Namespace) -> dict[str, Any]:
    """Defaults, then the config file, then explicit flags."""
    opts = dict(DEFAULTS)
    if args.config:
        opts.update(load_config_file(args.config))
    opts["config"] = args.config
    for key in DEFAULTS:
        value = getattr(args, key, None)
        if value is not None:
            opts[key] = value
    for key in ("r_tol", "beta"):
        v = opts[key]
        if v is not None and not isinstance(v, list):
            opts[key] = [v]
    if opts["budgets"] is not None and not isinstance(opts["budgets"], list):
        opts["budgets"] = [opts["budgets"]]
    if isinstance(opts["budgets"], str):
        opts["budgets"] = _ints(opts["budgets"])
    return opts


# -- helpers -------------------------------------------------------------------------------

def _load_case(opts: dict) -> GridCase:
    case = load_case(opts["case"])
    if opts["voll"] is not None:
        case = with_voll(case, opts["voll"])
    return _window(case, opts)


def _window(case: GridCase, opts: dict) -> GridCase:
    hour, horizon = opts["hour"], opts["horizon"]
    if hour is None and horizon is None:
        return case
    first = case.first_hour if hour is None else hour
    n = 1 if horizon is None else horizon
    if n < 1:
        raise UsageError("--horizon must be at least 1")
    return slice_hours(case, first, first + n - 1)


def _scenarios(case: GridCase, full_case: GridCase, opts: dict) -> ScenarioSet:
    """Scenario set matching the (possibly windowed) case."""
    source = opts["scenarios"] or "quintile"
    if source == "case":
        return single_scenario(case.demand_matrix())
    if source == "quintile":
        return quintile_from_case(case, opts["rel_sigma"])
    if source == "csv":
        if not opts["scenario_file"]:
            raise UsageError("--scenarios csv needs --scenario-file")
        sset = read_scenarios_csv(opts["scenario_file"])
        if sset.horizon != case.horizon:
            sset = slice_scenarios(sset, case.hours[0], case.hours[-1], full_case.first_hour)
        return sset
    if source == "historical":
        if not opts["scenario_file"]:
            raise UsageError("--scenarios historical needs --scenario-file")
        _, profiles = read_historical_csv(opts["scenario_file"])
        mats = [_cut(distribute_system_profile(p, full_case), case, full_case) for p in profiles]
        return reduce_scenarios(mats, int(opts["n_scenarios"]))
    # seeded synthetic days around the case profile, summarized by their normal quintiles
    days = synthetic_days(full_case, int(opts["days"]), float(opts["rel_sigma"]), int(opts["seed"]))
    mats = np.stack([_cut(distribute_system_profile(d, full_case), case, full_case) for d in days])
    return normal_quintile_set(mats)


def _cut(matrix: np.ndarray, case: GridCase, full_case: GridCase) -> np.ndarray:
    a = case.hours[0] - full_case.first_hour
    return matrix[:, a:a + case.horizon]


def _solver_config(opts: dict) -> SolverConfig:
    tl = opts["time_limit"]
    return SolverConfig(rel_mip_gap=float(opts["mip_gap"]),
                        time_limit_s=math.inf if tl is None else float(tl))


def _stoch_config(opts: dict, beta: float | None = None) -> StochConfig:
    if beta is None:
        beta = opts["beta"][0] if opts["beta"] else 0.0
    return StochConfig(beta=float(beta), epsilon=float(opts["epsilon"]), slack_weight=float(opts["slack_weight"]))


def _mode(case: GridCase, opts: dict, cfg: StochConfig):
    strategy = str(opts["strategy"]).lower()
    nlines = len(case.lines)
    active = opts["active"]
    if strategy == "nmks" and opts["k"] is not None:
        active = nlines - int(opts["k"])
    if strategy == "mnwf" and active is None and opts["k"] is not None:
        active = nlines - int(opts["k"])
    r_tol = opts["r_tol"][0] if opts["r_tol"] else None
    if strategy in ("nmks", "mnwf") and active is None:
        raise UsageError(f"--strategy {strategy} needs --k or --active")
    if strategy in ("wfnc", "wfpi", "wfsl") and r_tol is None and active is None:
        raise UsageError(f"--strategy {strategy} needs --r-tol or --active")
    if strategy == "wlfp" and opts["pi_tol"] is None and active is None:
        raise UsageError("--strategy wlfp needs --pi-tol or --active")
    return strategy_mode(case, strategy, active, r_tol, opts["pi_tol"], cfg)


def _status_exit(status: Status) -> int:
    if status is Status.INFEASIBLE or status is Status.UNBOUNDED:
        return EXIT_INFEASIBLE
    if status in (Status.GAP_LIMIT, Status.ITERATION_LIMIT):
        return EXIT_LIMIT
    return EXIT_OK


def _write_json(path: Path, data: Any) -> None:
    path.write_text(json.dumps(data, indent=2, sort_keys=True, default=_jsonable) + "\n", encoding="utf-8")


def _jsonable(value: Any) -> Any:
    if isinstance(value, (np.integer,)):
        return int(value)
    if isinstance(value, (np.floating,)):
        return float(value)
    if isinstance(value, np.ndarray):
        return value.tolist()
    if dataclasses.is_dataclass(value):
        return {"type": type(value).__name__, **dataclasses.asdict(value)}
    return str(value)


def _solution_report(case: GridCase, model, sol, plan: FirstStagePlan | None) -> dict:
    rep: dict[str, Any] = {
        "status": sol.status.value,
        "objective": sol.objective,
        "bound": sol.bound,
        "mip_gap": sol.mip_gap,
        "nodes": sol.nodes,
        "iterations": sol.iterations,
    }
    if sol.values is not None:
        rep["scenarios"] = [dataclasses.asdict(c) | {"total": c.total} for c in scenario_costs(model, sol.values)]
    if plan is not None:
        rep["energized_lines"] = {str(h): sorted(plan.energized(h)) for h in plan.hours}
        rep["committed_generators"] = {str(h): sorted(plan.committed(h)) for h in plan.hours}
        rep["wildfire_risk"] = energized_wfpi(case, plan)
        rep["r_slack"] = plan.r_slack
    return rep


# -- commands --------------------------------------------------------------------------------

def _solve(case: GridCase, scenarios: ScenarioSet, opts: dict, out: Path, stochastic: bool) -> int:
    cfg = _stoch_config(opts)
    mode, cfg = _mode(case, opts, cfg)
    model = build_model(case, scenarios, mode, cfg) if stochastic else build_model(
        case, single_scenario(scenarios.mean_demand()), mode, cfg)
    log_lines: list[str] = []
    sol = solve_mip(model, _solver_config(opts), on_log=log_lines.append)
    (out / "solve.log").write_text("".join(line + "\n" for line in log_lines), encoding="utf-8")
    plan = None
    if sol.values is not None:
        plan = extract_plan(sol, model, case)
        _write_json(out / "plan.json", plan.to_dict())
    _write_json(out / "solution.json", {"mode": mode, "config": cfg, **_solution_report(case, model, sol, plan)})
    if sol.values is not None:
        print(f"status={sol.status.value} objective={sol.objective:.6f} gap={sol.mip_gap:.3g} "
              f"risk={energized_wfpi(case, plan):.2f}")
    else:
        print(f"status={sol.status.value}", file=sys.stderr)
    return _status_exit(sol.status)


def cmd_solve_det(opts: dict, out: Path) -> int:
    case = _load_case(opts)
    return _solve(case, single_scenario(case.demand_matrix()), opts, out, stochastic=False)


def cmd_solve_sto(opts: dict, out: Path) -> int:
    full = load_case(opts["case"])
    if opts["voll"] is not None:
        full = with_voll(full, opts["voll"])
    case = _window(full, opts)
    return _solve(case, _scenarios(case, full, opts), opts, out, stochastic=True)


def cmd_dispatch(opts: dict, out: Path) -> int:
    case = _load_case(opts)
    if opts["plan"]:
        try:
            plan = FirstStagePlan.from_dict(json.loads(Path(opts["plan"]).read_text(encoding="utf-8")))
        except (OSError, ValueError) as exc:
            raise UsageError(f"cannot read plan {opts['plan']}: {exc}") from None
    else:
        cfg = _stoch_config(opts)
        mode, cfg = _mode(case, opts, cfg)
        model = build_model(case, single_scenario(case.demand_matrix()), mode, cfg)
        sol = solve_mip(model, _solver_config(opts))
        if sol.values is None:
            print(f"planning solve ended with status {sol.status.value}", file=sys.stderr)
            return _status_exit(sol.status)
        plan = extract_plan(sol, model, case)
        _write_json(out / "plan.json", plan.to_dict())
    if opts["realized"]:
        sset = read_scenarios_csv(opts["realized"])
        realized = sset.scenarios[0].demand
        if realized.shape[1] != case.horizon:
            full = load_case(opts["case"])
            realized = slice_scenarios(sset, case.hours[0], case.hours[-1], full.first_hour).scenarios[0].demand
    else:
        realized = case.demand_matrix()
    try:
        result = run_receding_horizon(case, plan, realized, opts["forecast"], _solver_config(opts))
    except DispatchError as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_INFEASIBLE if exc.status == "infeasible" else EXIT_LIMIT
    write_dispatch(result, out)
    s = result.summary()
    print(f"served_mwh={s['served_mwh']:.4f} total_cost={s['total_cost']:.4f} blackout_buses={s['blackout_buses']}")
    return EXIT_OK


def cmd_sweep(opts: dict, out: Path) -> int:
    full = load_case(opts["case"])
    if opts["voll"] is not None:
        full = with_voll(full, opts["voll"])
    case = _window(full, opts)
    strategy = str(opts["strategy"]).lower()
    strategies = SWEEP_STRATEGIES if strategy == "all" else (strategy,)
    for s in strategies:
        if s not in STRATEGIES:
            raise UsageError(f"unknown strategy {s!r}")
    betas = opts["beta"] or [0.0]
    # sweeps plan against the case profile unless a scenario source is chosen explicitly
    source = opts["scenarios"] or "case"
    scenarios = None if source == "case" else _scenarios(case, full, {**opts, "scenarios": source})
    grid: list[SweepPoint] = []
    budgets = opts["budgets"] if opts["budgets"] is not None else list(range(len(case.lines) + 1))
    for s in strategies:
        for beta in betas:
            if opts["r_tol"] and s in ("wfnc", "wfpi", "wfsl"):
                grid.extend(SweepPoint(s, None, float(r), float(beta)) for r in opts["r_tol"])
            else:
                grid.extend(SweepPoint(s, int(b), None, float(beta)) for b in budgets)
    if any(b < 0 or b > len(case.lines) for b in budgets):
        raise UsageError(f"budgets must lie in [0, {len(case.lines)}]")
    records = sweep_strategies(case, scenarios, grid, _stoch_config(opts, 0.0), _solver_config(opts),
                               jobs=int(opts["jobs"]), complete=bool(opts["complete"]))
    paths = emit_results(records, out / "sweep.csv")
    print(f"{len(records)} points written to {paths[0]}")
    worst = EXIT_OK
    for r in records:
        if r.status in ("infeasible", "unbounded"):
            worst = max(worst, EXIT_INFEASIBLE)
        elif r.status != "optimal":
            worst = max(worst, EXIT_LIMIT)
    return worst


def cmd_ladder(opts: dict, out: Path) -> int:
    full = load_case(opts["case"])
    if opts["voll"] is not None:
        full = with_voll(full, opts["voll"])
    case = _window(full, opts)
    scenarios = _scenarios(case, full, opts)
    cfg = _stoch_config(opts)
    mode, cfg = _mode(case, opts, cfg)
    try:
        ladder = value_ladder(case, scenarios, mode, cfg, _solver_config(opts))
    except BenchError as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_LIMIT
    data = dataclasses.asdict(ladder) | {"mrvpi": ladder.mrvpi, "mrvss": ladder.mrvss}
    _write_json(out / "ladder.json", data)
    print(" ".join(f"{k}={v:.6f}" for k, v in data.items()))
    return EXIT_OK


HANDLERS = {
    "solve-det": cmd_solve_det,
    "solve-sto": cmd_solve_sto,
    "dispatch": cmd_dispatch,
    "sweep": cmd_sweep,
    "ladder": cmd_ladder,
}


def _file_digest(path: str) -> str | None:
    try:
        return hashlib.sha256(Path(path).read_bytes()).hexdigest()
    except OSError:
        return None


def _manifest(command: str, argv: Sequence[str], opts: dict, code: int, wall: float) -> dict:
    canonical = json.dumps(opts, sort_keys=True, default=_jsonable)
    case_path = Path(opts["case"])
    if not case_path.exists() and case_path.name in (BUNDLED_CASE, "ieee14"):
        case_path = bundled_case_path()
    inputs = {"case": str(case_path), "case_sha256": _file_digest(str(case_path))}
    for key in ("config", "scenario_file", "plan", "realized"):
        if opts.get(key):
            inputs[key] = str(opts[key])
            inputs[f"{key}_sha256"] = _file_digest(str(opts[key]))
    return {
        "command": command,
        "argv": list(argv),
        "inputs": inputs,
        "options": json.loads(canonical),
        "config_sha256": hashlib.sha256(canonical.encode("utf-8")).hexdigest(),
        "versions": {"psps": __version__, "python": platform.python_version(),
                     "numpy": np.__version__, "scipy": scipy.__version__},
        "exit_code": code,
        "wall_time_s": wall,
    }


def _configure_logging() -> None:
    level = os.environ.get("PSPS_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)


def main(argv: Sequence[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    _configure_logging()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"psps: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    started = time.monotonic()
    try:
        opts = resolve_options(args)
        out = Path(opts["out"])
        out.mkdir(parents=True, exist_ok=True)
        code = HANDLERS[args.command](opts, out)
    except UsageError as exc:
        print(f"psps: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (CaseError, ScenarioError, FormulationError, PlanError, BenchError, ValueError) as exc:
        print(f"psps: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"psps: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    _write_json(out / "run_manifest.json", _manifest(args.command, argv, opts, code, time.monotonic() - started))
    return code


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
