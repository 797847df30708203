"""Receding-horizon real-time dispatch with the first-stage plan held fixed."""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .formulation import FirstStagePlan, FormulationError, build_recourse
from .grid import GridCase, islands, slice_hours
from .milp import Status, format_name
from .scenarios import ScenarioSet
from .solver import SolverConfig, solve_lp

log = logging.getLogger(__name__)

FORECAST_RULES = ("perfect", "persistence")
_SNAP = 1e-9


class DispatchError(RuntimeError):
    """An hourly dispatch LP could not be solved."""

    def __init__(self, hour: int, status: str) -> None:
        super().__init__(f"dispatch LP for hour {hour} ended with status {status}")
        self.hour = hour
        self.status = status


@dataclass(frozen=True)
class RealizedDemand:
    """Demand (MW) that actually materializes, indexed [demand, hour position]."""

    demand: np.ndarray

    def __post_init__(self) -> None:
        arr = np.array(self.demand, dtype=float)
        if arr.ndim != 2:
            raise ValueError("realized demand must be a (demands x hours) matrix")
        if not np.all(np.isfinite(arr)) or (arr < 0).any():
            raise ValueError("realized demand must be finite and non-negative")
        arr.setflags(write=False)
        object.__setattr__(self, "demand", arr)

    def check(self, case: GridCase) -> None:
        if self.demand.shape != (len(case.demands), case.horizon):
            raise ValueError(f"realized demand shape {self.demand.shape} does not match the case "
                             f"({len(case.demands)}, {case.horizon})")


@dataclass
class DispatchResult:
    hours: tuple[int, ...]
    gen_ids: tuple[int, ...]
    demand_ids: tuple[int, ...]
    line_ids: tuple[int, ...]
    p: np.ndarray  # MW, [generator, hour]
    x: np.ndarray  # served fraction, [demand, hour]
    flow: np.ndarray  # MW measured low -> high bus id, [line, hour]
    load: np.ndarray  # realized MW, [demand, hour]
    prod_cost: float
    voll_cost: float
    commit_cost: float
    lost_load: dict[int, str] = field(default_factory=dict)  # bus -> "blackout" | "partial"

    @property
    def total_cost(self) -> float:
        return self.prod_cost + self.voll_cost + self.commit_cost

    @property
    def served_mwh(self) -> float:
        return float(np.sum(self.x * self.load))

    @property
    def demand_mwh(self) -> float:
        return float(np.sum(self.load))

    @property
    def blackout_buses(self) -> list[int]:
        return sorted(b for b, kind in self.lost_load.items() if kind == "blackout")

    def summary(self) -> dict:
        return {
            "served_mwh": self.served_mwh,
            "demand_mwh": self.demand_mwh,
            "total_cost": float(self.total_cost),
            "prod_cost": float(self.prod_cost),
            "voll_cost": float(self.voll_cost),
            "commit_cost": float(self.commit_cost),
            "blackout_buses": self.blackout_buses,
            "partial_buses": sorted(b for b, kind in self.lost_load.items() if kind == "partial"),
        }


def _forecast(realized: np.ndarray, t: int, rule: str) -> np.ndarray:
    """Demand used for the window starting at hour position t."""
    if rule == "perfect":
        return realized[:, t:]
    return np.repeat(realized[:, t:t + 1], realized.shape[1] - t, axis=1)


def _plan_window(plan: FirstStagePlan, hours: list[int]) -> None:
    missing = [h for h in hours if h not in plan.hours]
    if missing:
        raise FormulationError(f"plan does not cover hours {missing}")


def run_receding_horizon(
    case: GridCase,
    plan: FirstStagePlan,
    realized: RealizedDemand | np.ndarray,
    forecast_rule: str = "perfect",
    config: SolverConfig | None = None,
) -> DispatchResult:
    """Solve hour windows tau..H in turn and implement only each window's first hour.

    The implemented output of hour tau is the ramp starting point of window tau+1, so the
    stitched trajectory respects the ramp limits end to end.
    """
    if forecast_rule not in FORECAST_RULES:
        raise ValueError(f"unknown forecast rule {forecast_rule!r}; expected one of {FORECAST_RULES}")
    if not isinstance(realized, RealizedDemand):
        realized = RealizedDemand(realized)
    realized.check(case)
    hours = list(case.hours)
    _plan_window(plan, hours)
    plan.validate(case)
    cfg = config or SolverConfig()
    load = realized.demand
    G, D, L, T = len(case.generators), len(case.demands), len(case.lines), len(hours)
    p = np.zeros((G, T))
    x = np.zeros((D, T))
    flow = np.zeros((L, T))
    prod = voll = 0.0
    previous: dict[int, float] | None = None
    for t, h in enumerate(hours):
        window = slice_hours(case, h, hours[-1])
        demand = _forecast(load, t, forecast_rule)
        model = build_recourse(window, demand, plan, previous)
        sol = solve_lp(model, cfg)
        if sol.status is not Status.OPTIMAL:
            raise DispatchError(h, sol.status.value)
        vals = sol.values
        for i, g in enumerate(case.generators):
            p[i, t] = max(float(vals[model.var_id(format_name("p_g", g.id, h))]), 0.0)
            prod += g.marginal_cost * p[i, t]
        for i, d in enumerate(case.demands):
            frac = float(vals[model.var_id(format_name("x_d", d.id, h))])
            # snap simplex round-off so isolated demand reads as exactly unserved
            x[i, t] = 0.0 if frac < _SNAP else 1.0 if frac > 1.0 - _SNAP else frac
            voll += d.voll * load[i, t] * (1.0 - x[i, t])
        for i, ln in enumerate(case.lines):
            flow[i, t] = float(vals[model.var_id(format_name("f_l", ln.id, h))])
        previous = {g.id: p[i, t] for i, g in enumerate(case.generators)}
        log.debug("hour %d: prod=%.4f voll=%.4f", h, prod, voll)
    result = DispatchResult(
        hours=tuple(hours),
        gen_ids=tuple(g.id for g in case.generators),
        demand_ids=tuple(d.id for d in case.demands),
        line_ids=tuple(ln.id for ln in case.lines),
        p=p, x=x, flow=flow, load=np.array(load),
        prod_cost=prod, voll_cost=voll, commit_cost=plan.commitment_cost(case),
    )
    result.lost_load = classify_lost_load(case, plan, result)
    return result


def supplied_buses(case: GridCase, plan: FirstStagePlan, hour: int) -> set[int]:
    """Buses connected through energized lines to a generator committed at ``hour``."""
    gen_bus = {g.id: g.bus for g in case.generators}
    sources = {gen_bus[gid] for gid in plan.committed(hour)}
    reach: set[int] = set()
    for comp in islands(case, plan.energized(hour)):
        if sources.intersection(comp):
            reach.update(comp)
    return reach


def classify_lost_load(case: GridCase, plan: FirstStagePlan, result: DispatchResult,
                       tol: float = 1e-6) -> dict[int, str]:
    """Label each bus with unserved demand: "blackout" when it never had a supply path in an
    hour it had demand, "partial" otherwise."""
    shed: dict[int, bool] = {}
    reached: dict[int, bool] = {}
    for t, h in enumerate(result.hours):
        reach = supplied_buses(case, plan, h)
        for i, d in enumerate(case.demands):
            load = result.load[i, t]
            if load <= 0:
                continue
            connected = d.bus in reach
            if not connected and result.x[i, t] > tol:
                raise AssertionError(f"demand {d.id} at isolated bus {d.bus} is served in hour {h}")
            reached[d.bus] = reached.get(d.bus, False) or connected
            if load * (1.0 - result.x[i, t]) > tol * max(1.0, load):
                shed[d.bus] = True
    return {bus: ("partial" if reached[bus] else "blackout") for bus in sorted(shed)}


def expected_dispatch(case: GridCase, plan: FirstStagePlan, scenarios: ScenarioSet,
                      forecast_rule: str = "perfect",
                      config: SolverConfig | None = None) -> tuple[float, list[DispatchResult]]:
    """Probability-weighted total dispatch cost over several realizations."""
    results = [run_receding_horizon(case, plan, s.demand, forecast_rule, config) for s in scenarios]
    expected = math.fsum(s.probability * r.total_cost for s, r in zip(scenarios, results))
    return expected, results


def write_dispatch(result: DispatchResult, out_dir: str | Path, prefix: str = "dispatch") -> list[Path]:
    """Write generation and demand CSVs plus a summary JSON; returns the written paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    gen_path = out / f"{prefix}_generation.csv"
    dem_path = out / f"{prefix}_demand.csv"
    sum_path = out / f"{prefix}_summary.json"
    with gen_path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["hour", "gen_id", "p_mw"])
        for t, h in enumerate(result.hours):
            for i, gid in enumerate(result.gen_ids):
                w.writerow([h, gid, repr(float(result.p[i, t]))])
    with dem_path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["hour", "demand_id", "x_frac", "shed_mw"])
        for t, h in enumerate(result.hours):
            for i, did in enumerate(result.demand_ids):
                shed = result.load[i, t] * (1.0 - result.x[i, t])
                w.writerow([h, did, repr(float(result.x[i, t])), repr(float(shed))])
    sum_path.write_text(json.dumps(result.summary(), indent=2, sort_keys=True) + "\n")
    return [gen_path, dem_path, sum_path]
