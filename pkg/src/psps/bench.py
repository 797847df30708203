"""Strategy sweeps, CVaR reporting and the stochastic value ladder."""

from __future__ import annotations

import csv
import dataclasses
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .formulation import (
    FirstStagePlan,
    MnwfHeuristic,
    Nmk,
    RiskMode,
    StochConfig,
    WfpiSlack,
    WfpiTol,
    WlfpLog,
    apply_plan,
    build_deterministic,
    build_stochastic_first_stage,
    committed_generators,
    cvar_from_model,
    energized_wfpi,
    extract_plan,
    mnwf_fix,
    scenario_costs,
)
from .grid import GridCase, lines_by_wfpi, wfpi_prefix_levels
from .milp import MilpModel, MilpSolution, Status
from .scenarios import ScenarioSet, cvar, single_scenario
from .solver import SolverConfig, solve_lp, solve_mip

log = logging.getLogger(__name__)

STRATEGIES = ("nmks", "mnwf", "wfnc", "wfpi", "wfsl", "wlfp")
SWEEP_STRATEGIES = ("nmks", "mnwf", "wfnc", "wfpi", "wfsl")


class BenchError(RuntimeError):
    pass


# -- strategies -------------------------------------------------------------------------

def wlfp_tolerance(case: GridCase, budget: int) -> float:
    """Probability bound reached when the ``budget`` lowest-WFPI lines are on and the rest off."""
    on = mnwf_fix(case, budget)
    total = 0.0
    for ln in case.lines:
        pi = ln.ignition_prob
        if not pi:
            continue
        total += math.log1p(-pi) if on[ln.id] else math.log(pi)
    return min(math.exp(total), 1.0)


def strategy_mode(case: GridCase, strategy: str, budget: int | None = None, r_tol: float | None = None,
                  pi_tol: float | None = None, base: StochConfig | None = None) -> tuple[RiskMode, StochConfig]:
    """Risk mode and objective configuration for a named strategy.

    ``budget`` is the number of active lines; WFPI-based strategies translate it to the
    cumulative WFPI of the ``budget`` lowest-risk lines unless ``r_tol`` is given.
    """
    base = base or StochConfig()
    strategy = strategy.lower()
    if strategy not in STRATEGIES:
        raise BenchError(f"unknown strategy {strategy!r}; expected one of {STRATEGIES}")
    nlines = len(case.lines)
    if budget is not None and not 0 <= budget <= nlines:
        raise BenchError(f"budget {budget} outside [0, {nlines}]")
    if strategy in ("nmks", "mnwf") and budget is None:
        raise BenchError(f"strategy {strategy} needs an active-line budget")
    if strategy in ("wfnc", "wfpi", "wfsl") and r_tol is None:
        if budget is None:
            raise BenchError(f"strategy {strategy} needs r_tol or an active-line budget")
        r_tol = wfpi_prefix_levels(case)[budget]
    if strategy == "nmks":
        return Nmk(nlines - budget), base
    if strategy == "mnwf":
        return MnwfHeuristic(budget), base
    if strategy == "wfnc":
        return WfpiTol(float(r_tol)), dataclasses.replace(base, include_commitment_costs=False)
    if strategy == "wfpi":
        return WfpiTol(float(r_tol)), base
    if strategy == "wfsl":
        return WfpiSlack(float(r_tol)), base
    if pi_tol is None:
        if budget is None:
            raise BenchError("strategy wlfp needs pi_tol or an active-line budget")
        pi_tol = wlfp_tolerance(case, budget)
    return WlfpLog(float(pi_tol)), base


def build_model(case: GridCase, scenarios: ScenarioSet, mode: RiskMode, cfg: StochConfig) -> MilpModel:
    """Deterministic model for a single scenario, the two-stage model otherwise."""
    if len(scenarios) == 1:
        return build_deterministic(case, scenarios.scenarios[0], mode, cfg)
    return build_stochastic_first_stage(case, scenarios, mode, cfg)


# -- records ----------------------------------------------------------------------------

@dataclass(frozen=True)
class SweepPoint:
    strategy: str
    budget: int | None = None
    r_tol: float | None = None
    beta: float = 0.0
    pi_tol: float | None = None


@dataclass(frozen=True)
class SweepRecord:
    strategy: str
    budget: int  # requested active-line budget, -1 when the point was given by r_tol only
    active_lines: int  # most lines energized in any hour
    r_tol: float
    beta: float
    served_mw: float  # expected MWh served over the horizon (MW in single-hour mode)
    prod_cost: float
    commit_cost: float
    voll_cost: float
    wildfire_risk: float  # largest hourly energized WFPI
    exp_cost: float
    cvar_cost: float
    gens_committed: int
    objective: float
    mip_gap: float
    status: str


RECORD_FIELDS = tuple(f.name for f in dataclasses.fields(SweepRecord))
_INT_FIELDS = {"budget", "active_lines", "gens_committed"}
_STR_FIELDS = {"strategy", "status"}


def _failed_record(point: SweepPoint, r_tol: float, status: str) -> SweepRecord:
    nan = math.nan
    return SweepRecord(point.strategy, -1 if point.budget is None else point.budget, 0, r_tol, point.beta,
                       nan, nan, nan, nan, nan, nan, nan, 0, nan, nan, status)


def _plan_values(model: MilpModel, plan: FirstStagePlan, config: SolverConfig) -> MilpSolution:
    fixed = apply_plan(model.copy(), plan)
    return solve_lp(fixed, config)


def complete_energization(case: GridCase, model: MilpModel, plan: FirstStagePlan, solution: MilpSolution,
                          config: SolverConfig) -> tuple[FirstStagePlan, MilpSolution]:
    """Energize lines the optimum left off whenever that costs nothing.

    Lines that are off all day are tried in ascending (WFPI, id) order; each is switched on
    for the whole horizon if the model stays feasible with every other decision held and the
    objective does not rise.  Ties between equally cheap plans are thereby resolved towards
    the most energized network, independent of which optimal vertex the solver returned.
    """
    best = solution
    for ln in lines_by_wfpi(case):
        i = plan.line_ids.index(ln.id)
        if plan.line_on[i].any():
            continue
        trial_on = plan.line_on.copy()
        trial_on[i, :] = True
        trial = dataclasses.replace(plan, line_on=trial_on)
        res = _plan_values(model, trial, config)
        if res.status is not Status.OPTIMAL:
            continue
        tol = 1e-7 * max(1.0, abs(best.objective))
        if res.objective <= best.objective + tol:
            plan, best = trial, res
    return plan, best


def _evaluate(case: GridCase, scenarios: ScenarioSet, point: SweepPoint, base: StochConfig,
              config: SolverConfig, complete: bool) -> SweepRecord:
    cfg = dataclasses.replace(base, beta=point.beta)
    mode, cfg = strategy_mode(case, point.strategy, point.budget, point.r_tol, point.pi_tol, cfg)
    if isinstance(mode, (WfpiTol, WfpiSlack)):
        r_tol = mode.r_tol
    else:
        # budget-driven modes report the WFPI level their budget corresponds to
        r_tol = wfpi_prefix_levels(case)[point.budget] if point.budget is not None else math.nan
    model = build_model(case, scenarios, mode, cfg)
    sol = solve_mip(model, config)
    if sol.status not in (Status.OPTIMAL, Status.GAP_LIMIT) or sol.values is None:
        log.warning("%s: solve ended with status %s", point, sol.status.value)
        return _failed_record(point, r_tol, sol.status.value)
    plan = extract_plan(sol, model, case)
    if complete and not isinstance(mode, MnwfHeuristic):
        plan, polished = complete_energization(case, model, plan, sol, config)
        if polished is not sol:
            sol = dataclasses.replace(polished, mip_gap=sol.mip_gap, bound=sol.bound, nodes=sol.nodes,
                                      status=sol.status)
    parts = scenario_costs(model, sol.values)
    probs = np.array([p.probability for p in parts])
    # dollar cost of operation; the WFPI slack penalty stays in the objective only
    totals = [p.commit + p.prod + p.voll for p in parts]

    def expect(attr: str) -> float:
        return float(math.fsum(p.probability * getattr(p, attr) for p in parts))

    return SweepRecord(
        strategy=point.strategy,
        budget=-1 if point.budget is None else int(point.budget),
        active_lines=int(plan.line_on.sum(axis=0).max()) if plan.line_on.size else 0,
        r_tol=float(r_tol),
        beta=float(point.beta),
        served_mw=expect("served_mwh"),
        prod_cost=expect("prod"),
        commit_cost=expect("commit"),
        voll_cost=expect("voll"),
        wildfire_risk=energized_wfpi(case, plan),
        exp_cost=float(math.fsum(p * t for p, t in zip(probs, totals))),
        cvar_cost=report_cvar(probs, totals, cfg.epsilon),
        gens_committed=committed_generators(plan),
        objective=float(sol.objective),
        mip_gap=float(sol.mip_gap),
        status=sol.status.value,
    )


def _work(args: tuple) -> SweepRecord:
    return _evaluate(*args)


def sweep_grid(case: GridCase, strategies: Sequence[str] = SWEEP_STRATEGIES,
               budgets: Iterable[int] | None = None, betas: Sequence[float] = (0.0,)) -> list[SweepPoint]:
    """Cartesian grid in a fixed order: strategy, then beta, then budget."""
    budgets = list(range(len(case.lines) + 1)) if budgets is None else list(budgets)
    return [SweepPoint(s, b, None, float(beta)) for s in strategies for beta in betas for b in budgets]


def sweep_strategies(
    case: GridCase,
    scenarios: ScenarioSet | None,
    grid: Sequence[SweepPoint],
    cfg: StochConfig | None = None,
    config: SolverConfig | None = None,
    jobs: int = 1,
    complete: bool = True,
) -> list[SweepRecord]:
    """Solve every grid point; records come back in grid order whatever the completion order.

    A point whose solve fails yields a record carrying the solver status and NaN metrics.
    """
    scenarios = scenarios if scenarios is not None else single_scenario(case.demand_matrix())
    cfg = cfg or StochConfig()
    config = config or SolverConfig()
    tasks = [(case, scenarios, p, cfg, config, complete) for p in grid]
    if jobs <= 1 or len(tasks) <= 1:
        return [_work_safe(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(_work_safe, tasks))


def _work_safe(args: tuple) -> SweepRecord:
    point = args[2]
    try:
        return _work(args)
    except Exception as exc:  # keep sweeping; the failure is recorded on the point
        log.error("%s failed: %s", point, exc)
        return _failed_record(point, math.nan, f"error: {type(exc).__name__}")


def beta_sweep(case: GridCase, scenarios: ScenarioSet, strategy: str, budget: int | None = None,
               r_tol: float | None = None, betas: Sequence[float] | None = None,
               cfg: StochConfig | None = None, config: SolverConfig | None = None,
               jobs: int = 1) -> list[SweepRecord]:
    betas = [round(0.1 * i, 10) for i in range(11)] if betas is None else list(betas)
    grid = [SweepPoint(strategy, budget, r_tol, float(b)) for b in betas]
    return sweep_strategies(case, scenarios, grid, cfg, config, jobs, complete=False)


# -- metrics ----------------------------------------------------------------------------

def report_cvar(probabilities: Sequence[float] | ScenarioSet, costs: Sequence[float], epsilon: float) -> float:
    """Discrete tail CVaR of per-scenario costs at confidence ``epsilon``."""
    return cvar(probabilities, costs, epsilon)


@dataclass(frozen=True)
class ValueLadder:
    mrws: float
    mrrp: float
    mrev: float
    gap: float = 0.0  # largest relative MIP gap among the solves behind the three values

    @property
    def mrvpi(self) -> float:
        return self.mrrp - self.mrws

    @property
    def mrvss(self) -> float:
        return self.mrev - self.mrrp

    def violations(self, rel_tol: float | None = None) -> list[str]:
        """Ordering violations beyond ``rel_tol`` (default: twice the recorded gap)."""
        tol = 2.0 * self.gap if rel_tol is None else rel_tol
        out = []
        scale = max(1.0, abs(self.mrrp))
        if self.mrws > self.mrrp + tol * scale + 1e-7 * scale:
            out.append(f"MRWS {self.mrws} exceeds MRRP {self.mrrp}")
        if self.mrrp > self.mrev + tol * scale + 1e-7 * scale:
            out.append(f"MRRP {self.mrrp} exceeds MREV {self.mrev}")
        return out


def _solved(model: MilpModel, config: SolverConfig, what: str) -> MilpSolution:
    sol = solve_mip(model, config)
    if sol.status not in (Status.OPTIMAL, Status.GAP_LIMIT) or sol.values is None:
        raise BenchError(f"{what}: solve ended with status {sol.status.value}")
    return sol


def value_ladder(case: GridCase, scenarios: ScenarioSet, mode: RiskMode, cfg: StochConfig | None = None,
                 config: SolverConfig | None = None) -> ValueLadder:
    """Wait-and-see, recourse and expected-value costs under the same mean-CVaR measure."""
    cfg = cfg or StochConfig()
    config = config or SolverConfig()
    gaps = []
    ws = []
    for s in scenarios:
        sol = _solved(build_deterministic(case, s, mode, cfg), config, f"wait-and-see scenario {s.id}")
        ws.append(sol.objective)
        gaps.append(sol.mip_gap)
    probs = scenarios.probabilities
    mrws = (1.0 - cfg.beta) * float(probs @ np.array(ws)) + cfg.beta * report_cvar(probs, ws, cfg.epsilon)

    rp_model = build_stochastic_first_stage(case, scenarios, mode, cfg)
    rp = _solved(rp_model, config, "recourse problem")
    gaps.append(rp.mip_gap)

    ev_model = build_deterministic(case, scenarios.mean_scenario(), mode, cfg)
    ev = _solved(ev_model, config, "expected-value problem")
    gaps.append(ev.mip_gap)
    plan = extract_plan(ev, ev_model, case)
    eev = solve_lp(apply_plan(build_stochastic_first_stage(case, scenarios, mode, cfg), plan), config)
    if eev.status is not Status.OPTIMAL:
        raise BenchError(f"expected-value plan evaluation ended with status {eev.status.value}")
    ladder = ValueLadder(mrws=mrws, mrrp=rp.objective, mrev=eev.objective, gap=max(gaps))
    bad = ladder.violations(max(2.0 * ladder.gap, config.rel_mip_gap * 2.0))
    if bad:
        raise BenchError("value ladder out of order: " + "; ".join(bad))
    return ladder


def cvar_consistency(model: MilpModel, solution: MilpSolution) -> tuple[float, float] | None:
    """(CVaR from the model's nu/gamma, CVaR recomputed from scenario costs) for a two-stage optimum."""
    internal = cvar_from_model(model, solution.values)
    if internal is None:
        return None
    cfg: StochConfig = model.meta["config"]
    parts = scenario_costs(model, solution.values)
    terms = [p.total if cfg.include_commitment_costs else p.voll + p.slack for p in parts]
    return internal, report_cvar([p.probability for p in parts], terms, cfg.epsilon)


# -- output -----------------------------------------------------------------------------

def _fmt(value) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)


def emit_results(records: Sequence[SweepRecord], path: str | Path) -> tuple[Path, Path]:
    """Write ``path`` (one row per record) and ``<stem>_long.csv`` (strategy, budget, beta, metric, value)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(RECORD_FIELDS)
        for r in records:
            w.writerow([_fmt(getattr(r, f)) for f in RECORD_FIELDS])
    long_path = path.with_name(path.stem + "_long.csv")
    metrics = [f for f in RECORD_FIELDS if f not in ("strategy", "budget", "beta", "status")]
    with long_path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["strategy", "budget", "beta", "metric", "value"])
        for r in records:
            for m in metrics:
                w.writerow([r.strategy, r.budget, _fmt(r.beta), m, _fmt(getattr(r, m))])
    return path, long_path


def read_results(path: str | Path) -> list[SweepRecord]:
    """Parse a CSV written by :func:`emit_results`."""
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows or tuple(rows[0]) != RECORD_FIELDS:
        raise BenchError(f"{path}: unexpected header")
    out = []
    for row in rows[1:]:
        kw = {}
        for name, text in zip(RECORD_FIELDS, row):
            if name in _STR_FIELDS:
                kw[name] = text
            elif name in _INT_FIELDS:
                kw[name] = int(text)
            else:
                kw[name] = float(text)
        out.append(SweepRecord(**kw))
    return out
