"""PSPS unit-commitment models: deterministic, two-stage mean-CVaR, and the storage extension.

Variable naming (hours are absolute, scenario index last for recourse
variables of the stochastic model):

    z_g[g,t] zu_g[g,t] zd_g[g,t]   generator on / start-up / shut-down
    z_l[l,t]                       line energized
    r_slack                        WFPI slack of the slack-equality mode
    p_g[g,t(,w)] paux_g[g,t(,w)]   output and output above minimum
    f_l[l,t(,w)] theta[b,t(,w)]    line flow (lower-id bus to higher-id bus) and bus angle
    x_d[d,t(,w)]                   fraction of demand served
    nu gamma[w]                    CVaR auxiliaries
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence, Union

import numpy as np

from .grid import GridCase, Line, lines_by_wfpi
from .milp import INF, MilpModel, MilpSolution, Sense, Status, format_name, parse_name
from .scenarios import Scenario, ScenarioSet, check_against_case


class FormulationError(ValueError):
    pass


class PlanError(ValueError):
    """A first-stage plan violates the commitment or energization rules."""


# -- configuration ----------------------------------------------------------------

@dataclass(frozen=True)
class Nmk:
    """At most |L| - k lines energized each hour."""
    k: int


@dataclass(frozen=True)
class WfpiTol:
    """Energized WFPI at most r_tol each hour."""
    r_tol: float


@dataclass(frozen=True)
class WfpiSlack:
    """Energized WFPI equals r_tol - R_slack each hour, 0 <= R_slack <= r_slack_max.

    ``r_slack_max=None`` selects the largest single-line WFPI of the case.
    """
    r_tol: float
    r_slack_max: float | None = None


@dataclass(frozen=True)
class MnwfHeuristic:
    """The ``active`` lowest-WFPI lines fixed on, all others off."""
    active: int


@dataclass(frozen=True)
class WlfpLog:
    """Log-linear bound on the probability of the de-energization pattern."""
    pi_tol: float


RiskMode = Union[Nmk, WfpiTol, WfpiSlack, MnwfHeuristic, WlfpLog]


@dataclass(frozen=True)
class StochConfig:
    beta: float = 0.0
    epsilon: float = 0.95
    include_commitment_costs: bool = True
    slack_weight: float = 1.0

    def __post_init__(self) -> None:
        if not 0.0 <= self.beta <= 1.0:
            raise FormulationError("beta must lie in [0, 1]")
        if not 0.0 <= self.epsilon < 1.0:
            raise FormulationError("epsilon must lie in [0, 1)")
        if self.slack_weight < 0:
            raise FormulationError("slack_weight must be non-negative")


def validate_mode(case: GridCase, mode: RiskMode) -> None:
    nlines = len(case.lines)
    if isinstance(mode, Nmk) and not 0 <= mode.k <= nlines:
        raise FormulationError(f"k={mode.k} outside [0, {nlines}]")
    if isinstance(mode, (WfpiTol, WfpiSlack)) and not mode.r_tol >= 0:
        raise FormulationError("r_tol must be non-negative")
    if isinstance(mode, WfpiSlack) and mode.r_slack_max is not None and not mode.r_slack_max >= 0:
        raise FormulationError("r_slack_max must be non-negative")
    if isinstance(mode, MnwfHeuristic) and not 0 <= mode.active <= nlines:
        raise FormulationError(f"active={mode.active} exceeds the {nlines} lines of the case")
    if isinstance(mode, WlfpLog) and not 0.0 < mode.pi_tol <= 1.0:
        raise FormulationError("pi_tol must lie in (0, 1]")


def default_slack_max(case: GridCase, r_tol: float | None = None) -> float:
    """Largest single-line WFPI: room to fall short of r_tol by one line's worth."""
    return max((ln.wfpi for ln in case.lines), default=0.0)


def mnwf_fix(case: GridCase, active: int) -> dict[int, bool]:
    """Energization per line id: the ``active`` lowest-WFPI lines on (ties: lowest id)."""
    if not 0 <= active <= len(case.lines):
        raise FormulationError(f"active={active} outside [0, {len(case.lines)}]")
    chosen = {ln.id for ln in lines_by_wfpi(case)[:active]}
    return {ln.id: ln.id in chosen for ln in case.lines}


# -- plan --------------------------------------------------------------------------

@dataclass
class FirstStagePlan:
    """Non-anticipative decisions; arrays are indexed [element, hour position]."""

    gen_ids: tuple[int, ...]
    line_ids: tuple[int, ...]
    hours: tuple[int, ...]
    gen_on: np.ndarray
    gen_up: np.ndarray
    gen_dn: np.ndarray
    line_on: np.ndarray
    r_slack: float = 0.0
    extra: dict = field(default_factory=dict)

    def energized(self, hour: int) -> set[int]:
        t = self.hours.index(hour)
        return {lid for lid, row in zip(self.line_ids, self.line_on) if row[t]}

    def committed(self, hour: int) -> set[int]:
        t = self.hours.index(hour)
        return {gid for gid, row in zip(self.gen_ids, self.gen_on) if row[t]}

    def validate(self, case: GridCase) -> None:
        """Raise PlanError unless commitment logic, min up/down and line persistence hold."""
        gens = {g.id: g for g in case.generators}
        T = len(self.hours)
        for i, gid in enumerate(self.gen_ids):
            g = gens[gid]
            on, up, dn = self.gen_on[i], self.gen_up[i], self.gen_dn[i]
            prev = 1 if g.initial_on else 0
            for t in range(T):
                if int(on[t]) - prev != int(up[t]) - int(dn[t]):
                    raise PlanError(f"generator {gid} hour {self.hours[t]}: start/stop flags inconsistent with status")
                if up[t] and dn[t]:
                    raise PlanError(f"generator {gid} hour {self.hours[t]}: starts and stops at once")
                prev = int(on[t])
            for t in range(T):
                lo_up = max(0, t - g.min_up + 1)
                if int(np.sum(up[lo_up:t + 1])) > int(on[t]):
                    raise PlanError(f"generator {gid} hour {self.hours[t]}: minimum up time {g.min_up} violated")
                lo_dn = max(0, t - g.min_down + 1)
                if int(np.sum(dn[lo_dn:t + 1])) > 1 - int(on[t]):
                    raise PlanError(f"generator {gid} hour {self.hours[t]}: minimum down time {g.min_down} violated")
        for i, lid in enumerate(self.line_ids):
            row = self.line_on[i]
            for t in range(T - 1):
                if row[t + 1] and not row[t]:
                    raise PlanError(f"line {lid}: re-energized at hour {self.hours[t + 1]} after a shut-off")

    def commitment_cost(self, case: GridCase) -> float:
        gens = {g.id: g for g in case.generators}
        return float(sum(gens[gid].startup_cost * self.gen_up[i].sum() + gens[gid].shutdown_cost * self.gen_dn[i].sum()
                         for i, gid in enumerate(self.gen_ids)))

    def to_dict(self) -> dict:
        return {
            "hours": list(self.hours),
            "generators": {str(g): {"on": self.gen_on[i].astype(int).tolist(),
                                    "start": self.gen_up[i].astype(int).tolist(),
                                    "stop": self.gen_dn[i].astype(int).tolist()}
                           for i, g in enumerate(self.gen_ids)},
            "lines": {str(lid): self.line_on[i].astype(int).tolist() for i, lid in enumerate(self.line_ids)},
            "r_slack": self.r_slack,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "FirstStagePlan":
        try:
            gens = data["generators"]
            lines = data["lines"]
            gen_ids = tuple(int(g) for g in gens)
            line_ids = tuple(int(lid) for lid in lines)
            return cls(
                gen_ids=gen_ids,
                line_ids=line_ids,
                hours=tuple(int(h) for h in data["hours"]),
                gen_on=np.array([gens[str(g)]["on"] for g in gen_ids], dtype=bool).reshape(len(gen_ids), -1),
                gen_up=np.array([gens[str(g)]["start"] for g in gen_ids], dtype=bool).reshape(len(gen_ids), -1),
                gen_dn=np.array([gens[str(g)]["stop"] for g in gen_ids], dtype=bool).reshape(len(gen_ids), -1),
                line_on=np.array([lines[str(lid)] for lid in line_ids], dtype=bool).reshape(len(line_ids), -1),
                r_slack=float(data.get("r_slack", 0.0)),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise PlanError(f"malformed plan: {exc}") from None

    @classmethod
    def from_arrays(cls, case: GridCase, gen_on: np.ndarray, line_on: np.ndarray) -> "FirstStagePlan":
        """Derive start/stop flags from on/off trajectories (initial state from the case)."""
        gen_on = np.asarray(gen_on, dtype=bool)
        line_on = np.asarray(line_on, dtype=bool)
        init = np.array([g.initial_on for g in case.generators], dtype=int)[:, None]
        prev = np.concatenate([init, gen_on.astype(int)[:, :-1]], axis=1)
        diff = gen_on.astype(int) - prev
        return cls(
            gen_ids=tuple(g.id for g in case.generators),
            line_ids=tuple(ln.id for ln in case.lines),
            hours=tuple(case.hours),
            gen_on=gen_on,
            gen_up=diff > 0,
            gen_dn=diff < 0,
            line_on=line_on,
        )


# -- builder -------------------------------------------------------------------------

def _oriented(line: Line) -> tuple[int, int, float, float]:
    """(low bus, high bus, flow_min, flow_max) with flow measured low -> high."""
    if line.from_bus < line.to_bus:
        return line.from_bus, line.to_bus, line.flow_min, line.flow_max
    return line.to_bus, line.from_bus, -line.flow_max, -line.flow_min


class _Builder:
    def __init__(self, case: GridCase, mode: RiskMode, cfg: StochConfig, name: str) -> None:
        validate_mode(case, mode)
        self.case = case
        self.mode = mode
        self.cfg = cfg
        self.model = MilpModel(name)
        self.hours = list(case.hours)
        self.T = len(self.hours)
        self.zg: dict[tuple[int, int], int] = {}
        self.zu: dict[tuple[int, int], int] = {}
        self.zd: dict[tuple[int, int], int] = {}
        self.zl: dict[tuple[int, int], int] = {}
        self.r_slack: int | None = None
        # per scenario key: {"commit"/"prod"/"voll"/"slack": (terms, constant)}
        self.parts: dict[int | None, dict[str, tuple[dict[int, float], float]]] = {}
        # balance rows' storage injection variables, keyed (bus, hour, scenario key)
        self.injections: dict[tuple[int, int, int | None], int] = {}
        # served-fraction variable ids per scenario key, with the load (MW) each one carries
        self.served: dict[int | None, dict[int, float]] = {}

    # first-stage decisions
    def first_stage(self) -> None:
        m, case = self.model, self.case
        for g in case.generators:
            for h in self.hours:
                self.zg[g.id, h] = m.add_binary(format_name("z_g", g.id, h))
                self.zu[g.id, h] = m.add_binary(format_name("zu_g", g.id, h))
                self.zd[g.id, h] = m.add_binary(format_name("zd_g", g.id, h))
        for ln in case.lines:
            for h in self.hours:
                self.zl[ln.id, h] = m.add_binary(format_name("z_l", ln.id, h))

        for g in case.generators:
            for t, h in enumerate(self.hours):
                z, up, dn = self.zg[g.id, h], self.zu[g.id, h], self.zd[g.id, h]
                if t == 0:
                    m.add_constraint({z: 1, up: -1, dn: 1}, Sense.EQ, 1.0 if g.initial_on else 0.0,
                                     format_name("commit_logic", g.id, h))
                else:
                    m.add_constraint({z: 1, self.zg[g.id, self.hours[t - 1]]: -1, up: -1, dn: 1}, Sense.EQ, 0.0,
                                     format_name("commit_logic", g.id, h))
                m.add_constraint({up: 1, dn: 1}, Sense.LE, 1.0, format_name("start_or_stop", g.id, h))
                if g.min_up > 1:
                    terms = {self.zu[g.id, self.hours[s]]: 1.0 for s in range(max(0, t - g.min_up + 1), t + 1)}
                    terms[z] = terms.get(z, 0.0) - 1.0
                    m.add_constraint(terms, Sense.LE, 0.0, format_name("min_up", g.id, h))
                if g.min_down > 1:
                    terms = {self.zd[g.id, self.hours[s]]: 1.0 for s in range(max(0, t - g.min_down + 1), t + 1)}
                    terms[z] = terms.get(z, 0.0) + 1.0
                    m.add_constraint(terms, Sense.LE, 1.0, format_name("min_down", g.id, h))
        for ln in case.lines:
            for t in range(self.T - 1):
                a, b = self.zl[ln.id, self.hours[t]], self.zl[ln.id, self.hours[t + 1]]
                m.add_constraint({b: 1, a: -1}, Sense.LE, 0.0, format_name("stay_off", ln.id, self.hours[t + 1]))
        self._risk_constraints()

    def fixed_first_stage(self, plan: "FirstStagePlan") -> None:
        """First-stage decisions as constants taken from ``plan`` (no commitment or risk rows)."""
        m = self.model
        for i, gid in enumerate(plan.gen_ids):
            for h in self.hours:
                t = plan.hours.index(h)
                self.zg[gid, h] = m.add_variable(format_name("z_g", gid, h), *(float(plan.gen_on[i, t]),) * 2)
                self.zu[gid, h] = m.add_variable(format_name("zu_g", gid, h), *(float(plan.gen_up[i, t]),) * 2)
                self.zd[gid, h] = m.add_variable(format_name("zd_g", gid, h), *(float(plan.gen_dn[i, t]),) * 2)
        for i, lid in enumerate(plan.line_ids):
            for h in self.hours:
                t = plan.hours.index(h)
                self.zl[lid, h] = m.add_variable(format_name("z_l", lid, h), *(float(plan.line_on[i, t]),) * 2)

    def _risk_constraints(self) -> None:
        m, case, mode = self.model, self.case, self.mode
        if isinstance(mode, WfpiSlack):
            cap = mode.r_slack_max if mode.r_slack_max is not None else default_slack_max(case, mode.r_tol)
            self.r_slack = m.add_variable("r_slack", 0.0, cap)
        if isinstance(mode, MnwfHeuristic):
            fixed = mnwf_fix(case, mode.active)
            for (lid, _h), vid in self.zl.items():
                m.fix(vid, 1.0 if fixed[lid] else 0.0)
        for h in self.hours:
            if isinstance(mode, Nmk):
                m.add_constraint({self.zl[ln.id, h]: 1.0 for ln in case.lines}, Sense.LE,
                                 float(len(case.lines) - mode.k), format_name("n_minus_k", h))
            elif isinstance(mode, WfpiTol):
                terms = {self.zl[ln.id, h]: ln.wfpi for ln in case.lines if ln.wfpi > 0}
                if terms:
                    m.add_constraint(terms, Sense.LE, mode.r_tol, format_name("wfpi_tol", h))
            elif isinstance(mode, WfpiSlack):
                terms = {self.zl[ln.id, h]: ln.wfpi for ln in case.lines if ln.wfpi > 0}
                terms[self.r_slack] = 1.0
                m.add_constraint(terms, Sense.EQ, mode.r_tol, format_name("wfpi_slack", h))
            elif isinstance(mode, WlfpLog):
                # sum (1 - z) log(pi) + z log(1 - pi) <= log(pi_tol), lines without a probability excluded
                terms, const = {}, 0.0
                for ln in case.lines:
                    pi = ln.ignition_prob
                    if not pi:
                        continue
                    lp, lq = math.log(pi), math.log1p(-pi)
                    const += lp
                    terms[self.zl[ln.id, h]] = lq - lp
                if terms:
                    m.add_constraint(terms, Sense.LE, math.log(mode.pi_tol) - const, format_name("wlfp_log", h))

    # recourse for one demand realization
    def recourse(self, demand: np.ndarray, key: int | None) -> None:
        m, case = self.model, self.case
        idx = () if key is None else (key,)

        def name(sym: str, *i: int) -> str:
            return format_name(sym, *i, *idx)

        theta_bar = case.theta_bound
        big_m = 2.0 * theta_bar
        prod: dict[int, float] = {}
        voll: dict[int, float] = {}
        voll_const = 0.0
        p: dict[tuple[int, int], int] = {}
        paux: dict[tuple[int, int], int] = {}
        for g in case.generators:
            for t, h in enumerate(self.hours):
                pv = m.add_variable(name("p_g", g.id, h), 0.0, g.p_max)
                av = m.add_variable(name("paux_g", g.id, h), 0.0, g.p_max - g.p_min)
                p[g.id, h], paux[g.id, h] = pv, av
                z = self.zg[g.id, h]
                m.add_constraint({pv: 1.0, z: -g.p_max}, Sense.LE, 0.0, name("gen_max", g.id, h))
                if g.p_min > 0:
                    m.add_constraint({pv: 1.0, z: -g.p_min}, Sense.GE, 0.0, name("gen_min", g.id, h))
                m.add_constraint({av: 1.0, pv: -1.0, z: g.p_min}, Sense.EQ, 0.0, name("gen_aux", g.id, h))
                if t > 0:
                    prev = paux[g.id, self.hours[t - 1]]
                    m.add_constraint({av: 1.0, prev: -1.0}, Sense.LE, g.ramp_max, name("ramp_up", g.id, h))
                    m.add_constraint({av: 1.0, prev: -1.0}, Sense.GE, g.ramp_min, name("ramp_down", g.id, h))
                if g.marginal_cost:
                    prod[pv] = g.marginal_cost
        theta = {}
        for b in case.buses:
            for h in self.hours:
                theta[b.id, h] = m.add_variable(name("theta", b.id, h), -theta_bar, theta_bar)
        flows: dict[tuple[int, int], tuple[int, int, int]] = {}
        for ln in case.lines:
            i, j, fmin, fmax = _oriented(ln)
            k = 100.0 * ln.susceptance
            for h in self.hours:
                fv = m.add_variable(name("f_l", ln.id, h), min(fmin, 0.0), max(fmax, 0.0))
                z = self.zl[ln.id, h]
                flows[ln.id, h] = (fv, i, j)
                m.add_constraint({fv: 1.0, z: -fmax}, Sense.LE, 0.0, name("flow_max", ln.id, h))
                m.add_constraint({fv: 1.0, z: -fmin}, Sense.GE, 0.0, name("flow_min", ln.id, h))
                dc = {fv: 1.0, theta[i, h]: -k, theta[j, h]: k}
                m.add_constraint({**dc, z: k * big_m}, Sense.LE, k * big_m, name("dc_upper", ln.id, h))
                m.add_constraint({**dc, z: -k * big_m}, Sense.GE, -k * big_m, name("dc_lower", ln.id, h))
        x = {}
        served = self.served.setdefault(key, {})
        for di, d in enumerate(case.demands):
            for t, h in enumerate(self.hours):
                x[d.id, h] = xv = m.add_variable(name("x_d", d.id, h), 0.0, 1.0)
                load = float(demand[di, t])
                served[xv] = load
                if load > 0 and d.voll > 0:
                    voll[xv] = -d.voll * load
                    voll_const += d.voll * load
        storage_buses = {s.bus for s in case.storages}
        for b in case.buses:
            for t, h in enumerate(self.hours):
                terms: dict[int, float] = {}
                for g in case.generators:
                    if g.bus == b.id:
                        terms[p[g.id, h]] = 1.0
                for ln in case.lines:
                    fv, i, j = flows[ln.id, h]
                    if i == b.id:
                        terms[fv] = terms.get(fv, 0.0) - 1.0
                    elif j == b.id:
                        terms[fv] = terms.get(fv, 0.0) + 1.0
                for di, d in enumerate(case.demands):
                    load = float(demand[di, t])
                    if d.bus == b.id and load > 0:
                        terms[x[d.id, h]] = terms.get(x[d.id, h], 0.0) - load
                if b.id in storage_buses:
                    inj = m.add_variable(name("inj_s", b.id, h), 0.0, 0.0)
                    self.injections[b.id, h, key] = inj
                    terms[inj] = 1.0
                if terms:
                    m.add_constraint(terms, Sense.EQ, 0.0, name("balance", b.id, h))
        commit: dict[int, float] = {}
        for g in case.generators:
            for h in self.hours:
                if g.startup_cost:
                    commit[self.zu[g.id, h]] = g.startup_cost
                if g.shutdown_cost:
                    commit[self.zd[g.id, h]] = g.shutdown_cost
        slack = {self.r_slack: self.cfg.slack_weight} if self.r_slack is not None and self.cfg.slack_weight else {}
        self.parts[key] = {
            "commit": (commit, 0.0),
            "prod": (prod, 0.0),
            "voll": (voll, voll_const),
            "slack": (slack, 0.0),
        }

    def scenario_cost(self, key: int | None) -> tuple[dict[int, float], float]:
        """Objective expression of one scenario (commitment and production dropped when disabled)."""
        use = ["voll", "slack"]
        if self.cfg.include_commitment_costs:
            use = ["commit", "prod"] + use
        terms: dict[int, float] = {}
        const = 0.0
        for part in use:
            t, c = self.parts[key][part]
            for v, coef in t.items():
                terms[v] = terms.get(v, 0.0) + coef
            const += c
        return terms, const

    def annotate(self, kind: str, scenarios: list[tuple[int | None, float]]) -> None:
        self.model.meta.update({
            "kind": kind,
            "case": self.case.name,
            "hours": tuple(self.hours),
            "gen_ids": tuple(g.id for g in self.case.generators),
            "line_ids": tuple(ln.id for ln in self.case.lines),
            "scenarios": tuple(scenarios),
            "mode": self.mode,
            "config": self.cfg,
            "cost_parts": {k: {p: (dict(t), c) for p, (t, c) in v.items()} for k, v in self.parts.items()},
            "injections": dict(self.injections),
            "r_slack": self.r_slack,
            "served": {k: dict(v) for k, v in self.served.items()},
        })


def build_deterministic(case: GridCase, mean_demand: Scenario | np.ndarray, mode: RiskMode,
                        cfg: StochConfig | None = None) -> MilpModel:
    """Single-scenario PSPS model; the objective is that scenario's total cost."""
    cfg = cfg or StochConfig()
    demand = mean_demand.demand if isinstance(mean_demand, Scenario) else np.asarray(mean_demand, float)
    if demand.shape != (len(case.demands), case.horizon):
        raise FormulationError(f"demand shape {demand.shape} does not match case ({len(case.demands)}, {case.horizon})")
    b = _Builder(case, mode, cfg, f"{case.name} deterministic")
    b.first_stage()
    b.recourse(demand, None)
    terms, const = b.scenario_cost(None)
    b.model.set_objective(terms, const)
    b.annotate("deterministic", [(None, 1.0)])
    return b.model


def build_stochastic_first_stage(case: GridCase, scenarios: ScenarioSet, mode: RiskMode,
                                 cfg: StochConfig | None = None) -> MilpModel:
    """Two-stage mean-CVaR model with shared commitment/energization and per-scenario recourse."""
    cfg = cfg or StochConfig()
    if scenarios is None or len(scenarios) == 0:
        raise FormulationError("empty scenario set")
    check_against_case(scenarios, case)
    b = _Builder(case, mode, cfg, f"{case.name} stochastic")
    b.first_stage()
    for s in scenarios:
        b.recourse(s.demand, s.id)
    m = b.model
    beta, eps = cfg.beta, cfg.epsilon
    objective: dict[int, float] = {}
    constant = 0.0

    def add(terms: dict[int, float], weight: float) -> None:
        for v, c in terms.items():
            objective[v] = objective.get(v, 0.0) + weight * c

    nu = None
    if beta > 0:
        nu = m.add_variable("nu", -INF, INF)
        objective[nu] = beta
    for s in scenarios:
        terms, const = b.scenario_cost(s.id)
        if beta < 1:
            add(terms, (1.0 - beta) * s.probability)
            constant += (1.0 - beta) * s.probability * const
        if beta > 0:
            gam = m.add_variable(format_name("gamma", s.id), 0.0, INF)
            objective[gam] = objective.get(gam, 0.0) + beta * s.probability / (1.0 - eps)
            row = {gam: 1.0, nu: 1.0}
            for v, c in terms.items():
                row[v] = row.get(v, 0.0) - c
            m.add_constraint(row, Sense.GE, const, format_name("cvar_excess", s.id))
    m.set_objective(objective, constant)
    b.annotate("stochastic", [(s.id, s.probability) for s in scenarios])
    m.meta["nu"] = nu
    return m


def build_recourse(case: GridCase, demand: np.ndarray, plan: FirstStagePlan,
                   previous_output: dict[int, float] | None = None,
                   cfg: StochConfig | None = None) -> MilpModel:
    """Dispatch LP over the case's hours with the plan's commitments and energizations held fixed.

    ``previous_output`` maps generator id to its output in the hour before the case's first
    hour; when given, the ramp limits also bind across that boundary.  The objective is
    production plus lost-load cost; commitment costs are fixed by the plan and left out.
    """
    cfg = cfg or StochConfig()
    demand = np.asarray(demand, dtype=float)
    if demand.shape != (len(case.demands), case.horizon):
        raise FormulationError(f"demand shape {demand.shape} does not match case ({len(case.demands)}, {case.horizon})")
    missing = [h for h in case.hours if h not in plan.hours]
    if missing:
        raise FormulationError(f"plan does not cover hours {missing}")
    b = _Builder(case, Nmk(0), cfg, f"{case.name} recourse")
    b.fixed_first_stage(plan)
    b.recourse(demand, None)
    m = b.model
    if previous_output is not None:
        h0 = case.hours[0]
        t_prev = plan.hours.index(h0) - 1 if h0 in plan.hours else -1
        for g in case.generators:
            if g.id not in previous_output:
                continue
            was_on = bool(plan.gen_on[plan.gen_ids.index(g.id), t_prev]) if t_prev >= 0 else g.initial_on
            prev_aux = float(previous_output[g.id]) - (g.p_min if was_on else 0.0)
            av = m.var_id(format_name("paux_g", g.id, h0))
            m.add_constraint({av: 1.0}, Sense.LE, prev_aux + g.ramp_max, format_name("ramp_up", g.id, h0))
            m.add_constraint({av: 1.0}, Sense.GE, prev_aux + g.ramp_min, format_name("ramp_down", g.id, h0))
    parts = b.parts[None]
    terms: dict[int, float] = dict(parts["prod"][0])
    for v, c in parts["voll"][0].items():
        terms[v] = terms.get(v, 0.0) + c
    m.set_objective(terms, parts["voll"][1])
    b.annotate("recourse", [(None, 1.0)])
    return m


# -- storage extension ------------------------------------------------------------------

def add_storage(model: MilpModel, case: GridCase) -> MilpModel:
    """Add batteries: mode/shut-off binaries (shared), charge/discharge/SOC per scenario,
    and the linearized products of binaries gating charge and discharge."""
    if not case.storages:
        raise FormulationError("case has no storages")
    if model.frozen:
        raise FormulationError("model is frozen")
    meta = model.meta
    hours = list(meta["hours"])
    keys = [k for k, _ in meta["scenarios"]]
    injections = meta["injections"]
    for s in case.storages:
        o, z, ec, ed = {}, {}, {}, {}
        for h in hours:
            o[h] = model.add_binary(format_name("o_s", s.id, h))
            z[h] = model.add_binary(format_name("z_s", s.id, h))
            ec[h] = model.add_binary(format_name("e_ch", s.id, h))
            ed[h] = model.add_binary(format_name("e_dis", s.id, h))
            # e_ch = z AND o
            model.add_constraint({ec[h]: 1, z[h]: -1}, Sense.LE, 0.0, format_name("ech_z", s.id, h))
            model.add_constraint({ec[h]: 1, o[h]: -1}, Sense.LE, 0.0, format_name("ech_o", s.id, h))
            model.add_constraint({z[h]: 1, o[h]: 1, ec[h]: -1}, Sense.LE, 1.0, format_name("ech_and", s.id, h))
            # e_dis = z AND NOT o
            model.add_constraint({ed[h]: 1, z[h]: -1}, Sense.LE, 0.0, format_name("edis_z", s.id, h))
            model.add_constraint({ed[h]: 1, o[h]: 1}, Sense.LE, 1.0, format_name("edis_o", s.id, h))
            model.add_constraint({z[h]: 1, o[h]: -1, ed[h]: -1}, Sense.LE, 0.0, format_name("edis_and", s.id, h))
        for key in keys:
            idx = () if key is None else (key,)
            half = s.capacity / 2.0
            prev_soc = None
            for t, h in enumerate(hours):
                pc = model.add_variable(format_name("p_ch", s.id, h, *idx), 0.0, s.charge_max)
                pd = model.add_variable(format_name("p_dis", s.id, h, *idx), 0.0, s.discharge_max)
                soc = model.add_variable(format_name("soc", s.id, h, *idx), 0.0, s.capacity)
                model.add_constraint({pc: 1.0, ec[h]: -s.charge_max}, Sense.LE, 0.0,
                                     format_name("charge_gate", s.id, h, *idx))
                model.add_constraint({pd: 1.0, ed[h]: -s.discharge_max}, Sense.LE, 0.0,
                                     format_name("discharge_gate", s.id, h, *idx))
                row = {soc: 1.0, pc: -s.eff_charge, pd: 1.0 / s.eff_discharge}
                if prev_soc is None:
                    model.add_constraint(row, Sense.EQ, half, format_name("soc_step", s.id, h, *idx))
                else:
                    row[prev_soc] = -1.0
                    model.add_constraint(row, Sense.EQ, 0.0, format_name("soc_step", s.id, h, *idx))
                prev_soc = soc
                inj = injections[s.bus, h, key]
                model.set_bounds(inj, -INF, INF)
                model.add_constraint({inj: 1.0, pd: -1.0, pc: 1.0}, Sense.EQ, 0.0,
                                     format_name("storage_injection", s.id, h, *idx))
            model.add_constraint({prev_soc: 1.0}, Sense.EQ, half, format_name("soc_end", s.id, *idx))
    # injections of buses that carry several batteries were opened above; nothing else to fix
    return model


# -- solutions --------------------------------------------------------------------------------

def _rounded(values: np.ndarray, vid: int, name: str, int_tol: float) -> bool:
    v = float(values[vid])
    r = round(v)
    if abs(v - r) > int_tol or r not in (0, 1):
        raise PlanError(f"{name} = {v} is not within {int_tol} of 0 or 1")
    return bool(r)


def extract_plan(solution: MilpSolution, model: MilpModel, case: GridCase | None = None,
                 int_tol: float = 1e-6) -> FirstStagePlan:
    """Read the first-stage plan from a solved PSPS model by variable name and check it."""
    if solution.status not in (Status.OPTIMAL, Status.GAP_LIMIT) or solution.values is None:
        raise PlanError(f"no incumbent to extract (status {solution.status.value})")
    meta = model.meta
    hours = list(meta["hours"])
    gen_ids, line_ids = list(meta["gen_ids"]), list(meta["line_ids"])
    G, L, T = len(gen_ids), len(line_ids), len(hours)
    arrays = {"z_g": np.zeros((G, T), bool), "zu_g": np.zeros((G, T), bool),
              "zd_g": np.zeros((G, T), bool), "z_l": np.zeros((L, T), bool)}
    rows = {"z_g": gen_ids, "zu_g": gen_ids, "zd_g": gen_ids, "z_l": line_ids}
    seen = 0
    for v in model.variables:
        if not v.is_binary or model.is_removed(v.id):
            continue
        sym, idx = parse_name(v.name)
        if sym in arrays:
            arrays[sym][rows[sym].index(idx[0]), hours.index(idx[1])] = _rounded(solution.values, v.id, v.name, int_tol)
            seen += 1
    if seen != 3 * G * T + L * T:
        raise PlanError("model does not carry a complete set of first-stage variables")
    r_slack = 0.0
    if meta.get("r_slack") is not None:
        r_slack = float(solution.values[meta["r_slack"]])
    plan = FirstStagePlan(tuple(gen_ids), tuple(line_ids), tuple(hours),
                          arrays["z_g"], arrays["zu_g"], arrays["zd_g"], arrays["z_l"], r_slack)
    if case is not None:
        plan.validate(case)
    return plan


def apply_plan(model: MilpModel, plan: FirstStagePlan) -> MilpModel:
    """Fix the model's first-stage binaries to the plan (the model must cover the plan's hours)."""
    meta = model.meta
    hours = list(meta["hours"])
    for h in hours:
        t = plan.hours.index(h)
        for i, gid in enumerate(plan.gen_ids):
            model.fix(model.var_id(format_name("z_g", gid, h)), float(plan.gen_on[i, t]))
            model.fix(model.var_id(format_name("zu_g", gid, h)), float(plan.gen_up[i, t]))
            model.fix(model.var_id(format_name("zd_g", gid, h)), float(plan.gen_dn[i, t]))
        for i, lid in enumerate(plan.line_ids):
            model.fix(model.var_id(format_name("z_l", lid, h)), float(plan.line_on[i, t]))
    return model


@dataclass(frozen=True)
class CostBreakdown:
    scenario: int | None
    probability: float
    commit: float
    prod: float
    voll: float
    slack: float
    served_mwh: float
    demand_mwh: float

    @property
    def total(self) -> float:
        """Full scenario cost regardless of which parts the objective carried."""
        return self.commit + self.prod + self.voll + self.slack


def scenario_costs(model: MilpModel, values: np.ndarray) -> list[CostBreakdown]:
    """Per-scenario cost components evaluated at ``values``."""
    meta = model.meta
    out = []
    for key, prob in meta["scenarios"]:
        parts = meta["cost_parts"][key]
        vals = {}
        for p, (terms, const) in parts.items():
            vals[p] = const + math.fsum(c * float(values[v]) for v, c in terms.items())
        loads = meta["served"][key]
        served = math.fsum(load * float(values[v]) for v, load in loads.items())
        demand = math.fsum(loads.values())
        out.append(CostBreakdown(key, prob, vals["commit"], vals["prod"], vals["voll"], vals["slack"], served, demand))
    return out


def committed_generators(plan: FirstStagePlan) -> int:
    """Number of generators committed at any hour of the plan."""
    return int(np.sum(plan.gen_on.any(axis=1)))


def energized_wfpi(case: GridCase, plan: FirstStagePlan) -> float:
    """Largest hourly energized WFPI over the plan."""
    wf = np.array([case.line(lid).wfpi for lid in plan.line_ids])
    if plan.line_on.size == 0:
        return 0.0
    return float(max(wf @ plan.line_on[:, t] for t in range(plan.line_on.shape[1])))


def cvar_from_model(model: MilpModel, values: np.ndarray) -> float | None:
    """nu + 1/(1-eps) * sum pi gamma from a solved stochastic model (None when the model has no CVaR term)."""
    meta = model.meta
    nu = meta.get("nu")
    if nu is None:
        return None
    cfg: StochConfig = meta["config"]
    total = float(values[nu])
    for key, prob in meta["scenarios"]:
        total += prob / (1.0 - cfg.epsilon) * float(values[model.var_id(format_name("gamma", key))])
    return total


def mode_label(mode: RiskMode) -> str:
    return type(mode).__name__


def hours_of(model: MilpModel) -> Sequence[int]:
    return model.meta["hours"]
