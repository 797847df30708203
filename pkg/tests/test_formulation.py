from __future__ import annotations

import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.optimize import linprog

from psps.formulation import (
    FirstStagePlan,
    FormulationError,
    MnwfHeuristic,
    Nmk,
    PlanError,
    StochConfig,
    WfpiSlack,
    WfpiTol,
    WlfpLog,
    add_storage,
    apply_plan,
    build_deterministic,
    build_recourse,
    build_stochastic_first_stage,
    cvar_from_model,
    default_slack_max,
    energized_wfpi,
    extract_plan,
    mnwf_fix,
    scenario_costs,
)
from psps.grid import lines_by_wfpi, parse_case, slice_hours, wfpi_prefix_levels
from psps.milp import MilpSolution, Status, format_name, parse_name
from psps.scenarios import Scenario, ScenarioError, ScenarioSet, cvar, single_scenario
from psps.solver import SolverConfig, solve_lp, solve_mip
from oracles import cvar_by_nu, dispatch_lp, two_stage_by_enumeration
from toys import case_dict, demand, gen, line, random_case, random_plan, three_bus

TIGHT = SolverConfig(rel_mip_gap=1e-9)


def solve(model, cfg=TIGHT):
    sol = solve_mip(model, cfg)
    assert sol.status is Status.OPTIMAL, sol.status
    return sol


def values_of(model, sol, symbol):
    out = {}
    for v in model.variables:
        sym, idx = parse_name(v.name)
        if sym == symbol:
            out[idx] = float(sol.values[v.id])
    return out


def wfpi_risk(case, r_tol):
    wf = np.array([ln.wfpi for ln in case.lines])

    def check(line_on):
        return bool(np.all(wf @ line_on <= r_tol + 1e-9)), 0.0
    return check


# -- configuration -----------------------------------------------------------------------------

def test_stoch_config_validation():
    with pytest.raises(FormulationError):
        StochConfig(beta=1.5)
    with pytest.raises(FormulationError):
        StochConfig(epsilon=1.0)
    with pytest.raises(FormulationError):
        StochConfig(slack_weight=-1)


@pytest.mark.parametrize("mode", [Nmk(-1), Nmk(4), WfpiTol(-1.0), WfpiSlack(5.0, -1.0), MnwfHeuristic(4),
                                  WlfpLog(0.0), WlfpLog(1.5)])
def test_invalid_modes(mode):
    case = three_bus()
    with pytest.raises(FormulationError):
        build_deterministic(case, case.demand_matrix(), mode)


def test_dimension_mismatch():
    case = three_bus(2)
    with pytest.raises(FormulationError, match="shape"):
        build_deterministic(case, np.ones((2, 3)), Nmk(0))
    with pytest.raises(ScenarioError, match="shape"):
        build_stochastic_first_stage(case, single_scenario(np.ones((2, 3))), Nmk(0))


# -- deterministic model ------------------------------------------------------------------------

def test_zero_demand_zero_startup_costs_nothing():
    case = parse_case(case_dict([1, 2], [line(1, 1, 2)], [gen(1, 1, 50, 10), gen(2, 2, 50, 20)],
                                [demand(1, 2, [0.0, 0.0])], 2))
    model = build_deterministic(case, case.demand_matrix(), Nmk(0))
    sol = solve(model)
    assert sol.objective == pytest.approx(0.0, abs=1e-9)
    assert all(v == 0 for v in values_of(model, sol, "p_g").values())


def test_single_generator_dispatch_by_hand():
    # 30 MW at bus 2, generator at bus 1 (10 $/MWh, 40 $ start), line limit 100 MW
    case = parse_case(case_dict([1, 2], [line(1, 1, 2, 5.0, 100.0)], [gen(1, 1, 80, 10, startup=40.0)],
                                [demand(1, 2, [30.0])], 1))
    sol = solve(build_deterministic(case, case.demand_matrix(), Nmk(0)))
    assert sol.objective == pytest.approx(10.0 * 30.0 + 40.0)


def test_zero_tolerance_energizes_only_zero_wfpi_lines(ieee14):
    case = slice_hours(ieee14, 16)
    model = build_deterministic(case, case.demand_matrix(), WfpiTol(0.0))
    plan = extract_plan(solve(model), model, case)
    zeros = {ln.id for ln in case.lines if ln.wfpi == 0}
    assert plan.energized(16) <= zeros
    assert energized_wfpi(case, plan) == 0.0


def test_wfnc_objective_drops_commitment_and_production():
    case = three_bus(2)
    full = build_deterministic(case, case.demand_matrix(), WfpiTol(100.0))
    wfnc = build_deterministic(case, case.demand_matrix(), WfpiTol(100.0), StochConfig(include_commitment_costs=False))
    s_full, s_wfnc = solve(full), solve(wfnc)
    parts = scenario_costs(wfnc, s_wfnc.values)[0]
    assert s_wfnc.objective == pytest.approx(parts.voll, abs=1e-6)
    assert s_wfnc.objective <= scenario_costs(full, s_full.values)[0].voll + 1e-6


@pytest.mark.parametrize("seed", range(4))
def test_deterministic_matches_enumeration_oracle(seed):
    rng = np.random.default_rng(500 + seed)
    case = random_case(rng, buses=3, horizon=2)
    r_tol = float(sum(ln.wfpi for ln in case.lines)) * float(rng.uniform(0.2, 0.9))
    model = build_deterministic(case, case.demand_matrix(), WfpiTol(r_tol))
    sol = solve(model)
    ref = two_stage_by_enumeration(case, single_scenario(case.demand_matrix()), 0.0, 0.5, wfpi_risk(case, r_tol))
    assert sol.objective == pytest.approx(ref, rel=1e-6, abs=1e-6)


def test_min_up_and_down_respected():
    # a demand spike in hour 2 only; min_up=3 keeps the generator on for three hours
    case = parse_case(case_dict([1], [], [gen(1, 1, 100, 1.0, startup=1.0, min_up=3, min_down=2)],
                                [demand(1, 1, [0, 50, 0, 0, 0], voll=100.0)], 5))
    model = build_deterministic(case, case.demand_matrix(), Nmk(0))
    plan = extract_plan(solve(model), model, case)
    on = plan.gen_on[0].astype(int).tolist()
    assert on[1] == 1 and sum(on) == 3
    start = on.index(1)
    assert on[start:start + 3] == [1, 1, 1]
    plan.validate(case)


def test_ramp_limits_bind_on_auxiliary_output():
    case = parse_case(case_dict([1], [], [gen(1, 1, 100, 1.0, p_min=10, ramp=15)],
                                [demand(1, 1, [20, 60, 60], voll=1000.0)], 3))
    model = build_deterministic(case, case.demand_matrix(), Nmk(0))
    sol = solve(model)
    p = values_of(model, sol, "p_g")
    # p_aux = p - 10 rises at most 15 per hour
    assert p[(1, 2)] - p[(1, 1)] <= 15 + 1e-6
    assert p[(1, 3)] - p[(1, 2)] <= 15 + 1e-6


def test_line_stays_off_once_switched():
    case = three_bus(3)
    model = build_deterministic(case, case.demand_matrix(), WfpiTol(60.0))
    plan = extract_plan(solve(model), model, case)
    for row in plan.line_on:
        assert all(a >= b for a, b in zip(row, row[1:]))


@settings(max_examples=12)
@given(st.integers(0, 2**31 - 1))
def test_switched_off_elements_carry_nothing(seed):
    rng = np.random.default_rng(seed)
    case = random_case(rng, buses=4, horizon=2)
    mode = [Nmk(int(rng.integers(0, len(case.lines) + 1))), WfpiTol(float(rng.uniform(0, 150)))][seed % 2]
    model = build_deterministic(case, case.demand_matrix(), mode)
    sol = solve(model)
    zl, f = values_of(model, sol, "z_l"), values_of(model, sol, "f_l")
    zg, p = values_of(model, sol, "z_g"), values_of(model, sol, "p_g")
    for k, z in zl.items():
        if z < 0.5:
            assert abs(f[k]) <= 1e-6
    for k, z in zg.items():
        if z < 0.5:
            assert p[k] <= 1e-6
    assert model.check_feasibility(sol.values) == []


@settings(max_examples=10)
@given(st.floats(0, 100), st.floats(0, 100))
def test_cost_non_increasing_in_tolerance(a, b):
    case = three_bus(1)
    lo, hi = sorted((a, b))
    c_lo = solve(build_deterministic(case, case.demand_matrix(), WfpiTol(lo))).objective
    c_hi = solve(build_deterministic(case, case.demand_matrix(), WfpiTol(hi))).objective
    assert c_hi <= c_lo + 1e-6 * max(1.0, abs(c_lo))


def test_cost_non_increasing_in_line_budget():
    case = three_bus(1)
    costs = [solve(build_deterministic(case, case.demand_matrix(), Nmk(3 - k))).objective for k in range(4)]
    assert all(b <= a + 1e-6 for a, b in zip(costs, costs[1:]))


# -- risk modes -------------------------------------------------------------------------------------

def test_wfpi_slack_equality():
    case = three_bus(2)
    mode = WfpiSlack(65.0)
    model = build_deterministic(case, case.demand_matrix(), mode)
    sol = solve(model)
    plan = extract_plan(sol, model, case)
    wf = np.array([ln.wfpi for ln in case.lines])
    cap = default_slack_max(case)
    assert cap == 50.0
    assert 0.0 <= plan.r_slack <= cap + 1e-9
    for t in range(2):
        assert wf @ plan.line_on[:, t] == pytest.approx(65.0 - plan.r_slack, abs=1e-6)


def test_wfpi_slack_infeasible_without_room():
    case = three_bus(1)
    # no line subset sums into [r_tol - cap, r_tol] when both are tiny and no line has zero WFPI
    model = build_deterministic(case, case.demand_matrix(), WfpiSlack(5.0, 1.0))
    assert solve_mip(model).status is Status.INFEASIBLE


def test_mnwf_fix(ieee14):
    zeros = {ln.id for ln in ieee14.lines if ln.wfpi == 0}
    assert {k for k, on in mnwf_fix(ieee14, 6).items() if on} == zeros
    seven = {k for k, on in mnwf_fix(ieee14, 7).items() if on}
    assert seven - zeros == {ieee14.line_by_label("6-13").id}
    assert not any(mnwf_fix(ieee14, 0).values())
    with pytest.raises(FormulationError):
        mnwf_fix(ieee14, 21)


def test_mnwf_mode_fixes_lines(ieee14):
    case = slice_hours(ieee14, 16)
    model = build_deterministic(case, case.demand_matrix(), MnwfHeuristic(8))
    plan = extract_plan(solve(model), model, case)
    assert plan.energized(16) == {ln.id for ln in lines_by_wfpi(case)[:8]}


def test_wlfp_log_bound_holds(ieee14):
    case = slice_hours(ieee14, 16)
    probs = {ln.id: ln.ignition_prob for ln in case.lines}
    assert any(probs.values())
    on = {ln.id for ln in lines_by_wfpi(case)[:10]}
    pi_tol = math.prod((1 - p) if lid in on else p for lid, p in probs.items() if p)
    model = build_deterministic(case, case.demand_matrix(), WlfpLog(pi_tol))
    plan = extract_plan(solve(model), model, case)
    energized = plan.energized(16)
    pattern = math.prod((1 - p) if lid in energized else p for lid, p in probs.items() if p)
    assert pattern <= pi_tol * (1 + 1e-9)


def test_wlfp_ignores_lines_without_probability():
    case = three_bus(1)
    model = build_deterministic(case, case.demand_matrix(), WlfpLog(1e-9))
    assert not any(c.name.startswith("wlfp_log") for c in model.constraints)


# -- two-stage model ---------------------------------------------------------------------------------

@pytest.mark.parametrize("beta", [0.0, 0.5, 1.0])
def test_single_scenario_stochastic_equals_deterministic(beta):
    case = three_bus(2)
    cfg = StochConfig(beta=beta, epsilon=0.9)
    det = solve(build_deterministic(case, case.demand_matrix(), WfpiTol(60.0), cfg)).objective
    sto = solve(build_stochastic_first_stage(case, single_scenario(case.demand_matrix()), WfpiTol(60.0), cfg)).objective
    assert sto == pytest.approx(det, rel=1e-7)


def two_scenarios(case, low=0.6, high=1.4, p=0.5):
    base = case.demand_matrix()
    return ScenarioSet((Scenario(1, p, base * low), Scenario(2, 1 - p, base * high)))


def test_beta_zero_objective_is_expectation():
    case = three_bus(2)
    sc = two_scenarios(case, p=0.3)
    model = build_stochastic_first_stage(case, sc, WfpiTol(60.0), StochConfig(beta=0.0))
    sol = solve(model)
    parts = scenario_costs(model, sol.values)
    assert sol.objective == pytest.approx(sum(c.probability * c.total for c in parts), rel=1e-9)


def test_two_bus_toy_beta_one_matches_enumeration():
    case = parse_case(case_dict([1, 2], [line(1, 1, 2, 5.0, 40.0, wfpi=10.0)],
                                [gen(1, 1, 60, 12.0, startup=80.0, shutdown=10.0)],
                                [demand(1, 2, [20.0, 35.0], voll=90.0)], 2))
    sc = two_scenarios(case, 0.5, 1.5)
    cfg = StochConfig(beta=1.0, epsilon=0.5)
    sol = solve(build_stochastic_first_stage(case, sc, WfpiTol(10.0), cfg))
    ref = two_stage_by_enumeration(case, sc, 1.0, 0.5, wfpi_risk(case, 10.0))
    assert sol.objective == pytest.approx(ref, rel=1e-7)


def test_cvar_variables_match_scenario_costs():
    case = three_bus(2)
    sc = two_scenarios(case, 0.5, 1.6, p=0.7)
    cfg = StochConfig(beta=0.6, epsilon=0.8)
    model = build_stochastic_first_stage(case, sc, WfpiTol(60.0), cfg)
    sol = solve(model)
    parts = scenario_costs(model, sol.values)
    costs = [c.total for c in parts]
    probs = [c.probability for c in parts]
    internal = cvar_from_model(model, sol.values)
    assert internal == pytest.approx(cvar(probs, costs, 0.8), rel=1e-6)
    assert internal == pytest.approx(cvar_by_nu(probs, costs, 0.8), rel=1e-6)


def test_beta_sweep_trades_mean_for_tail():
    case = three_bus(2, [55.0, 70.0])
    sc = two_scenarios(case, 0.4, 1.7, p=0.8)
    means, tails = [], []
    for beta in np.linspace(0, 1, 6):
        model = build_stochastic_first_stage(case, sc, WfpiTol(50.0), StochConfig(beta=float(beta), epsilon=0.5))
        sol = solve(model)
        parts = scenario_costs(model, sol.values)
        costs = [c.total for c in parts]
        means.append(sum(c.probability * c.total for c in parts))
        tails.append(cvar([c.probability for c in parts], costs, 0.5))
    assert all(b >= a - 1e-6 for a, b in zip(means, means[1:]))
    assert all(b <= a + 1e-6 for a, b in zip(tails, tails[1:]))


def test_empty_scenario_error():
    case = three_bus(1)
    with pytest.raises(Exception):
        build_stochastic_first_stage(case, ScenarioSet(()), Nmk(0))


# -- recourse ------------------------------------------------------------------------------------------

@settings(max_examples=15)
@given(st.integers(0, 2**31 - 1))
def test_recourse_matches_independent_dispatch_lp(seed):
    rng = np.random.default_rng(seed)
    case = random_case(rng, buses=int(rng.integers(2, 5)), horizon=int(rng.integers(1, 4)))
    plan = random_plan(rng, case)
    ref = dispatch_lp(case, plan.gen_on.astype(int), plan.line_on.astype(int), case.demand_matrix())
    sol = solve_lp(build_recourse(case, case.demand_matrix(), plan))
    if math.isinf(ref):
        assert sol.status is Status.INFEASIBLE
    else:
        assert sol.status is Status.OPTIMAL
        assert sol.objective == pytest.approx(ref, rel=1e-7, abs=1e-6)


@settings(max_examples=15)
@given(st.integers(0, 2**31 - 1), st.floats(1.0, 2.0))
def test_more_demand_never_costs_less(seed, scale):
    rng = np.random.default_rng(seed)
    case = random_case(rng, buses=3, horizon=2, p_min=False)
    plan = random_plan(rng, case)
    base = case.demand_matrix()
    bump = base * (1 + (scale - 1) * rng.random(base.shape))
    lo = solve_lp(build_recourse(case, base, plan))
    hi = solve_lp(build_recourse(case, bump, plan))
    assert hi.objective >= lo.objective - 1e-7 * max(1.0, abs(lo.objective))


def test_apply_plan_reproduces_objective():
    case = three_bus(2)
    model = build_deterministic(case, case.demand_matrix(), WfpiTol(60.0))
    sol = solve(model)
    plan = extract_plan(sol, model, case)
    fixed = solve_lp(apply_plan(build_deterministic(case, case.demand_matrix(), WfpiTol(60.0)), plan))
    assert fixed.objective == pytest.approx(sol.objective, rel=1e-9)


# -- storage --------------------------------------------------------------------------------------------

def storage_case(horizon=3):
    return parse_case(case_dict(
        [1], [],
        [gen(1, 1, 30, 10.0), gen(2, 1, 100, 50.0)],
        [demand(1, 1, [10.0, 45.0, 40.0][:horizon], voll=500.0)],
        horizon,
        storages=[{"id": 1, "bus": 1, "charge_max": 20.0, "discharge_max": 20.0, "capacity": 40.0,
                   "eff_charge": 0.9, "eff_discharge": 0.9}],
    ))


def test_storage_gating_truth_table():
    case = storage_case(1)
    model = add_storage(build_deterministic(case, case.demand_matrix(), Nmk(0)), case)
    ids = {n: model.var_id(format_name(n, 1, 1)) for n in ("z_s", "o_s", "e_ch", "e_dis")}
    rows = [c for c in model.constraints if c.name.startswith(("ech_", "edis_"))]
    for z, o, ec, ed in itertools.product((0, 1), repeat=4):
        point = {ids["z_s"]: z, ids["o_s"]: o, ids["e_ch"]: ec, ids["e_dis"]: ed}
        ok = True
        for c in rows:
            lhs = sum(coef * point[v] for v, coef in c.terms)
            ok &= lhs <= c.rhs + 1e-12
        assert ok == (ec == (z and o) and ed == (z and not o))


def test_storage_soc_returns_to_half():
    case = storage_case()
    model = add_storage(build_deterministic(case, case.demand_matrix(), Nmk(0)), case)
    sol = solve(model)
    soc = values_of(model, sol, "soc")
    assert soc[(1, 3)] == pytest.approx(20.0, abs=1e-9)


def storage_oracle(case):
    """Enumerate (o, z) per hour and solve each dispatch LP with generators available."""
    H = case.horizon
    s = case.storages[0]
    load = case.demand_matrix()[0]
    best = math.inf
    for bits in itertools.product((0, 1), repeat=2 * H):
        o, z = bits[:H], bits[H:]
        # variables per hour: p1, p2, pc, pd, soc, x
        n = 6 * H
        c = np.zeros(n)
        bounds = []
        A_eq, b_eq = [], []
        const = 0.0
        for t in range(H):
            k = 6 * t
            c[k], c[k + 1] = 10.0, 50.0
            c[k + 5] = -500.0 * load[t]
            const += 500.0 * load[t]
            bounds += [(0, 30), (0, 100), (0, s.charge_max * (z[t] and o[t])),
                       (0, s.discharge_max * (z[t] and not o[t])), (0, s.capacity), (0, 1)]
            bal = np.zeros(n)
            bal[[k, k + 1, k + 3]] = 1.0
            bal[k + 2] = -1.0
            bal[k + 5] = -load[t]
            A_eq.append(bal); b_eq.append(0.0)
            soc = np.zeros(n)
            soc[k + 4] = 1.0
            soc[k + 2] = -s.eff_charge
            soc[k + 3] = 1.0 / s.eff_discharge
            if t == 0:
                b_eq.append(s.capacity / 2)
            else:
                soc[k - 6 + 4] = -1.0
                b_eq.append(0.0)
            A_eq.append(soc)
        end = np.zeros(n)
        end[6 * (H - 1) + 4] = 1.0
        A_eq.append(end); b_eq.append(s.capacity / 2)
        res = linprog(c, A_eq=np.array(A_eq), b_eq=b_eq, bounds=bounds, method="highs")
        if res.status == 0:
            best = min(best, const + res.fun)
    return best


def test_storage_arbitrage_matches_brute_force():
    case = storage_case(3)
    model = add_storage(build_deterministic(case, case.demand_matrix(), Nmk(0)), case)
    sol = solve(model)
    assert sol.objective == pytest.approx(storage_oracle(case), rel=1e-7)
    pd = values_of(model, sol, "p_dis")
    assert max(pd.values()) > 0


def test_storage_requires_storages():
    case = three_bus(1)
    with pytest.raises(FormulationError):
        add_storage(build_deterministic(case, case.demand_matrix(), Nmk(0)), case)


# -- plans ----------------------------------------------------------------------------------------------------

def one_gen_case(min_up, horizon):
    return parse_case(case_dict([1], [], [gen(1, 1, 10, 1.0, min_up=min_up)], [demand(1, 1, [1.0] * horizon)], horizon))


def test_plan_min_up_valid():
    case = one_gen_case(3, 4)
    FirstStagePlan.from_arrays(case, [[0, 1, 1, 1]], np.zeros((0, 4))).validate(case)


def test_plan_min_up_violation():
    case = one_gen_case(2, 3)
    with pytest.raises(PlanError, match="minimum up"):
        FirstStagePlan.from_arrays(case, [[0, 1, 0]], np.zeros((0, 3))).validate(case)


def test_plan_line_reenergized():
    case = three_bus(3)
    plan = FirstStagePlan.from_arrays(case, np.zeros((2, 3)), [[1, 0, 1], [1, 1, 1], [0, 0, 0]])
    with pytest.raises(PlanError, match="re-energized"):
        plan.validate(case)


def test_plan_inconsistent_flags():
    case = one_gen_case(1, 2)
    plan = FirstStagePlan.from_arrays(case, [[1, 1]], np.zeros((0, 2)))
    plan.gen_up[0, 0] = False
    with pytest.raises(PlanError, match="inconsistent"):
        plan.validate(case)


def test_extract_plan_rejects_fractional_binaries():
    case = three_bus(1)
    model = build_deterministic(case, case.demand_matrix(), Nmk(0))
    sol = solve(model)
    bad = sol.values.copy()
    bad[model.var_id(format_name("z_l", 1, 1))] = 0.5
    with pytest.raises(PlanError, match="not within"):
        extract_plan(MilpSolution(Status.OPTIMAL, sol.objective, bad), model, case)
    with pytest.raises(PlanError):
        extract_plan(MilpSolution(Status.INFEASIBLE), model, case)


def test_plan_dict_round_trip():
    case = three_bus(3)
    plan = random_plan(np.random.default_rng(4), case)
    back = FirstStagePlan.from_dict(plan.to_dict())
    for attr in ("gen_on", "gen_up", "gen_dn", "line_on"):
        assert np.array_equal(getattr(back, attr), getattr(plan, attr))
    assert back.hours == plan.hours and back.gen_ids == plan.gen_ids
    with pytest.raises(PlanError):
        FirstStagePlan.from_dict({"hours": [1]})


def test_wfsl_plan_constant_over_hours(ieee14):
    case = slice_hours(ieee14, 13, 18)
    model = build_deterministic(case, case.demand_matrix(), WfpiSlack(wfpi_prefix_levels(case)[12]))
    plan = extract_plan(solve_mip(model), model, case)
    for row in plan.line_on:
        assert row.all() or not row.any()
