from __future__ import annotations

import csv
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from psps.dispatch import (
    DispatchError,
    RealizedDemand,
    classify_lost_load,
    expected_dispatch,
    run_receding_horizon,
    supplied_buses,
    write_dispatch,
)
from psps.formulation import (
    FirstStagePlan,
    FormulationError,
    WfpiSlack,
    WfpiTol,
    build_deterministic,
    extract_plan,
    scenario_costs,
)
from psps.grid import islands, parse_case, slice_hours, wfpi_prefix_levels
from psps.milp import Status
from psps.scenarios import Scenario, ScenarioSet
from psps.solver import SolverConfig, solve_mip
from oracles import dispatch_lp
from toys import case_dict, demand, gen, line, random_case, random_plan, three_bus


def full_horizon(case, plan, load):
    return dispatch_lp(case, plan.gen_on.astype(int), plan.line_on.astype(int), load)


def ramped_toy():
    # a cheap slow unit and an expensive fast one; the ramp limit makes the stitching matter
    return parse_case(case_dict(
        [1, 2, 3],
        [line(1, 1, 2, 4.0, 80.0), line(2, 2, 3, 6.0, 80.0), line(3, 1, 3, 5.0, 80.0)],
        [gen(1, 1, 90, 8.0, p_min=10, ramp=20, initial_on=True), gen(2, 2, 60, 35.0, ramp=60)],
        [demand(1, 3, [30.0, 70.0, 85.0], voll=300.0), demand(2, 2, [5.0, 10.0, 5.0], voll=250.0)],
        3,
    ))


def all_on(case):
    return FirstStagePlan.from_arrays(case, np.ones((len(case.generators), case.horizon)),
                                      np.ones((len(case.lines), case.horizon)))


# -- consistency with the full-horizon LP ---------------------------------------------------------

def test_three_bus_matches_full_horizon_lp():
    case = ramped_toy()
    plan = all_on(case)
    res = run_receding_horizon(case, plan, case.demand_matrix())
    ref = full_horizon(case, plan, case.demand_matrix())
    assert res.prod_cost + res.voll_cost == pytest.approx(ref, rel=1e-9)
    assert res.commit_cost == pytest.approx(plan.commitment_cost(case))


@settings(max_examples=20)
@given(st.integers(0, 2**31 - 1))
def test_receding_equals_full_horizon_on_random_plans(seed):
    rng = np.random.default_rng(seed)
    case = random_case(rng, buses=int(rng.integers(2, 5)), horizon=int(rng.integers(2, 5)))
    plan = random_plan(rng, case)
    ref = full_horizon(case, plan, case.demand_matrix())
    if not np.isfinite(ref):
        with pytest.raises(DispatchError):
            run_receding_horizon(case, plan, case.demand_matrix())
        return
    res = run_receding_horizon(case, plan, case.demand_matrix())
    assert res.prod_cost + res.voll_cost == pytest.approx(ref, rel=1e-5, abs=1e-6)


def test_deterministic_self_consistency():
    case = three_bus(3, [50.0, 75.0, 60.0])
    model = build_deterministic(case, case.demand_matrix(), WfpiSlack(60.0))
    sol = solve_mip(model, SolverConfig(rel_mip_gap=1e-9))
    plan = extract_plan(sol, model, case)
    res = run_receding_horizon(case, plan, case.demand_matrix())
    slack = scenario_costs(model, sol.values)[0].slack
    assert res.total_cost == pytest.approx(sol.objective - slack, rel=1e-7)


def test_ramps_chain_across_windows():
    case = ramped_toy()
    res = run_receding_horizon(case, all_on(case), case.demand_matrix())
    g = case.generators[0]
    aux = res.p[0] - g.p_min
    assert np.all(np.diff(aux) <= g.ramp_max + 1e-7)
    assert np.all(np.diff(aux) >= g.ramp_min - 1e-7)


def test_persistence_forecast_runs_and_costs_at_least_perfect():
    case = ramped_toy()
    plan = all_on(case)
    perfect = run_receding_horizon(case, plan, case.demand_matrix())
    persist = run_receding_horizon(case, plan, case.demand_matrix(), forecast_rule="persistence")
    assert persist.total_cost >= perfect.total_cost - 1e-7
    with pytest.raises(ValueError, match="forecast"):
        run_receding_horizon(case, plan, case.demand_matrix(), forecast_rule="oracle")


def test_served_never_exceeds_demand():
    case = ramped_toy()
    res = run_receding_horizon(case, all_on(case), case.demand_matrix() * 1.5)
    assert res.served_mwh <= res.demand_mwh + 1e-9
    assert np.all((res.x >= 0) & (res.x <= 1))


# -- lost load -------------------------------------------------------------------------------------------

def test_without_gen2_load_is_lost_at_peak(ieee14):
    case = slice_hours(ieee14, 16)
    gen_on = np.array([[1 if g.bus == 1 else 0] for g in case.generators])
    plan = FirstStagePlan.from_arrays(case, gen_on, np.ones((len(case.lines), 1)))
    load = case.demand_matrix()
    assert load.sum() > max(g.p_max for g in case.generators if g.bus == 1)
    res = run_receding_horizon(case, plan, load)
    assert res.demand_mwh - res.served_mwh > 1.0
    assert res.lost_load and set(res.lost_load.values()) == {"partial"}


def test_blackout_classification_matches_islands(ieee14):
    case = slice_hours(ieee14, 16)
    zeros = [1 if ln.wfpi == 0 else 0 for ln in case.lines]
    plan = FirstStagePlan.from_arrays(case, np.ones((len(case.generators), 1)), np.array(zeros)[:, None])
    res = run_receding_horizon(case, plan, case.demand_matrix())
    gen_buses = {g.bus for g in case.generators}
    energized = [ln.id for ln, z in zip(case.lines, zeros) if z]
    dark = {b for comp in islands(case, energized) if not gen_buses.intersection(comp) for b in comp}
    load_buses = {d.bus for d in case.demands}
    assert set(res.blackout_buses) == dark & load_buses
    assert supplied_buses(case, plan, 16) == set(range(1, 15)) - dark
    for i, d in enumerate(case.demands):
        if d.bus in dark:
            assert res.x[i, 0] == 0.0


def test_partial_when_supplied_in_some_hour():
    case = three_bus(2, [60.0, 60.0])
    # line 1-3 and 2-3 energized only in hour 1: bus 3 is reachable then dark
    plan = FirstStagePlan.from_arrays(case, [[1, 1], [0, 0]], [[1, 1], [1, 0], [1, 0]])
    res = run_receding_horizon(case, plan, case.demand_matrix())
    assert res.lost_load.get(3) == "partial"
    again = classify_lost_load(case, plan, res)
    assert again == res.lost_load


# -- inputs, expectation, and output files ----------------------------------------------------------

def test_realized_demand_validation():
    with pytest.raises(ValueError):
        RealizedDemand(np.ones(3))
    with pytest.raises(ValueError):
        RealizedDemand(-np.ones((1, 2)))
    case = three_bus(2)
    with pytest.raises(ValueError, match="shape"):
        run_receding_horizon(case, all_on(case), np.ones((2, 3)))


def test_plan_must_cover_horizon():
    case = three_bus(3)
    short = all_on(slice_hours(case, 1, 2))
    with pytest.raises(FormulationError, match="cover"):
        run_receding_horizon(case, short, case.demand_matrix())


def test_expected_dispatch_weights_results():
    case = ramped_toy()
    plan = all_on(case)
    base = case.demand_matrix()
    sc = ScenarioSet((Scenario(1, 0.25, base * 0.8), Scenario(2, 0.75, base * 1.1)))
    value, results = expected_dispatch(case, plan, sc)
    assert value == pytest.approx(0.25 * results[0].total_cost + 0.75 * results[1].total_cost)


def test_write_dispatch(tmp_path):
    case = ramped_toy()
    res = run_receding_horizon(case, all_on(case), case.demand_matrix())
    gen_path, dem_path, sum_path = write_dispatch(res, tmp_path)
    with gen_path.open() as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["hour", "gen_id", "p_mw"]
    assert len(rows) == 1 + 3 * 2
    with dem_path.open() as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["hour", "demand_id", "x_frac", "shed_mw"]
    summary = json.loads(sum_path.read_text())
    assert summary["total_cost"] == pytest.approx(res.total_cost)
    assert {"served_mwh", "blackout_buses"} <= set(summary)


def test_peak_dispatch_of_a_wfpi_plan(ieee14):
    case = slice_hours(ieee14, 16)
    model = build_deterministic(case, case.demand_matrix(), WfpiTol(wfpi_prefix_levels(case)[12]))
    sol = solve_mip(model)
    assert sol.status is Status.OPTIMAL
    plan = extract_plan(sol, model, case)
    res = run_receding_horizon(case, plan, case.demand_matrix())
    assert res.total_cost == pytest.approx(sol.objective, rel=1e-6)
