from __future__ import annotations

import io
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from psps.formulation import StochConfig, WfpiTol, build_deterministic
from psps.grid import slice_hours
from psps.milp import MilpModel, ModelError, Sense, Status, format_name, parse_name
from psps.solver import solve_lp, solve_mip


def test_empty_model():
    sol = solve_mip(MilpModel())
    assert sol.status is Status.OPTIMAL
    assert sol.objective == 0.0


def test_bound_attained_minimum():
    m = MilpModel()
    x = m.add_variable("x", 2.0, 3.0)
    m.set_objective({x: 1.0})
    sol = solve_lp(m)
    assert sol.status is Status.OPTIMAL
    assert sol.objective == pytest.approx(2.0)
    assert sol[x] == pytest.approx(2.0)


def test_contradictory_rows_infeasible():
    m = MilpModel()
    x = m.add_variable("x", -10, 10)
    m.add_constraint({x: 1.0}, "<=", 1.0)
    m.add_constraint({x: 1.0}, ">=", 2.0)
    assert solve_lp(m).status is Status.INFEASIBLE


def test_builder_errors():
    m = MilpModel()
    x = m.add_variable("x")
    with pytest.raises(ModelError, match="duplicate"):
        m.add_variable("x")
    with pytest.raises(ModelError, match="unknown"):
        m.add_constraint({x + 5: 1.0}, "<=", 1.0)
    with pytest.raises(ModelError):
        m.add_variable("y", 3.0, 1.0)
    m.add_constraint({x: 1.0}, "<=", 1.0, "row")
    with pytest.raises(ModelError, match="duplicate"):
        m.add_constraint({x: 1.0}, "<=", 1.0, "row")
    m.freeze()
    with pytest.raises(ModelError, match="frozen"):
        m.add_variable("z")
    copy = m.copy()
    assert not copy.frozen
    copy.add_variable("z")
    assert m.num_variables == 1


def test_binary_bounds_clipped():
    m = MilpModel()
    b = m.add_variable("b", -3, 7, "binary")
    assert (m.variable(b).lower, m.variable(b).upper) == (0.0, 1.0)
    with pytest.raises(ModelError):
        m.set_bounds(b, 0.0, 2.0)


def test_terms_aggregated_and_sorted():
    m = MilpModel()
    x, y = m.add_variable("x"), m.add_variable("y")
    cid = m.add_constraint([(y, 1.0), (x, 2.0), (y, 3.0), (x, -2.0)], Sense.GE, 1.0)
    assert m.constraints[cid].terms == ((y, 4.0),)


def test_validate_bundled_model(ieee14):
    model = build_deterministic(slice_hours(ieee14, 16), ieee14.demand_matrix()[:, 15:16], WfpiTol(100.0),
                                StochConfig())
    assert model.validate() == []


def test_validate_dangling_reference():
    m = MilpModel()
    x, y = m.add_variable("x"), m.add_variable("y")
    m.add_constraint({x: 1.0, y: 1.0}, "<=", 4.0)
    m.remove_variable(y)
    diags = m.validate()
    assert len(diags) == 1 and "removed" in diags[0]
    # ids are never reused after removal
    assert m.add_variable("z") == 2
    with pytest.raises(ModelError):
        m.add_constraint({y: 1.0}, "<=", 1.0)


def test_validate_nan_rhs():
    m = MilpModel()
    x = m.add_variable("x")
    m.add_constraint({x: 1.0}, "<=", math.nan)
    diags = m.validate()
    assert len(diags) == 1 and "NaN" in diags[0]


def test_validate_empty_row_and_bad_objective():
    m = MilpModel()
    x = m.add_variable("x")
    m.add_constraint({}, "<=", 1.0)
    m.set_objective({x: math.inf})
    assert len(m.validate()) == 2


@given(st.from_regex(r"[A-Za-z_][A-Za-z0-9_]{0,6}", fullmatch=True),
       st.lists(st.integers(-1000, 1000), max_size=4))
def test_structured_names_round_trip(symbol, indices):
    name = format_name(symbol, *indices)
    assert parse_name(name) == (symbol, tuple(indices))


def test_parse_name_rejects_garbage():
    with pytest.raises(ValueError):
        parse_name("p g[1]")
    with pytest.raises(ValueError):
        parse_name("x[1,]")


def test_arrays_and_feasibility_check():
    m = MilpModel()
    x = m.add_variable("x", 0, 4)
    b = m.add_binary("b")
    m.add_constraint({x: 1.0, b: -4.0}, "<=", 0.0)
    m.add_constraint({x: 1.0, b: 1.0}, "==", 3.0)
    m.set_objective({x: -1.0}, 2.5)
    a = m.to_arrays()
    assert a.A.shape == (2, 2)
    assert a.row_lower[0] == -math.inf and a.row_upper[1] == a.row_lower[1] == 3.0
    assert a.binary.tolist() == [False, True]
    assert m.check_feasibility(np.array([2.0, 1.0])) == []
    bad = m.check_feasibility(np.array([2.5, 0.5]))
    assert any("not integral" in d for d in bad) and any("violation" in d for d in bad)
    assert m.evaluate_objective(np.array([2.0, 1.0])) == pytest.approx(0.5)


def test_lp_export():
    m = MilpModel("demo")
    x = m.add_variable("p_g[1,16]", 0, 5)
    y = m.add_variable("free", -math.inf, math.inf)
    b = m.add_binary("z[1]")
    m.add_constraint({x: 1.0, b: -5.0}, "<=", 0.0, "cap")
    m.add_constraint({x: 1.0, y: 1.0}, "==", 2.0, "bal")
    m.set_objective({x: 3.0, y: -1.0}, 1.0)
    buf = io.StringIO()
    m.write_lp(buf)
    text = buf.getvalue()
    assert text == m.to_lp_string()
    for section in ("Minimize", "Subject To", "Bounds", "Binaries", "End"):
        assert section in text
    assert "p_g(1,16)" in text and "free" in text
    assert " cap: 1 p_g(1,16) - 5 z(1) <= 0" in text
