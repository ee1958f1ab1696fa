from __future__ import annotations

import math

import pytest

from milp_core import LinearProgram, Sense, SolveStatus, VarType, solve_lp, solve_milp
from mps_format import (
    MpsFormatError,
    SolutionFormatError,
    read_mps,
    read_solution,
    write_mps,
    write_solution,
)
from network_model import make_candidates
from planner_monolithic import build_full_model
from scenario import DurationPolicy, build_scenarios, make_load_levels


def mixed_model():
    lp = LinearProgram("mixed")
    x = lp.add_variable("x", -math.inf, 4.0, cost=1.0)
    free = lp.add_variable("free", -math.inf, math.inf)
    pinned = lp.add_variable("pinned", 2.5, 2.5, cost=-0.0)
    z = lp.add_variable("z", 0.0, 1.0, VarType.BINARY, cost=3.0)
    on = lp.add_variable("on", 1.0, 1.0, VarType.BINARY)
    w = lp.add_variable("w", 1.0, 10.0, cost=0.1)
    lp.add_constraint("link", [(x, 1.0), (z, -4.0), (free, 1.0)], Sense.LE, 0.0)
    lp.add_constraint("floor", [(x, 1.0), (w, 1.0), (pinned, -1.0)], Sense.GE, -1.0)
    lp.add_constraint("tie", [(free, 1.0), (on, 2.0)], Sense.EQ, 2.0)
    lp.objective_constant = 7.5
    return lp


def test_write_read_write_is_a_fixed_point_on_mixed_model():
    first = write_mps(mixed_model())
    second = write_mps(read_mps(first))
    assert second == first


def test_writer_layout():
    text = write_mps(mixed_model())
    lines = text.splitlines()
    assert lines[0] == "NAME mixed"
    assert " N OBJ" in lines
    assert " L link" in lines and " G floor" in lines and " E tie" in lines
    assert " MARKER0 'MARKER' 'INTORG'" in lines
    assert " MARKER0 'MARKER' 'INTEND'" in lines
    assert " BV BOUND z" in lines
    assert " LI BOUND on 1" in lines and " UI BOUND on 1" in lines
    assert " MI BOUND x" in lines and " UP BOUND x 4" in lines
    assert " FR BOUND free" in lines
    assert " FX BOUND pinned 2.5" in lines
    assert " RHS OBJ -7.5" in lines
    assert "-0" not in text.replace("-0.", "")
    assert lines[-1] == "ENDATA"


def test_read_model_solves_like_the_original():
    original = mixed_model()
    restored = read_mps(write_mps(original))
    assert restored.num_variables == original.num_variables
    assert restored.num_constraints == original.num_constraints
    assert list(restored.binary_indices()) == list(original.binary_indices())
    assert solve_milp(restored).objective == pytest.approx(solve_milp(original).objective)


def test_ranges_rows_are_split():
    text = "\n".join(
        [
            "NAME ranged",
            "ROWS",
            " N COST",
            " L cap",
            "COLUMNS",
            " x COST 1 cap 1",
            "RHS",
            " RHS cap 5",
            "RANGES",
            " RNG cap 2",
            "BOUNDS",
            " UP BND x 10",
            "ENDATA",
        ]
    )
    lp = read_mps(text)
    assert [con.name for con in lp.constraints] == ["cap", "cap_range"]
    assert lp.constraints[0].sense is Sense.GE and lp.constraints[0].rhs == 3.0
    assert lp.constraints[1].sense is Sense.LE and lp.constraints[1].rhs == 5.0
    assert solve_lp(lp).objective == pytest.approx(3.0)


@pytest.mark.parametrize(
    "text",
    [
        "NAME x\nROWS\n L r\nCOLUMNS\n x r 1\nENDATA\n",
        "NAME x\nROWS\n N OBJ\n Q r\nENDATA\n",
        "NAME x\nROWS\n N OBJ\nCOLUMNS\n x OBJ one\nENDATA\n",
        "NAME x\nROWS\n N OBJ\nCOLUMNS\n x OBJ 1\nBOUNDS\n UP BND y 1\nENDATA\n",
        "NAME x\nSIDEWAYS\nENDATA\n",
    ],
)
def test_malformed_mps_raises(text):
    with pytest.raises(MpsFormatError):
        read_mps(text)


def test_objective_row_name_is_reserved():
    lp = LinearProgram("clash")
    x = lp.add_variable("x")
    lp.add_constraint("OBJ", [(x, 1.0)], Sense.LE, 1.0)
    with pytest.raises(MpsFormatError):
        write_mps(lp)


def test_planning_model_fixed_point(case14):
    levels = make_load_levels([("peak", 1.2), ("normal", 1.0), ("low", 0.8)])
    scenarios = build_scenarios(case14, levels, [1, 2, 3, 4, 7], DurationPolicy())
    model = build_full_model(case14, scenarios, make_candidates(case14, [1, 2, 5]))
    first = write_mps(model.lp)
    assert write_mps(read_mps(first)) == first


def test_solution_file_round_trip_and_errors():
    lp = mixed_model()
    solved = solve_milp(lp)
    restored = read_solution(write_solution(solved, lp), lp)
    assert restored.status is SolveStatus.OPTIMAL
    assert restored.objective == pytest.approx(solved.objective)
    assert restored.value("z") == pytest.approx(solved.value("z"))

    assert read_solution("#status Infeasible\n", lp).primal is None
    with pytest.raises(SolutionFormatError):
        read_solution("x 1\n", lp)
    with pytest.raises(SolutionFormatError):
        read_solution("#status Optimal\nghost 1\n", lp)


def test_partial_solution_defaults_missing_columns_to_zero():
    lp = mixed_model()
    partial = read_solution("#status Optimal\nx 1.5\n", lp)
    assert partial.value("x") == 1.5
    assert partial.value("w") == 0.0
    assert partial.objective == pytest.approx(lp.objective_value(partial.primal))
