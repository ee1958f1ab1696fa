from __future__ import annotations

import itertools
import math

import numpy as np
import pytest
from scipy.optimize import linprog

from config import SolverConfig
from milp_core import (
    ExternalSolveRequired,
    LinearProgram,
    ModelSizeExceeded,
    NameCollision,
    Sense,
    SolveStatus,
    SolverError,
    VarType,
    solve,
    solve_lp,
    solve_milp,
)
from mps_format import write_solution


def cover_lp():
    lp = LinearProgram("cover")
    x = lp.add_variable("x", 0.0, 1.5, cost=1.0)
    y = lp.add_variable("y", 0.0, math.inf, cost=2.0)
    lp.add_constraint("cover", [(x, 1.0), (y, 1.0)], Sense.GE, 2.0)
    return lp


def test_lp_primal_and_duals_follow_rhs_sensitivity():
    solution = solve_lp(cover_lp())
    assert solution.status is SolveStatus.OPTIMAL
    assert solution.objective == pytest.approx(2.5)
    assert solution.value("x") == pytest.approx(1.5)
    assert solution.value("y") == pytest.approx(0.5)
    # one more unit of cover is bought with y at 2 $/unit
    assert solution.dual("cover") == pytest.approx(2.0)
    assert solution.duality_residual <= 1e-6


def test_equality_and_le_duals_have_rhs_sign():
    lp = LinearProgram("signs")
    x = lp.add_variable("x", -math.inf, math.inf, cost=3.0)
    z = lp.add_variable("z", 0.0, math.inf, cost=-1.0)
    lp.add_constraint("fix", [(x, 1.0)], Sense.EQ, 4.0)
    lp.add_constraint("cap", [(z, 1.0)], Sense.LE, 5.0)
    solution = solve_lp(lp)
    assert solution.objective == pytest.approx(7.0)
    assert solution.dual("fix") == pytest.approx(3.0)
    assert solution.dual("cap") == pytest.approx(-1.0)


def test_infeasible_and_unbounded_are_statuses():
    lp = LinearProgram("clash")
    x = lp.add_variable("x")
    lp.add_constraint("low", [(x, 1.0)], Sense.GE, 1.0)
    lp.add_constraint("high", [(x, 1.0)], Sense.LE, 0.0)
    assert solve_lp(lp).status is SolveStatus.INFEASIBLE

    lp = LinearProgram("open")
    lp.add_variable("x", cost=-1.0)
    result = solve_lp(lp)
    assert result.status is SolveStatus.UNBOUNDED
    assert result.primal is None


def test_builder_rejects_bad_declarations():
    lp = LinearProgram("names")
    x = lp.add_variable("x")
    with pytest.raises(NameCollision):
        lp.add_variable("x")
    with pytest.raises(NameCollision):
        lp.add_variable("has space")
    with pytest.raises(ValueError):
        lp.add_variable("bad", 2.0, 1.0)
    with pytest.raises(ValueError):
        lp.add_variable("wide", 0.0, 2.0, VarType.BINARY)
    lp.add_constraint("row", [(x, 1.0)], Sense.LE, 1.0)
    with pytest.raises(NameCollision):
        lp.add_constraint("row", [(x, 1.0)], Sense.LE, 1.0)
    with pytest.raises(ValueError):
        lp.add_constraint("dangling", [(7, 1.0)], Sense.LE, 1.0)


def test_duplicate_terms_are_merged_and_zeros_dropped():
    lp = LinearProgram("merge")
    x = lp.add_variable("x")
    y = lp.add_variable("y")
    lp.add_constraint("row", [(x, 1.0), (y, 2.0), (x, 0.5), (y, -2.0)], Sense.LE, 3.0)
    row = lp.constraints[0]
    assert row.indices == (x,)
    assert row.coefficients == (1.5,)
    assert lp.num_nonzeros == 1


def test_solve_lp_refuses_binaries():
    lp = cover_lp()
    lp.add_variable("b", 0.0, 1.0, VarType.BINARY)
    with pytest.raises(SolverError):
        solve_lp(lp)


def test_random_lp_matches_independent_dual_solve():
    rng = np.random.default_rng(20)
    rows, cols = 20, 40
    a = rng.uniform(0.0, 1.0, size=(rows, cols))
    x0 = rng.uniform(0.0, 1.0, size=cols)
    b = a @ x0 + 1.0
    c = rng.uniform(-1.0, 1.0, size=cols)
    upper = 5.0

    lp = LinearProgram("random")
    for j in range(cols):
        lp.add_variable(f"x{j}", 0.0, upper, cost=c[j])
    for i in range(rows):
        lp.add_constraint(f"r{i}", list(enumerate(a[i])), Sense.LE, b[i])
    primal = solve_lp(lp)

    # max -b.y - u.w  s.t.  A^T y + w >= -c,  y, w >= 0
    dual = linprog(
        np.concatenate([b, np.full(cols, upper)]),
        A_ub=-np.hstack([a.T, np.eye(cols)]),
        b_ub=c,
        bounds=[(0, None)] * (rows + cols),
        method="highs-ipm",
    )
    assert dual.status == 0
    assert primal.objective == pytest.approx(-dual.fun, rel=1e-6, abs=1e-6)
    assert primal.dual_objective == pytest.approx(primal.objective, rel=1e-6, abs=1e-6)
    assert np.all(primal.duals <= 1e-9)


def test_small_lp_matches_vertex_enumeration():
    rng = np.random.default_rng(3)
    a = rng.uniform(-1.0, 2.0, size=(3, 3))
    b = rng.uniform(1.0, 3.0, size=3)
    c = rng.uniform(-2.0, 1.0, size=3)
    lp = LinearProgram("vertices")
    for j in range(3):
        lp.add_variable(f"x{j}", 0.0, 2.0, cost=c[j])
    for i in range(3):
        lp.add_constraint(f"r{i}", list(enumerate(a[i])), Sense.LE, b[i])

    # every inequality as (row, rhs): A x <= b, -x <= 0, x <= 2
    halfspaces = [(a[i], b[i]) for i in range(3)]
    halfspaces += [(-np.eye(3)[j], 0.0) for j in range(3)]
    halfspaces += [(np.eye(3)[j], 2.0) for j in range(3)]
    best = math.inf
    for active in itertools.combinations(halfspaces, 3):
        matrix = np.array([row for row, _ in active])
        if abs(np.linalg.det(matrix)) < 1e-12:
            continue
        point = np.linalg.solve(matrix, np.array([rhs for _, rhs in active]))
        if all(row @ point <= rhs + 1e-9 for row, rhs in halfspaces):
            best = min(best, float(c @ point))
    assert solve_lp(lp).objective == pytest.approx(best, abs=1e-7)


def knapsack(values, weights, capacity):
    lp = LinearProgram("knapsack")
    cols = [lp.add_variable(f"z{i}", 0.0, 1.0, VarType.BINARY, cost=-v) for i, v in enumerate(values)]
    lp.add_constraint("capacity", list(zip(cols, weights)), Sense.LE, capacity)
    return lp


def test_branch_and_bound_matches_knapsack_enumeration():
    values = [10, 13, 7, 8, 9, 4]
    weights = [3, 4, 2, 3, 3, 1]
    best = min(
        -sum(v for v, pick in zip(values, picks) if pick)
        for picks in itertools.product((0, 1), repeat=6)
        if sum(w for w, pick in zip(weights, picks) if pick) <= 8
    )
    solution = solve_milp(knapsack(values, weights, 8))
    assert solution.status is SolveStatus.OPTIMAL
    assert solution.objective == pytest.approx(best)
    assert solution.mip_gap <= 1e-4
    assert np.allclose(solution.primal, np.round(solution.primal))


def placement_toy():
    """Six optional sites with fixed and per-unit costs covering a demand of 7."""

    fixed = [4.0, 6.0, 3.0, 8.0, 5.0, 2.0]
    unit = [1.0, 0.5, 1.5, 0.2, 0.8, 2.0]
    capacity = [3.0, 4.0, 2.0, 6.0, 3.0, 2.0]
    lp = LinearProgram("placement")
    build = [lp.add_variable(f"open{i}", 0.0, 1.0, VarType.BINARY, cost=f) for i, f in enumerate(fixed)]
    supply = [lp.add_variable(f"supply{i}", 0.0, math.inf, cost=u) for i, u in enumerate(unit)]
    for i in range(6):
        lp.add_constraint(f"cap{i}", [(supply[i], 1.0), (build[i], -capacity[i])], Sense.LE, 0.0)
    lp.add_constraint("demand", [(col, 1.0) for col in supply], Sense.GE, 7.0)
    return lp, build


def test_placement_toy_matches_exhaustive_enumeration():
    lp, build = placement_toy()
    best = math.inf
    for picks in itertools.product((0.0, 1.0), repeat=6):
        fixed = lp.relaxed().with_bounds({col: (pick, pick) for col, pick in zip(build, picks)})
        result = solve_lp(fixed)
        if result.is_optimal:
            best = min(best, result.objective)
    solution = solve_milp(lp, gap_tol=1e-9)
    assert solution.objective == pytest.approx(best, rel=1e-9)
    assert solution.bound <= solution.objective + 1e-9


def test_node_limit_without_incumbent_reports_iter_limit():
    lp = knapsack([1.0] * 6, [2.0] * 6, 5.0)
    solution = solve_milp(lp, node_limit=1)
    assert solution.status is SolveStatus.ITER_LIMIT
    assert solution.primal is None
    assert solution.bound <= -2.0 + 1e-9


def test_node_cut_short_keeps_parent_bound(monkeypatch):
    import milp_core

    lp = LinearProgram("pair")
    a = lp.add_variable("a", 0.0, 1.0, VarType.BINARY, cost=-3.0)
    b = lp.add_variable("b", 0.0, 1.0, VarType.BINARY, cost=-2.0)
    lp.add_constraint("share", [(a, 1.0), (b, 1.0)], Sense.LE, 1.5)
    relax = milp_core._solve_relaxation

    def stall_when_b_fixed_up(model, form, lower, upper, *args, **kwargs):
        if lower[b] == 1.0:
            return milp_core.Solution(
                status=SolveStatus.ITER_LIMIT, var_index=model._var_index, row_index=model._row_index
            )
        return relax(model, form, lower, upper, *args, **kwargs)

    monkeypatch.setattr(milp_core, "_solve_relaxation", stall_when_b_fixed_up)
    solution = solve_milp(lp, gap_tol=1e-9)
    assert solution.objective == pytest.approx(-3.0)
    assert solution.status is SolveStatus.ITER_LIMIT
    # the b = 1 subtree is worth -3.5, so the bound may not sit above it
    assert solution.bound <= -3.5 + 1e-9
    assert solution.mip_gap > 0.0


def test_integer_infeasible_model():
    lp = LinearProgram("gap")
    z = lp.add_variable("z", 0.0, 1.0, VarType.BINARY, cost=1.0)
    lp.add_constraint("above", [(z, 1.0)], Sense.GE, 0.4)
    lp.add_constraint("below", [(z, 1.0)], Sense.LE, 0.6)
    assert solve_milp(lp).status is SolveStatus.INFEASIBLE


def test_polished_incumbent_carries_duals():
    lp, _ = placement_toy()
    solution = solve_milp(lp)
    assert solution.duals is not None
    assert solution.dual("demand") >= 0.0


def test_builtin_backend_enforces_size_cap():
    lp = cover_lp()
    with pytest.raises(ModelSizeExceeded):
        solve(lp, SolverConfig(max_nonzeros=1))
    assert solve(lp, SolverConfig()).objective == pytest.approx(2.5)


def test_external_backend_writes_mps_and_imports_solution(tmp_path):
    lp = cover_lp()
    with pytest.raises(ExternalSolveRequired) as info:
        solve(lp, SolverConfig(backend="external", work_dir=str(tmp_path)))
    assert info.value.mps_path.exists()
    assert info.value.mps_path.read_text(encoding="utf-8").startswith("NAME cover")

    answer = tmp_path / "cover.sol"
    answer.write_text(write_solution(solve_lp(lp), lp), encoding="utf-8")
    imported = solve(lp, SolverConfig(backend="external", work_dir=str(tmp_path), solution_file=str(answer)))
    assert imported.status is SolveStatus.OPTIMAL
    assert imported.objective == pytest.approx(2.5)
    assert imported.dual("cover") == pytest.approx(2.0)


def test_external_command_is_run(tmp_path):
    lp = cover_lp()
    answer = tmp_path / "precomputed.sol"
    answer.write_text(write_solution(solve_lp(lp), lp), encoding="utf-8")
    config = SolverConfig(backend="external", work_dir=str(tmp_path), command=f"cp {answer} {{solution}}")
    assert solve(lp, config).value("x") == pytest.approx(1.5)
