from __future__ import annotations

import math

import numpy as np
import pytest

from conftest import two_level_scenarios
from network_model import Branch, Bus, Generator, Load, Network
from scenario import (
    HOURS_PER_YEAR,
    DegenerateDuals,
    DurationPolicy,
    DurationUnderflow,
    IslandingContingency,
    build_scenarios,
    candidate_scores,
    contingency_scores,
    islanding_branches,
    lodf_matrix,
    make_load_levels,
    ptdf_matrix,
    rank_contingencies,
    screening_level,
    select_candidates,
    solve_base_dispatch,
)


def test_states_are_ordered_base_first(case3):
    scenarios = two_level_scenarios(case3, [3, 1])
    assert [state.key for state in scenarios.states] == [(0, 0), (0, 1), (1, 0), (1, 1), (2, 0), (2, 1)]
    assert [state.index for state in scenarios.states] == list(range(6))
    assert scenarios.base_state(1).load_scale == 0.8
    contingency = scenarios.states[2]
    assert contingency.outaged_branches == frozenset({3})
    assert contingency.rating_factor == pytest.approx(1.10)
    assert contingency.tag == "c1_t0"
    assert scenarios.n_kct(3, 2) == 0 and scenarios.n_kct(3, 0) == 1
    assert len(scenarios.contingency_states()) == 4
    assert scenarios.without_contingencies().contingency_states() == []


def test_durations_sum_to_a_year_exactly(case14):
    contingencies = sorted(set(branch.id for branch in case14.branches) - islanding_branches(case14))
    levels = make_load_levels([("peak", 1.2), ("normal", 1.0), ("low", 0.8)])
    scenarios = build_scenarios(case14, levels, contingencies, DurationPolicy())
    assert math.fsum(state.duration for state in scenarios.states) == HOURS_PER_YEAR
    assert scenarios.total_hours() == HOURS_PER_YEAR
    assert all(state.duration == 2.0 for state in scenarios.contingency_states())
    base = {state.label: state.duration for state in scenarios.base_states()}
    remaining = HOURS_PER_YEAR - 2.0 * len(contingencies) * 3
    assert base["normal"] == pytest.approx(0.55 * remaining, abs=1e-5)


def test_uneven_split_labels_fall_back_to_even_shares(case3):
    levels = make_load_levels([("a", 1.0), ("b", 0.5)])
    scenarios = build_scenarios(case3, levels, [], DurationPolicy())
    assert [state.duration for state in scenarios.states] == [4380.0, 4380.0]


def test_duration_underflow(case3):
    policy = DurationPolicy(base_split={"peak": 0.4, "low": 0.6}, contingency_hours=5000.0)
    levels = make_load_levels([("peak", 1.0), ("low", 0.8)])
    with pytest.raises(DurationUnderflow):
        build_scenarios(case3, levels, [1], policy)


def test_islanding_and_invalid_contingencies(case3, case14):
    assert islanding_branches(case3) == set()
    assert islanding_branches(case14) == {14}
    with pytest.raises(IslandingContingency):
        two_level_scenarios(case14, [14])
    with pytest.raises(ValueError):
        two_level_scenarios(case3, [1, 1])
    with pytest.raises(ValueError):
        two_level_scenarios(case3, [9])


def test_base_dispatch_and_prices(case3):
    dispatch = solve_base_dispatch(case3, 1.0)
    assert dispatch.generation[1] == pytest.approx(0.9, abs=1e-7)
    assert dispatch.generation[2] == pytest.approx(0.6, abs=1e-7)
    assert dispatch.flows == pytest.approx([0.1, 0.8, 0.7], abs=1e-7)
    assert dispatch.objective == pytest.approx(3900.0)
    assert dispatch.lmp[1] == pytest.approx(10.0)
    assert dispatch.lmp[2] == pytest.approx(50.0)
    assert dispatch.lmp[3] == pytest.approx(90.0)


def test_distribution_factors_on_triangle(case3):
    ptdf = ptdf_matrix(case3)
    assert ptdf[:, 0] == pytest.approx([0.0, 0.0, 0.0])
    assert ptdf[1] == pytest.approx([0.0, -1.0 / 3.0, -2.0 / 3.0])
    lodf = lodf_matrix(case3)
    assert np.diag(lodf) == pytest.approx([-1.0, -1.0, -1.0])
    # losing 2-3 pushes all of its flow onto 1-3 and reverses it on 1-2
    assert lodf[1, 2] == pytest.approx(1.0)
    assert lodf[0, 2] == pytest.approx(-1.0)


def test_contingency_ranking(case3):
    dispatch = solve_base_dispatch(case3, 1.0)
    scores = contingency_scores(case3, dispatch)
    assert scores[3] == pytest.approx(0.62, abs=1e-6)
    assert scores[1] == pytest.approx(0.02, abs=1e-6)
    assert scores[2] == pytest.approx(0.0, abs=1e-6)
    assert rank_contingencies(case3, dispatch, 2) == [3, 1]
    assert rank_contingencies(case3, dispatch, 0) == []


def test_candidate_ranking(case3):
    dispatch = solve_base_dispatch(case3, 1.0)
    scores = candidate_scores(case3, dispatch)
    assert scores[2] == pytest.approx(6400.0, rel=1e-6)
    assert scores[3] == pytest.approx(2800.0, rel=1e-6)
    assert scores[1] == pytest.approx(400.0, rel=1e-6)
    assert select_candidates(case3, dispatch, 3) == [2, 3, 1]


def test_islanding_branches_are_never_candidates(case14):
    dispatch = solve_base_dispatch(case14, 1.0)
    assert 14 not in candidate_scores(case14, dispatch).index
    assert 14 not in contingency_scores(case14, dispatch).index
    ranked = select_candidates(case14, dispatch, 30)
    assert len(ranked) == 19
    assert ranked == select_candidates(case14, dispatch, 30)


def test_tied_scores_warn_about_degenerate_duals():
    network = Network(
        buses=(Bus(1, is_reference=True), Bus(2)),
        branches=(Branch(1, 1, 2, 0.1, 0.4), Branch(2, 1, 2, 0.1, 0.4)),
        generators=(
            Generator(1, 1, 0.0, 3.0, 10.0, 12.0, 8.0, 0.75, 0.75),
            Generator(2, 2, 0.0, 3.0, 50.0, 60.0, 40.0, 0.75, 0.75),
        ),
        loads=(Load(2, 2, 1.0),),
    )
    dispatch = solve_base_dispatch(network, 1.0)
    with pytest.warns(DegenerateDuals):
        ranked = select_candidates(network, dispatch, 2)
    assert ranked == [1, 2]


def test_screening_level_lookup():
    levels = make_load_levels([("peak", 1.2), ("low", 0.8)])
    assert screening_level(levels, "low").scale == 0.8
    assert screening_level(levels, "missing").label == "peak"
