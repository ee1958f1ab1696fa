"""Single-shot planning MILP over every operating state, plus plan accounting."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import pandas as pd

from config import PenaltyConfig, SolverConfig
from milp_core import LinearProgram, Solution, SolveStatus, VarType, solve, solve_lp
from network_model import Network, VsrCandidate
from operating_block import StateBlock, StateValues, add_operating_state, balance_residuals, extract_state
from reformulation import DeviceSetting, recover_device_setting
from scenario import ScenarioSet


LOGGER = logging.getLogger(__name__)

COST_CATEGORIES = (
    "base_generation",
    "contingency_generation",
    "rescheduling",
    "load_shedding",
    "investment",
)
PENALTY_CATEGORY = "infeasibility_penalty"


class PlanInfeasible(Exception):
    """Raised by ``require_solution`` for a plan without values; names the states that fail alone."""

    def __init__(self, message: str, states: Sequence[str] = ()) -> None:
        super().__init__(message)
        self.states = list(states)


@dataclass(frozen=True)
class PlanningOptions:
    shed_penalty: float = 5000.0
    slack_factor: float = 10.0
    strengthen: bool = True

    @classmethod
    def from_config(cls, penalty: PenaltyConfig, strengthen: bool = True) -> "PlanningOptions":
        return cls(penalty.load_shedding, penalty.slack_factor, strengthen)

    @property
    def slack_penalty(self) -> float:
        return self.slack_factor * self.shed_penalty


@dataclass
class PlanningModel:
    lp: LinearProgram
    blocks: List[StateBlock]
    delta: Dict[int, int]


@dataclass
class PlanSolution:
    """Installed devices plus the solved values of every operating state."""

    network: Network = field(repr=False)
    scenarios: ScenarioSet = field(repr=False)
    candidates: Tuple[VsrCandidate, ...]
    installed: Dict[int, int]
    state_values: Dict[int, StateValues] = field(repr=False)
    objective: float
    status: SolveStatus = SolveStatus.OPTIMAL
    mip_gap: float = 0.0
    bound: float = math.nan
    shed_penalty: float = 5000.0
    slack_penalty: float = 50000.0
    failing_states: Tuple[str, ...] = ()

    @property
    def has_solution(self) -> bool:
        return bool(self.state_values) and math.isfinite(self.objective)

    @property
    def installed_branches(self) -> List[int]:
        return sorted(branch for branch, flag in self.installed.items() if flag)

    def _by_state(self, attribute: str) -> Dict[Tuple[int, int], float]:
        table: Dict[Tuple[int, int], float] = {}
        for index, values in self.state_values.items():
            for key, value in getattr(values, attribute).items():
                table[(key, index)] = value
        return table

    @property
    def dispatch(self) -> Dict[Tuple[int, int], float]:
        return self._by_state("generation")

    @property
    def flows(self) -> Dict[Tuple[int, int], float]:
        return self._by_state("flows")

    @property
    def angles(self) -> Dict[Tuple[int, int], float]:
        return self._by_state("angles")

    @property
    def shed(self) -> Dict[Tuple[int, int], float]:
        return self._by_state("shed")

    @property
    def adjust_up(self) -> Dict[Tuple[int, int], float]:
        return self._by_state("adjust_up")

    @property
    def adjust_down(self) -> Dict[Tuple[int, int], float]:
        return self._by_state("adjust_down")

    @property
    def device_settings(self) -> Dict[int, Dict[int, DeviceSetting]]:
        settings: Dict[int, Dict[int, DeviceSetting]] = {}
        for candidate in self.candidates:
            per_state: Dict[int, DeviceSetting] = {}
            for index, values in self.state_values.items():
                if not self.scenarios.states[index].n_status(candidate.branch):
                    continue
                per_state[index] = recover_device_setting(
                    values.psi[candidate.branch],
                    values.branch_angles[candidate.branch],
                    self.installed[candidate.branch],
                    candidate,
                )
            settings[candidate.branch] = per_state
        return settings

    @property
    def total_slack(self) -> float:
        return math.fsum(
            abs(value) for values in self.state_values.values() for value in values.slack.values()
        )


def build_full_model(
    network: Network,
    scenarios: ScenarioSet,
    candidates: Sequence[VsrCandidate],
    options: Optional[PlanningOptions] = None,
) -> PlanningModel:
    """Investment binaries, then one block per state; contingency blocks couple to their level's base dispatch."""

    options = options or PlanningOptions()
    lp = LinearProgram(f"plan_{network.name}")
    delta = {
        candidate.branch: lp.add_variable(
            f"delta_{candidate.branch}", 0.0, 1.0, VarType.BINARY, cost=candidate.annual_cost
        )
        for candidate in candidates
    }
    blocks: List[StateBlock] = []
    base_generation: Dict[int, Mapping[int, int]] = {}
    for state in scenarios.states:
        block = add_operating_state(
            lp,
            network,
            state,
            candidates,
            delta_cols=delta,
            base_generation=None if state.is_base else base_generation[state.t],
            shed_penalty=options.shed_penalty,
            strengthen=options.strengthen,
        )
        if state.is_base:
            base_generation[state.t] = block.generation
        blocks.append(block)
    LOGGER.info(
        "Planning model: %d columns (%d binary), %d rows, %d nonzeros",
        lp.num_variables,
        lp.binary_indices().size,
        lp.num_constraints,
        lp.num_nonzeros,
    )
    return PlanningModel(lp=lp, blocks=blocks, delta=delta)


def assemble_plan(
    model: PlanningModel,
    solution: Solution,
    network: Network,
    scenarios: ScenarioSet,
    candidates: Sequence[VsrCandidate],
    options: PlanningOptions,
) -> PlanSolution:
    x = solution.primal
    return PlanSolution(
        network=network,
        scenarios=scenarios,
        candidates=tuple(candidates),
        installed={branch: int(round(x[col])) for branch, col in model.delta.items()},
        state_values={block.state.index: extract_state(x, block) for block in model.blocks},
        objective=solution.objective,
        status=solution.status,
        mip_gap=0.0 if math.isnan(solution.mip_gap) else solution.mip_gap,
        bound=solution.bound,
        shed_penalty=options.shed_penalty,
        slack_penalty=options.slack_penalty,
    )


def _find_failing_states(
    network: Network,
    scenarios: ScenarioSet,
    candidates: Sequence[VsrCandidate],
    options: PlanningOptions,
) -> List[str]:
    """States whose own LP relaxation (with their level's base state) is infeasible."""

    failing: List[str] = []
    for state in scenarios.states:
        members = [state] if state.is_base else [scenarios.base_state(state.t), state]
        subset = ScenarioSet(tuple(members), scenarios.levels, scenarios.contingencies)
        model = build_full_model(network, subset, candidates, options)
        result = solve_lp(model.lp.relaxed())
        if result.status is SolveStatus.INFEASIBLE:
            failing.append(state.tag)
    return failing


def solve_plan(
    network: Network,
    scenarios: ScenarioSet,
    candidates: Sequence[VsrCandidate],
    solver_cfg: Optional[SolverConfig] = None,
    options: Optional[PlanningOptions] = None,
    model: Optional[PlanningModel] = None,
) -> PlanSolution:
    solver_cfg = solver_cfg or SolverConfig()
    options = options or PlanningOptions()
    model = model or build_full_model(network, scenarios, candidates, options)
    solution = solve(model.lp, solver_cfg)
    if solution.primal is None:
        failing: List[str] = []
        if solution.status is SolveStatus.INFEASIBLE:
            failing = _find_failing_states(network, scenarios, candidates, options)
            LOGGER.error("Planning model is infeasible; failing states: %s", failing or "combination only")
        else:
            LOGGER.error("Planning model ended %s without an incumbent", solution.status.value)
        return PlanSolution(
            network=network,
            scenarios=scenarios,
            candidates=tuple(candidates),
            installed={},
            state_values={},
            objective=math.nan,
            status=solution.status,
            mip_gap=math.nan,
            bound=solution.bound,
            shed_penalty=options.shed_penalty,
            slack_penalty=options.slack_penalty,
            failing_states=tuple(failing),
        )
    plan = assemble_plan(model, solution, network, scenarios, candidates, options)
    if plan.status is not SolveStatus.OPTIMAL:
        LOGGER.warning("Returning incumbent with gap %.3e", plan.mip_gap)
    LOGGER.info(
        "Plan objective %.2f $/yr, devices on branches %s",
        plan.objective,
        plan.installed_branches,
    )
    return plan


def require_solution(plan: PlanSolution) -> PlanSolution:
    """Raise ``PlanInfeasible`` when a plan carries no solved state values."""

    if plan.has_solution:
        return plan
    if plan.status is SolveStatus.INFEASIBLE:
        detail = ", ".join(plan.failing_states) or "combination only"
        raise PlanInfeasible(f"Planning model is infeasible; failing states: {detail}", plan.failing_states)
    raise PlanInfeasible(f"Planning model ended {plan.status.value} without an incumbent")


def cost_breakdown(plan: PlanSolution, scenarios: Optional[ScenarioSet] = None) -> pd.DataFrame:
    """Annual cost per category; rows sum to the plan objective."""

    scenarios = scenarios or plan.scenarios
    network = plan.network
    base = network.base_mva
    costs = dict.fromkeys(COST_CATEGORIES, 0.0)
    penalty = 0.0
    units = {unit.id: unit for unit in network.generators}
    for state in scenarios.states:
        values = plan.state_values[state.index]
        weight = state.duration * base
        generation = math.fsum(units[g].cost * p for g, p in values.generation.items()) * weight
        if state.is_base:
            costs["base_generation"] += generation
            continue
        costs["contingency_generation"] += generation
        costs["rescheduling"] += weight * math.fsum(
            [units[g].adjust_up_cost * p for g, p in values.adjust_up.items()]
            + [units[g].adjust_down_cost * p for g, p in values.adjust_down.items()]
        )
        costs["load_shedding"] += weight * plan.shed_penalty * math.fsum(values.shed.values())
        penalty += weight * plan.slack_penalty * math.fsum(abs(s) for s in values.slack.values())
    costs["investment"] = math.fsum(
        candidate.annual_cost * plan.installed.get(candidate.branch, 0) for candidate in plan.candidates
    )
    rows = list(costs.items())
    if penalty > 0:
        rows.append((PENALTY_CATEGORY, penalty))
    frame = pd.DataFrame(rows, columns=["category", "usd_per_year"])
    frame["musd_per_year"] = frame["usd_per_year"] / 1e6
    return frame


@dataclass(frozen=True)
class PlanComparison:
    with_devices: PlanSolution
    without_devices: PlanSolution
    table: pd.DataFrame
    annual_saving: float
    saving_share: float


def compare_with_without(
    network: Network,
    scenarios: ScenarioSet,
    candidates: Sequence[VsrCandidate],
    solver_cfg: Optional[SolverConfig] = None,
    options: Optional[PlanningOptions] = None,
    with_plan: Optional[PlanSolution] = None,
) -> PlanComparison:
    """Side-by-side annual costs of the no-device and device plans."""

    with_plan = require_solution(with_plan or solve_plan(network, scenarios, candidates, solver_cfg, options))
    without_plan = require_solution(solve_plan(network.with_candidates(()), scenarios, [], solver_cfg, options))
    table = pd.merge(
        cost_breakdown(without_plan)[["category", "usd_per_year"]].rename(columns={"usd_per_year": "without_devices"}),
        cost_breakdown(with_plan)[["category", "usd_per_year"]].rename(columns={"usd_per_year": "with_devices"}),
        on="category",
        how="outer",
    ).fillna(0.0)
    table["saving"] = table["without_devices"] - table["with_devices"]
    saving = without_plan.objective - with_plan.objective
    share = saving / without_plan.objective if without_plan.objective else 0.0
    LOGGER.info("Devices save %.2f $/yr (%.3f%% of the no-device cost)", saving, 100 * share)
    return PlanComparison(with_plan, without_plan, table, saving, share)


def state_summary(plan: PlanSolution, scenarios: Optional[ScenarioSet] = None) -> pd.DataFrame:
    """Hourly generation cost, rescheduled MW and shed MW for every state."""

    scenarios = scenarios or plan.scenarios
    network = plan.network
    base = network.base_mva
    units = {unit.id: unit for unit in network.generators}
    records = []
    for state in scenarios.states:
        values = plan.state_values[state.index]
        records.append(
            {
                "state": state.index,
                "c": state.c,
                "t": state.t,
                "level": state.label,
                "outage": ",".join(str(b) for b in sorted(state.outaged_branches)),
                "hours": state.duration,
                "generation_cost_per_h": base * math.fsum(units[g].cost * p for g, p in values.generation.items()),
                "rescheduling_mw": base * math.fsum(list(values.adjust_up.values()) + list(values.adjust_down.values())),
                "load_shed_mw": base * math.fsum(values.shed.values()),
            }
        )
    return pd.DataFrame.from_records(records)


def nodal_residuals(plan: PlanSolution, scenarios: Optional[ScenarioSet] = None) -> pd.Series:
    """Largest per-bus balance residual (pu) in every state."""

    scenarios = scenarios or plan.scenarios
    worst = {
        state.index: max(balance_residuals(plan.network, state, plan.state_values[state.index]).values())
        for state in scenarios.states
    }
    return pd.Series(worst, name="max_residual_pu")
