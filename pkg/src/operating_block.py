"""Per-state DC network rows shared by screening, the monolithic planner and Benders."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Dict, Mapping, Optional, Sequence

import numpy as np

from milp_core import LinearProgram, Sense
from network_model import Network, VsrCandidate
from reformulation import VsrStateVars, add_vsr_columns, emit_strengthening_rows, emit_vsr_constraints

if TYPE_CHECKING:
    from scenario import OperatingState


LOGGER = logging.getLogger(__name__)


@dataclass
class StateBlock:
    """Column and row indices of one operating state inside a model."""

    state: "OperatingState"
    bus_angle: Dict[int, int] = field(default_factory=dict)
    branch_angle: Dict[int, int] = field(default_factory=dict)
    flow: Dict[int, int] = field(default_factory=dict)
    generation: Dict[int, int] = field(default_factory=dict)
    shed: Dict[int, int] = field(default_factory=dict)
    adjust_up: Dict[int, int] = field(default_factory=dict)
    adjust_down: Dict[int, int] = field(default_factory=dict)
    slack_up: Dict[int, int] = field(default_factory=dict)
    slack_down: Dict[int, int] = field(default_factory=dict)
    devices: Dict[int, VsrStateVars] = field(default_factory=dict)
    balance_rows: Dict[int, int] = field(default_factory=dict)
    coupling_rows: Dict[int, int] = field(default_factory=dict)


@dataclass(frozen=True)
class StateValues:
    """Solved values of one state, in per unit on the system base."""

    generation: Mapping[int, float]
    flows: Mapping[int, float]
    angles: Mapping[int, float]
    shed: Mapping[int, float]
    adjust_up: Mapping[int, float]
    adjust_down: Mapping[int, float]
    slack: Mapping[int, float]
    psi: Mapping[int, float]
    branch_angles: Mapping[int, float]
    y: Mapping[int, float]


def add_operating_state(
    lp: LinearProgram,
    network: Network,
    state: "OperatingState",
    candidates: Sequence[VsrCandidate] = (),
    delta_cols: Optional[Mapping[int, int]] = None,
    base_generation: Optional[Mapping[int, int]] = None,
    weight: Optional[float] = None,
    shed_penalty: float = 5000.0,
    slack_penalty: Optional[float] = None,
    relax_y: bool = False,
    strengthen: bool = True,
) -> StateBlock:
    """Add one state's angles, flows, dispatch and balance rows to ``lp``.

    Cost columns are weighted by ``weight`` hours (the state duration when
    omitted). Contingency states need ``base_generation``, the columns of the
    same level's base dispatch, for the rescheduling rows. ``slack_penalty``
    ($/MWh) adds the two balance slacks per bus.
    """

    weight = state.duration if weight is None else weight
    base = network.base_mva
    tag = state.tag
    block = StateBlock(state=state)
    delta_cols = delta_cols or {}
    device_by_branch = {candidate.branch: candidate for candidate in candidates}
    theta_max = network.theta_max
    reference = network.reference_bus

    def cost_column(name: str, lower: float, upper: float, dollars_per_mwh: float) -> int:
        return lp.add_variable(name, lower, upper, cost=weight * dollars_per_mwh * base)

    for bus in network.buses:
        fixed = 0.0 if bus.id == reference else None
        block.bus_angle[bus.id] = lp.add_variable(
            f"ang_{bus.id}_{tag}",
            -math.inf if fixed is None else fixed,
            math.inf if fixed is None else fixed,
        )

    for branch in network.branches:
        in_service = state.n_status(branch.id)
        limit = branch.s_max * state.rating_factor * in_service
        block.flow[branch.id] = lp.add_variable(f"p_{branch.id}_{tag}", -limit, limit)
        block.branch_angle[branch.id] = theta = lp.add_variable(f"th_{branch.id}_{tag}", -theta_max, theta_max)
        if in_service:
            lp.add_constraint(
                f"thlink_{branch.id}_{tag}",
                [(theta, 1.0), (block.bus_angle[branch.from_bus], -1.0), (block.bus_angle[branch.to_bus], 1.0)],
                Sense.EQ,
                0.0,
            )
        candidate = device_by_branch.get(branch.id)
        if candidate is None:
            if in_service:
                lp.add_constraint(
                    f"flow_{branch.id}_{tag}",
                    [(block.flow[branch.id], 1.0), (theta, -branch.b)],
                    Sense.EQ,
                    0.0,
                )
            continue
        device = add_vsr_columns(
            lp, candidate, tag, block.flow[branch.id], theta, delta_cols[branch.id], theta_max, relax_y
        )
        emit_vsr_constraints(lp, candidate, in_service, branch.b, theta_max, device, tag)
        if strengthen:
            emit_strengthening_rows(lp, candidate, theta_max, device, tag)
        block.devices[branch.id] = device

    for unit in network.generators:
        block.generation[unit.id] = cost_column(f"pg_{unit.id}_{tag}", unit.p_min, unit.p_max, unit.cost)
        if state.is_base:
            continue
        if base_generation is None:
            raise ValueError(f"Contingency state {tag} needs the base dispatch columns.")
        terms = [(block.generation[unit.id], 1.0), (base_generation[unit.id], -1.0)]
        if unit.reschedulable:
            block.adjust_up[unit.id] = up = cost_column(f"up_{unit.id}_{tag}", 0.0, unit.ramp_up, unit.adjust_up_cost)
            block.adjust_down[unit.id] = dn = cost_column(
                f"dn_{unit.id}_{tag}", 0.0, unit.ramp_down, unit.adjust_down_cost
            )
            terms += [(up, -1.0), (dn, 1.0)]
        block.coupling_rows[unit.id] = lp.add_constraint(f"resched_{unit.id}_{tag}", terms, Sense.EQ, 0.0)

    injections: Dict[int, list] = {bus.id: [] for bus in network.buses}
    demand: Dict[int, float] = {bus.id: 0.0 for bus in network.buses}
    for unit in network.generators:
        injections[unit.bus].append((block.generation[unit.id], 1.0))
    for branch in network.branches:
        injections[branch.from_bus].append((block.flow[branch.id], -1.0))
        injections[branch.to_bus].append((block.flow[branch.id], 1.0))
    for load in network.loads:
        p_d = load.p_d * state.load_scale
        demand[load.bus] += p_d
        if not state.is_base:
            block.shed[load.id] = cost_column(f"shed_{load.id}_{tag}", 0.0, p_d, shed_penalty)
            injections[load.bus].append((block.shed[load.id], 1.0))
    if slack_penalty is not None:
        for bus in network.buses:
            block.slack_up[bus.id] = cost_column(f"s1_{bus.id}_{tag}", 0.0, math.inf, slack_penalty)
            block.slack_down[bus.id] = cost_column(f"s2_{bus.id}_{tag}", 0.0, math.inf, slack_penalty)
            injections[bus.id] += [(block.slack_up[bus.id], 1.0), (block.slack_down[bus.id], -1.0)]
    for bus in network.buses:
        block.balance_rows[bus.id] = lp.add_constraint(
            f"bal_{bus.id}_{tag}", injections[bus.id], Sense.EQ, demand[bus.id]
        )
    LOGGER.debug("State %s: %d columns, %d rows so far", tag, lp.num_variables, lp.num_constraints)
    return block


def extract_state(x: np.ndarray, block: StateBlock) -> StateValues:
    def pick(columns: Mapping[int, int]) -> Dict[int, float]:
        return {key: float(x[col]) for key, col in columns.items()}

    slack = {
        bus: float(x[block.slack_up[bus]] - x[block.slack_down[bus]]) for bus in block.slack_up
    }
    return StateValues(
        generation=pick(block.generation),
        flows=pick(block.flow),
        angles=pick(block.bus_angle),
        shed=pick(block.shed),
        adjust_up=pick(block.adjust_up),
        adjust_down=pick(block.adjust_down),
        slack=slack,
        psi={branch: float(x[dev.psi]) for branch, dev in block.devices.items()},
        branch_angles=pick(block.branch_angle),
        y={branch: float(x[dev.y]) for branch, dev in block.devices.items()},
    )


def balance_residuals(network: Network, state: "OperatingState", values: StateValues) -> Dict[int, float]:
    """Per-bus |generation + shed + slack - outflow + inflow - demand| in pu."""

    residual = {bus.id: 0.0 for bus in network.buses}
    for unit in network.generators:
        residual[unit.bus] += values.generation[unit.id]
    for branch in network.branches:
        residual[branch.from_bus] -= values.flows[branch.id]
        residual[branch.to_bus] += values.flows[branch.id]
    for load in network.loads:
        residual[load.bus] += values.shed.get(load.id, 0.0) - load.p_d * state.load_scale
    for bus, slack in values.slack.items():
        residual[bus] += slack
    return {bus: abs(value) for bus, value in residual.items()}
