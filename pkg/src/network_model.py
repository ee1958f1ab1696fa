"""Grid domain types and series-compensation device parameters."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Dict, Iterable, List, Tuple


LOGGER = logging.getLogger(__name__)

DEFAULT_THETA_MAX = math.pi / 3
DEFAULT_EMERGENCY_FACTOR = 1.10


class SingularCompensation(Exception):
    """Raised when a compensation endpoint drives the compensated reactance to zero or below."""


@dataclass(frozen=True)
class Bus:
    id: int
    is_reference: bool = False


@dataclass(frozen=True)
class Branch:
    id: int
    from_bus: int
    to_bus: int
    x: float
    s_max: float
    emergency_factor: float = DEFAULT_EMERGENCY_FACTOR

    @property
    def b(self) -> float:
        return 1.0 / self.x


@dataclass(frozen=True)
class Generator:
    id: int
    bus: int
    p_min: float
    p_max: float
    cost: float
    adjust_up_cost: float
    adjust_down_cost: float
    ramp_up: float
    ramp_down: float
    reschedulable: bool = True


@dataclass(frozen=True)
class Load:
    id: int
    bus: int
    p_d: float


@dataclass(frozen=True)
class VsrCandidate:
    branch: int
    bv_min: float
    bv_max: float
    big_m: float
    annual_cost: float


@dataclass(frozen=True)
class Network:
    """Per-unit DC network; angles in radians, costs in $/MWh."""

    buses: Tuple[Bus, ...]
    branches: Tuple[Branch, ...]
    generators: Tuple[Generator, ...]
    loads: Tuple[Load, ...]
    base_mva: float = 100.0
    theta_max: float = DEFAULT_THETA_MAX
    name: str = "case"
    vsr_candidates: Tuple[VsrCandidate, ...] = ()
    _bus_pos: Dict[int, int] = field(default_factory=dict, init=False, repr=False, compare=False)
    _branch_pos: Dict[int, int] = field(default_factory=dict, init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        object.__setattr__(self, "_bus_pos", {bus.id: pos for pos, bus in enumerate(self.buses)})
        object.__setattr__(self, "_branch_pos", {br.id: pos for pos, br in enumerate(self.branches)})
        if len(self._bus_pos) != len(self.buses):
            raise ValueError("Bus ids must be unique.")
        if len(self._branch_pos) != len(self.branches):
            raise ValueError("Branch ids must be unique.")
        references = [bus.id for bus in self.buses if bus.is_reference]
        if len(references) != 1:
            raise ValueError(f"Exactly one reference bus required, found {len(references)}.")
        for branch in self.branches:
            if branch.from_bus not in self._bus_pos or branch.to_bus not in self._bus_pos:
                raise ValueError(f"Branch {branch.id} references an unknown bus.")
            if branch.x <= 0 or branch.s_max <= 0:
                raise ValueError(f"Branch {branch.id} needs x > 0 and s_max > 0.")
        for unit in self.generators:
            if unit.bus not in self._bus_pos:
                raise ValueError(f"Generator {unit.id} sits on unknown bus {unit.bus}.")
        for load in self.loads:
            if load.bus not in self._bus_pos:
                raise ValueError(f"Load {load.id} sits on unknown bus {load.bus}.")
        for candidate in self.vsr_candidates:
            if candidate.branch not in self._branch_pos:
                raise ValueError(f"Candidate on unknown branch {candidate.branch}.")

    @property
    def reference_bus(self) -> int:
        return next(bus.id for bus in self.buses if bus.is_reference)

    def bus_position(self, bus_id: int) -> int:
        return self._bus_pos[bus_id]

    def branch(self, branch_id: int) -> Branch:
        return self.branches[self._branch_pos[branch_id]]

    def branch_position(self, branch_id: int) -> int:
        return self._branch_pos[branch_id]

    def has_branch(self, branch_id: int) -> bool:
        return branch_id in self._branch_pos

    def total_load(self) -> float:
        return math.fsum(load.p_d for load in self.loads)

    def replace_branch(self, branch_id: int, **changes) -> "Network":
        """Copy of the network with one branch's fields changed."""

        position = self._branch_pos[branch_id]
        branches = list(self.branches)
        branches[position] = replace(branches[position], **changes)
        return replace(self, branches=tuple(branches))

    def with_candidates(self, candidates: Iterable[VsrCandidate]) -> "Network":
        return replace(self, vsr_candidates=tuple(candidates))

    def scaled_loads(self, scale: float) -> "Network":
        return replace(self, loads=tuple(replace(load, p_d=load.p_d * scale) for load in self.loads))



def vsr_susceptance_bounds(x: float, comp_min: float, comp_max: float) -> Tuple[float, float]:
    """Susceptance change range of a line compensated between comp_min*x and comp_max*x.

    A series reactance x_v on a line of reactance x changes its susceptance by
    -x_v / (x (x + x_v)); the most capacitive setting gives the upper bound.
    """

    if x <= 0:
        raise ValueError(f"Line reactance must be positive, got {x}.")
    if comp_min > comp_max:
        raise ValueError(f"comp_min {comp_min} exceeds comp_max {comp_max}.")

    def delta_b(comp: float) -> float:
        x_v = comp * x
        if x + x_v <= 0:
            raise SingularCompensation(f"Compensation {comp:+.3f} leaves reactance {x + x_v} <= 0.")
        return -x_v / (x * (x + x_v))

    return delta_b(comp_max), delta_b(comp_min)


def big_m(x: float, theta_max: float) -> float:
    """Published big-M constant (7 / (3 x)) * theta_max for the (-70%, +20%) range."""

    if x <= 0 or theta_max <= 0:
        raise ValueError("big_m needs x > 0 and theta_max > 0.")
    return 7.0 / (3.0 * x) * theta_max


def exact_big_m(bv_min: float, bv_max: float, theta_max: float) -> float:
    """Smallest M for which the big-M pairs never cut off a feasible device flow."""

    if theta_max <= 0:
        raise ValueError("exact_big_m needs theta_max > 0.")
    return theta_max * (bv_max - bv_min)


def annualized_cost(total_cost: float, interest: float, life_years: int) -> float:
    """Equivalent annual cost through the capital recovery factor."""

    if interest <= 0 or life_years < 1 or total_cost < 0:
        raise ValueError("annualized_cost needs interest > 0, life_years >= 1 and total_cost >= 0.")
    growth = (1.0 + interest) ** life_years
    return total_cost * interest * growth / (growth - 1.0)


def make_candidates(
    network: Network,
    branch_ids: Iterable[int],
    comp_min: float = -0.7,
    comp_max: float = 0.2,
    device_cost: float = 1_948_000.0,
    interest: float = 0.05,
    life_years: int = 5,
    big_m_rule: str = "exact",
) -> List[VsrCandidate]:
    annual = annualized_cost(device_cost, interest, life_years)
    candidates: List[VsrCandidate] = []
    for branch_id in branch_ids:
        branch = network.branch(branch_id)
        bv_min, bv_max = vsr_susceptance_bounds(branch.x, comp_min, comp_max)
        if big_m_rule == "reactance":
            m_value = big_m(branch.x, network.theta_max)
        else:
            m_value = exact_big_m(bv_min, bv_max, network.theta_max)
        if m_value < bv_max * network.theta_max:
            LOGGER.warning("Big-M %.4g below bv_max*theta_max on branch %d", m_value, branch_id)
        candidates.append(VsrCandidate(branch_id, bv_min, bv_max, m_value, annual))
    LOGGER.info("Built %d device candidates (A_I = %.2f $/yr each)", len(candidates), annual)
    return candidates
