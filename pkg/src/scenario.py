"""Operating states over load levels and N-1 outages, plus contingency and candidate screening."""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field
from typing import Dict, FrozenSet, List, Mapping, Optional, Sequence, Set, Tuple

import networkx as nx
import numpy as np
import pandas as pd
from scipy import sparse
from scipy.sparse.linalg import splu

from network_model import Network


LOGGER = logging.getLogger(__name__)

HOURS_PER_YEAR = 8760.0
# durations are multiples of 2**-20 h so their float sum is exact
DURATION_QUANTUM = 2.0 ** -20
SCORE_DECIMALS = 9


class IslandingContingency(Exception):
    """Raised when a requested outage disconnects the network."""


class DurationUnderflow(Exception):
    """Raised when contingency hours leave a negative base-state duration."""


class ScreeningError(Exception):
    """Raised when the base-case dispatch needed for screening cannot be solved."""


class DegenerateDuals(UserWarning):
    """Most candidate score mass sits on branches with identical scores."""


@dataclass(frozen=True)
class LoadLevel:
    id: int
    scale: float
    label: str

    def __post_init__(self) -> None:
        if self.scale <= 0:
            raise ValueError(f"Load level {self.label!r} needs scale > 0.")


@dataclass(frozen=True)
class OperatingState:
    index: int
    c: int
    t: int
    label: str
    load_scale: float
    duration: float
    outaged_branches: FrozenSet[int] = frozenset()
    rating_factor: float = 1.0

    @property
    def is_base(self) -> bool:
        return self.c == 0

    @property
    def key(self) -> Tuple[int, int]:
        return (self.c, self.t)

    @property
    def tag(self) -> str:
        return f"c{self.c}_t{self.t}"

    def n_status(self, branch_id: int) -> int:
        return 0 if branch_id in self.outaged_branches else 1


@dataclass(frozen=True)
class ScenarioSet:
    states: Tuple[OperatingState, ...]
    levels: Tuple[LoadLevel, ...]
    contingencies: Tuple[int, ...] = ()

    def n_kct(self, branch_id: int, state_index: int) -> int:
        return self.states[state_index].n_status(branch_id)

    def base_states(self) -> List[OperatingState]:
        return [state for state in self.states if state.is_base]

    def contingency_states(self) -> List[OperatingState]:
        return [state for state in self.states if not state.is_base]

    def base_state(self, t: int) -> OperatingState:
        return next(state for state in self.states if state.is_base and state.t == t)

    def total_hours(self) -> float:
        return math.fsum(state.duration for state in self.states)

    def without_contingencies(self) -> "ScenarioSet":
        return ScenarioSet(tuple(self.base_states()), self.levels, ())


@dataclass(frozen=True)
class DurationPolicy:
    """Hours per year for every (c, t).

    Each contingency state gets ``contingency_hours``; base states share the
    rest of the year by ``base_split``. The quantization residual goes to the
    base state of the ``residual_level`` label (the first level if absent).
    """

    base_split: Mapping[str, float] = field(
        default_factory=lambda: {"peak": 0.15, "normal": 0.55, "low": 0.30}
    )
    contingency_hours: float = 2.0
    total_hours: float = HOURS_PER_YEAR
    residual_level: str = "peak"

    def allocate(self, levels: Sequence[LoadLevel], num_contingencies: int) -> Tuple[List[float], List[float]]:
        contingency_total = self.contingency_hours * num_contingencies * len(levels)
        base_total = self.total_hours - contingency_total
        if base_total < 0:
            raise DurationUnderflow(
                f"{contingency_total:.1f} contingency hours exceed the {self.total_hours:.0f} h year"
            )
        shares = [self.base_split.get(level.label) for level in levels]
        if any(share is None for share in shares):
            LOGGER.warning("base_hours_split misses some level labels; splitting base hours evenly")
            shares = [1.0] * len(levels)
        share_sum = math.fsum(shares)
        base = [_quantize(base_total * share / share_sum) for share in shares]
        per_contingency = _quantize(self.contingency_hours)

        labels = [level.label for level in levels]
        residual_at = labels.index(self.residual_level) if self.residual_level in labels else 0
        others = math.fsum(base) - base[residual_at] + per_contingency * num_contingencies * len(levels)
        base[residual_at] = self.total_hours - others
        if base[residual_at] < 0:
            raise DurationUnderflow("Base-state duration became negative after normalization")
        return base, [per_contingency] * len(levels)


def _quantize(hours: float) -> float:
    return round(hours / DURATION_QUANTUM) * DURATION_QUANTUM


def make_load_levels(pairs: Sequence[Tuple[str, float]]) -> List[LoadLevel]:
    return [LoadLevel(id=index, scale=scale, label=label) for index, (label, scale) in enumerate(pairs)]


def _branch_graph(network: Network, skip: Optional[int] = None) -> nx.Graph:
    graph = nx.Graph()
    graph.add_nodes_from(bus.id for bus in network.buses)
    for branch in network.branches:
        if branch.id == skip:
            continue
        ends = (branch.from_bus, branch.to_bus)
        if graph.has_edge(*ends):
            graph.edges[ends]["branches"].append(branch.id)
        else:
            graph.add_edge(*ends, branches=[branch.id])
    return graph


def islanding_branches(network: Network) -> Set[int]:
    """Branches whose single outage splits the network (bridges without a parallel circuit)."""

    graph = _branch_graph(network)
    islanding: Set[int] = set()
    for ends in nx.bridges(graph):
        members = graph.edges[ends]["branches"]
        if len(members) == 1:
            islanding.add(members[0])
    return islanding


def build_scenarios(
    network: Network,
    load_levels: Sequence[LoadLevel],
    contingencies: Sequence[int],
    duration_policy: Optional[DurationPolicy] = None,
) -> ScenarioSet:
    """Enumerate base states for every level, then every (contingency, level) pair."""

    policy = duration_policy or DurationPolicy()
    islanding = islanding_branches(network)
    for branch_id in contingencies:
        if not network.has_branch(branch_id):
            raise ValueError(f"Contingency branch {branch_id} is not an in-service branch.")
        if branch_id in islanding:
            raise IslandingContingency(f"Outage of branch {branch_id} disconnects the network")
    if len(set(contingencies)) != len(contingencies):
        raise ValueError("Contingency list has duplicates.")

    base_hours, contingency_hours = policy.allocate(load_levels, len(contingencies))
    states: List[OperatingState] = []
    for level, hours in zip(load_levels, base_hours):
        states.append(
            OperatingState(
                index=len(states), c=0, t=level.id, label=level.label, load_scale=level.scale, duration=hours
            )
        )
    for c, branch_id in enumerate(contingencies, start=1):
        emergency = network.branch(branch_id).emergency_factor
        for level, hours in zip(load_levels, contingency_hours):
            states.append(
                OperatingState(
                    index=len(states),
                    c=c,
                    t=level.id,
                    label=level.label,
                    load_scale=level.scale,
                    duration=hours,
                    outaged_branches=frozenset({branch_id}),
                    rating_factor=emergency,
                )
            )
    scenarios = ScenarioSet(tuple(states), tuple(load_levels), tuple(contingencies))
    LOGGER.info(
        "Built %d operating states (%d levels, %d contingencies, %.1f h)",
        len(states),
        len(load_levels),
        len(contingencies),
        scenarios.total_hours(),
    )
    return scenarios


# -- screening ---------------------------------------------------------------


@dataclass(frozen=True)
class BaseDispatch:
    """Base-case DC-OPF at one load scale; flows in pu ordered like network.branches."""

    generation: Mapping[int, float]
    flows: np.ndarray
    lmp: Mapping[int, float]
    objective: float
    load_scale: float


def solve_base_dispatch(network: Network, load_scale: float = 1.0, method: str = "highs-ds") -> BaseDispatch:
    """Hourly base-case DC-OPF; LMPs in $/MWh are the bus balance duals."""

    from milp_core import LinearProgram, solve_lp
    from operating_block import add_operating_state, extract_state

    state = OperatingState(index=0, c=0, t=0, label="screen", load_scale=load_scale, duration=1.0)
    lp = LinearProgram("base_dispatch")
    block = add_operating_state(lp, network, state)
    solution = solve_lp(lp, method=method)
    if not solution.is_optimal:
        raise ScreeningError(f"Base-case dispatch at scale {load_scale} is {solution.status.value}")
    values = extract_state(solution.primal, block)
    flows = np.array([values.flows[branch.id] for branch in network.branches])
    lmp = {bus: solution.duals[row] / network.base_mva for bus, row in block.balance_rows.items()}
    return BaseDispatch(values.generation, flows, lmp, solution.objective, load_scale)


def ptdf_matrix(network: Network) -> np.ndarray:
    """Branch x bus power transfer distribution factors, reference column zero."""

    num_bus = len(network.buses)
    rows = np.arange(len(network.branches))
    from_pos = np.array([network.bus_position(br.from_bus) for br in network.branches])
    to_pos = np.array([network.bus_position(br.to_bus) for br in network.branches])
    susceptance = np.array([br.b for br in network.branches])

    incidence = sparse.csr_matrix(
        (np.concatenate([np.ones(rows.size), -np.ones(rows.size)]), (np.concatenate([rows, rows]), np.concatenate([from_pos, to_pos]))),
        shape=(rows.size, num_bus),
    )
    branch_b = sparse.diags(susceptance) @ incidence
    bus_b = (incidence.T @ branch_b).tocsc()

    keep = np.ones(num_bus, dtype=bool)
    keep[network.bus_position(network.reference_bus)] = False
    reduced = bus_b[keep][:, keep].tocsc()
    theta = splu(reduced).solve(branch_b[:, keep].T.toarray())
    ptdf = np.zeros((rows.size, num_bus))
    ptdf[:, keep] = theta.T
    return ptdf


def lodf_matrix(network: Network) -> np.ndarray:
    """Line outage distribution factors; columns of islanding outages are nan."""

    ptdf = ptdf_matrix(network)
    from_pos = [network.bus_position(br.from_bus) for br in network.branches]
    to_pos = [network.bus_position(br.to_bus) for br in network.branches]
    transfer = ptdf[:, from_pos] - ptdf[:, to_pos]
    denominator = 1.0 - np.diag(transfer)
    with np.errstate(divide="ignore", invalid="ignore"):
        lodf = transfer / denominator[np.newaxis, :]
    lodf[:, np.abs(denominator) < 1e-9] = np.nan
    np.fill_diagonal(lodf, -1.0)
    return lodf


def contingency_scores(network: Network, base_dispatch: BaseDispatch) -> pd.Series:
    """Post-outage overload (pu) summed over surviving branches, per non-islanding outage."""

    lodf = lodf_matrix(network)
    islanding = islanding_branches(network)
    flows = base_dispatch.flows
    limits = np.array([br.s_max * br.emergency_factor for br in network.branches])
    scores: Dict[int, float] = {}
    for position, branch in enumerate(network.branches):
        if branch.id in islanding or np.isnan(lodf[:, position]).any():
            continue
        post = flows + lodf[:, position] * flows[position]
        overload = np.clip(np.abs(post) - limits, 0.0, None)
        overload[position] = 0.0
        scores[branch.id] = round(float(overload.sum()), SCORE_DECIMALS)
    return pd.Series(scores, name="score", dtype=float)


def _rank(scores: pd.Series, count: int) -> List[int]:
    if count <= 0 or scores.empty:
        return []
    frame = pd.DataFrame({"branch_id": scores.index.astype(int), "score": scores.to_numpy()})
    frame = frame.sort_values(["score", "branch_id"], ascending=[False, True], kind="mergesort")
    return frame["branch_id"].head(count).tolist()


def rank_contingencies(network: Network, base_dispatch: BaseDispatch, count: int) -> List[int]:
    ranked = _rank(contingency_scores(network, base_dispatch), count)
    LOGGER.info("Selected %d contingencies", len(ranked))
    return ranked


def candidate_scores(network: Network, base_dispatch: BaseDispatch) -> pd.Series:
    """|LMP_from - LMP_to| * |flow| in $/h for every non-islanding branch."""

    islanding = islanding_branches(network)
    scores: Dict[int, float] = {}
    for position, branch in enumerate(network.branches):
        if branch.id in islanding:
            continue
        spread = abs(base_dispatch.lmp[branch.from_bus] - base_dispatch.lmp[branch.to_bus])
        flow_mw = abs(base_dispatch.flows[position]) * network.base_mva
        scores[branch.id] = round(spread * flow_mw, SCORE_DECIMALS)
    return pd.Series(scores, name="score", dtype=float)


def select_candidates(network: Network, base_dispatch: BaseDispatch, count: int) -> List[int]:
    scores = candidate_scores(network, base_dispatch)
    total = float(scores.sum())
    if total > 0:
        group_sizes = scores.map(scores.value_counts())
        tied_mass = float(scores[(group_sizes > 1) & (scores > 0)].sum())
        if tied_mass > 0.5 * total:
            message = f"{tied_mass / total:.0%} of candidate score mass is on tied branches"
            LOGGER.warning(message)
            warnings.warn(message, DegenerateDuals)
    else:
        LOGGER.info("No LMP separation in the base case; candidates follow branch order")
    ranked = _rank(scores, count)
    LOGGER.info("Selected %d device candidates", len(ranked))
    return ranked


def screening_level(levels: Sequence[LoadLevel], label: str) -> LoadLevel:
    for level in levels:
        if level.label == label:
            return level
    LOGGER.warning("No load level labelled %r; screening at the highest scale", label)
    return max(levels, key=lambda level: level.scale)
