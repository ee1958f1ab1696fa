"""Two-phase Benders decomposition of the planning model.

The master keeps the investment binaries and the base-state dispatch of every
load level; each contingency state is a subproblem with balance slacks. Phase
one relaxes the flow-direction binaries of the subproblems, phase two solves
them as MILPs, fixes them and re-solves the LP for duals.
"""

from __future__ import annotations

import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from config import BendersConfig, ConfigError, SolverConfig
from milp_core import LinearProgram, Sense, Solution, SolveStatus, SolverError, VarType, solve
from network_model import Network, VsrCandidate
from operating_block import StateBlock, StateValues, add_operating_state, extract_state
from planner_monolithic import PlanningOptions, PlanSolution
from scenario import OperatingState, ScenarioSet


LOGGER = logging.getLogger(__name__)

GenKey = Tuple[int, int]  # (generator id, load level)


class MissingState(Exception):
    """Raised when a cut is aggregated without a result for every contingency state."""


@dataclass(frozen=True)
class BendersCut:
    """alpha >= constant + sum mu (P - P_anchor) + sum beta (delta - delta_anchor), in $/yr."""

    constant: float
    gen_coeffs: Mapping[GenKey, float]
    inst_coeffs: Mapping[int, float]
    anchor_generation: Mapping[GenKey, float]
    anchor_delta: Mapping[int, float]

    def evaluate(self, generation: Mapping[GenKey, float], delta: Mapping[int, float]) -> float:
        value = self.constant
        value += math.fsum(
            coef * (generation[key] - self.anchor_generation[key]) for key, coef in self.gen_coeffs.items()
        )
        value += math.fsum(coef * (delta[key] - self.anchor_delta[key]) for key, coef in self.inst_coeffs.items())
        return value

    @property
    def rhs(self) -> float:
        return self.constant - math.fsum(
            coef * self.anchor_generation[key] for key, coef in self.gen_coeffs.items()
        ) - math.fsum(coef * self.anchor_delta[key] for key, coef in self.inst_coeffs.items())


@dataclass(frozen=True)
class SubproblemResult:
    state: OperatingState
    objective: float
    mu: Mapping[int, float]
    beta: Mapping[int, float]
    slack: float
    y: Mapping[int, float]
    values: StateValues = field(repr=False)


@dataclass(frozen=True)
class IterationRecord:
    iteration: int
    phase: int
    z_down: float
    z_up: float
    gap: float
    alpha: float
    cuts: int
    cut_constant: float
    installed: Tuple[int, ...]
    elapsed_s: float


@dataclass
class BendersLog:
    records: List[IterationRecord] = field(default_factory=list)
    phase_one_bound: float = math.nan
    phase_one_iterations: int = 0
    converged: bool = False
    stop_reason: str = ""

    def to_frame(self) -> pd.DataFrame:
        columns = ["iteration", "phase", "z_down", "z_up", "gap", "alpha", "cuts", "cut_constant", "installed", "elapsed_s"]
        frame = pd.DataFrame([vars(record) for record in self.records], columns=columns)
        frame["installed"] = frame["installed"].map(lambda branches: " ".join(str(b) for b in branches))
        return frame

    @property
    def final(self) -> Optional[IterationRecord]:
        return self.records[-1] if self.records else None


@dataclass
class MasterModel:
    lp: LinearProgram
    blocks: List[StateBlock]
    delta: Dict[int, int]
    alpha: int
    generation: Dict[GenKey, int]


@dataclass
class SubproblemModel:
    lp: LinearProgram
    block: StateBlock
    fix_generation: Dict[int, int]
    fix_delta: Dict[int, int]


def build_master(
    network: Network,
    base_states: Sequence[OperatingState],
    candidates: Sequence[VsrCandidate],
    cuts: Sequence[BendersCut] = (),
    alpha_down: float = 0.0,
    options: Optional[PlanningOptions] = None,
) -> MasterModel:
    options = options or PlanningOptions()
    if any(not state.is_base for state in base_states):
        raise ValueError("The master only holds base states.")
    lp = LinearProgram(f"master_{network.name}")
    delta = {
        candidate.branch: lp.add_variable(
            f"delta_{candidate.branch}", 0.0, 1.0, VarType.BINARY, cost=candidate.annual_cost
        )
        for candidate in candidates
    }
    alpha = lp.add_variable("alpha", alpha_down, math.inf, cost=1.0)
    blocks: List[StateBlock] = []
    generation: Dict[GenKey, int] = {}
    for state in base_states:
        block = add_operating_state(
            lp, network, state, candidates, delta_cols=delta, strengthen=options.strengthen
        )
        blocks.append(block)
        for gen_id, col in block.generation.items():
            generation[(gen_id, state.t)] = col
    for number, cut in enumerate(cuts, start=1):
        terms = [(alpha, 1.0)]
        terms += [(generation[key], -coef) for key, coef in cut.gen_coeffs.items()]
        terms += [(delta[branch], -coef) for branch, coef in cut.inst_coeffs.items()]
        lp.add_constraint(f"cut_{number}", terms, Sense.GE, cut.rhs)
    return MasterModel(lp, blocks, delta, alpha, generation)


def build_subproblem(
    network: Network,
    state: OperatingState,
    fixed_generation: Mapping[int, float],
    fixed_delta: Mapping[int, float],
    candidates: Sequence[VsrCandidate],
    relax_y: bool,
    options: Optional[PlanningOptions] = None,
) -> SubproblemModel:
    """Hourly cost of one contingency state at fixed base dispatch and investments.

    The fixed values enter through equality rows so that their duals give the
    cut coefficients.
    """

    options = options or PlanningOptions()
    if state.is_base:
        raise ValueError("Subproblems are built for contingency states only.")
    lp = LinearProgram(f"sub_{state.tag}")
    local_delta = {
        candidate.branch: lp.add_variable(f"delta_{candidate.branch}", -math.inf, math.inf)
        for candidate in candidates
    }
    local_base = {
        unit.id: lp.add_variable(f"pgbase_{unit.id}", -math.inf, math.inf) for unit in network.generators
    }
    fix_delta = {
        branch: lp.add_constraint(f"fixdelta_{branch}", [(col, 1.0)], Sense.EQ, float(fixed_delta[branch]))
        for branch, col in local_delta.items()
    }
    fix_generation = {
        gen_id: lp.add_constraint(f"fixpg_{gen_id}", [(col, 1.0)], Sense.EQ, float(fixed_generation[gen_id]))
        for gen_id, col in local_base.items()
    }
    block = add_operating_state(
        lp,
        network,
        state,
        candidates,
        delta_cols=local_delta,
        base_generation=local_base,
        weight=1.0,
        shed_penalty=options.shed_penalty,
        slack_penalty=options.slack_penalty,
        relax_y=relax_y,
        strengthen=options.strengthen,
    )
    return SubproblemModel(lp, block, fix_generation, fix_delta)


def _result_from(model: SubproblemModel, solution: Solution) -> SubproblemResult:
    if not solution.is_optimal or solution.duals is None:
        raise SolverError(f"Subproblem {model.lp.name} ended {solution.status.value}")
    values = extract_state(solution.primal, model.block)
    slack = math.fsum(
        solution.primal[col] for col in list(model.block.slack_up.values()) + list(model.block.slack_down.values())
    )
    return SubproblemResult(
        state=model.block.state,
        objective=solution.objective,
        mu={gen_id: float(solution.duals[row]) for gen_id, row in model.fix_generation.items()},
        beta={branch: float(solution.duals[row]) for branch, row in model.fix_delta.items()},
        slack=slack,
        y=values.y,
        values=values,
    )


def solve_subproblem(model: SubproblemModel, solver_cfg: SolverConfig) -> SubproblemResult:
    """LP solve in phase one; in phase two MILP, then the LP with y fixed for duals."""

    if not model.lp.binary_indices().size:
        return _result_from(model, solve(model.lp, solver_cfg))
    integer = solve(model.lp, solver_cfg)
    if integer.primal is None:
        raise SolverError(f"Subproblem {model.lp.name} ended {integer.status.value} without a point")
    fixed = {
        dev.y: (float(round(integer.primal[dev.y])),) * 2 for dev in model.block.devices.values()
    }
    polished = model.lp.relaxed().with_bounds(fixed)
    polished.name = f"{model.lp.name}_fixed_y"
    return _result_from(model, solve(polished, solver_cfg))


def aggregate_cut(
    results: Mapping[Tuple[int, int], SubproblemResult],
    states: Sequence[OperatingState],
    anchor_generation: Mapping[GenKey, float],
    anchor_delta: Mapping[int, float],
) -> BendersCut:
    """Duration-weighted sum of the subproblem values and duals."""

    gen_coeffs: Dict[GenKey, float] = {key: 0.0 for key in anchor_generation}
    inst_coeffs: Dict[int, float] = {key: 0.0 for key in anchor_delta}
    constant_terms: List[float] = []
    for state in states:
        result = results.get(state.key)
        if result is None:
            raise MissingState(f"No subproblem result for state {state.tag}")
        weight = state.duration
        constant_terms.append(weight * result.objective)
        for gen_id, mu in result.mu.items():
            gen_coeffs[(gen_id, state.t)] += weight * mu
        for branch, beta in result.beta.items():
            inst_coeffs[branch] += weight * beta
    return BendersCut(
        constant=math.fsum(constant_terms),
        gen_coeffs=gen_coeffs,
        inst_coeffs=inst_coeffs,
        anchor_generation=dict(anchor_generation),
        anchor_delta=dict(anchor_delta),
    )


def _relative_gap(z_up: float, z_down: float) -> float:
    return abs(z_up - z_down) / max(abs(z_down), 1e-9)


def _solve_subproblems(
    network: Network,
    states: Sequence[OperatingState],
    master: MasterModel,
    x: np.ndarray,
    candidates: Sequence[VsrCandidate],
    relax_y: bool,
    options: PlanningOptions,
    solver_cfg: SolverConfig,
    workers: int,
) -> Dict[Tuple[int, int], SubproblemResult]:
    delta_hat = {branch: float(round(x[col])) for branch, col in master.delta.items()}

    def run(state: OperatingState) -> SubproblemResult:
        generation = {gen_id: float(x[master.generation[(gen_id, t)]]) for gen_id, t in master.generation if t == state.t}
        model = build_subproblem(network, state, generation, delta_hat, candidates, relax_y, options)
        result = solve_subproblem(model, solver_cfg)
        LOGGER.debug("Subproblem %s: %.6g $/h, slack %.3g", state.tag, result.objective, result.slack)
        return result

    if workers > 1 and len(states) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run, states))
    else:
        results = [run(state) for state in states]
    return {result.state.key: result for result in results}


def run_two_phase(
    network: Network,
    scenarios: ScenarioSet,
    candidates: Sequence[VsrCandidate],
    config: Optional[BendersConfig] = None,
    solver_cfg: Optional[SolverConfig] = None,
    options: Optional[PlanningOptions] = None,
) -> Tuple[PlanSolution, BendersLog]:
    config = config or BendersConfig()
    solver_cfg = solver_cfg or SolverConfig()
    options = options or PlanningOptions()
    if solver_cfg.backend == "external" and solver_cfg.solution_file:
        # one file cannot answer the master and every subproblem
        raise ConfigError("solver.solution_file is not supported in benders mode; set solver.command instead.")
    started = time.monotonic()
    base_states = scenarios.base_states()
    contingency_states = scenarios.contingency_states()
    cuts: List[BendersCut] = []
    log = BendersLog()
    iteration = 0
    out_of_budget = False
    last: Optional[Tuple[MasterModel, Solution, Dict[Tuple[int, int], SubproblemResult]]] = None

    for phase in (1, 2):
        z_down = -math.inf
        while True:
            iteration += 1
            master = build_master(network, base_states, candidates, cuts, config.alpha_down, options)
            master_solution = solve(master.lp, solver_cfg)
            if master_solution.primal is None:
                raise SolverError(f"Master problem ended {master_solution.status.value} at iteration {iteration}")
            x = master_solution.primal
            bound = master_solution.bound if math.isfinite(master_solution.bound) else master_solution.objective
            z_down = max(z_down, bound)

            results = _solve_subproblems(
                network,
                contingency_states,
                master,
                x,
                candidates,
                relax_y=phase == 1,
                options=options,
                solver_cfg=solver_cfg,
                workers=config.workers,
            )
            anchor_generation = {key: float(x[col]) for key, col in master.generation.items()}
            anchor_delta = {branch: float(round(x[col])) for branch, col in master.delta.items()}
            cut = aggregate_cut(results, contingency_states, anchor_generation, anchor_delta)
            alpha_hat = float(x[master.alpha])
            z_up = master_solution.objective - alpha_hat + cut.constant
            gap = _relative_gap(z_up, z_down)
            elapsed = time.monotonic() - started
            installed = tuple(sorted(branch for branch, flag in anchor_delta.items() if flag))
            log.records.append(
                IterationRecord(iteration, phase, z_down, z_up, gap, alpha_hat, len(cuts), cut.constant, installed, elapsed)
            )
            LOGGER.info(
                "Benders phase %d iteration %d: Z_down %.6f Z_up %.6f gap %.3e devices %s",
                phase,
                iteration,
                z_down,
                z_up,
                gap,
                list(installed),
            )
            last = (master, master_solution, results)

            if gap <= config.epsilon:
                if phase == 2 and not out_of_budget:
                    log.converged = True
                    log.stop_reason = "converged"
                break
            # phase one leaves at least one iteration for phase two
            reserve = 1 if phase == 1 else 0
            if iteration >= config.iter_cap - reserve:
                out_of_budget = True
                log.stop_reason = "iteration cap"
                break
            if config.time_limit_s is not None and elapsed >= config.time_limit_s:
                out_of_budget = True
                log.stop_reason = "time limit"
                break
            cuts.append(cut)

        if phase == 1:
            log.phase_one_bound = z_down
            log.phase_one_iterations = iteration
            if out_of_budget:
                LOGGER.warning("Phase one stopped by %s; running one phase-two iteration", log.stop_reason)

    if not log.converged:
        LOGGER.warning("Benders stopped without convergence (%s), final gap %.3e", log.stop_reason, log.final.gap)

    master, master_solution, results = last
    x = master_solution.primal
    state_values: Dict[int, StateValues] = {block.state.index: extract_state(x, block) for block in master.blocks}
    for result in results.values():
        state_values[result.state.index] = result.values
    final = log.final
    plan = PlanSolution(
        network=network,
        scenarios=scenarios,
        candidates=tuple(candidates),
        installed={branch: int(round(x[col])) for branch, col in master.delta.items()},
        state_values=state_values,
        objective=final.z_up,
        status=SolveStatus.OPTIMAL if log.converged else SolveStatus.ITER_LIMIT,
        mip_gap=final.gap,
        bound=final.z_down,
        shed_penalty=options.shed_penalty,
        slack_penalty=options.slack_penalty,
    )
    if plan.total_slack > 1e-6:
        LOGGER.warning("Final plan leaves %.4g pu of balance slack; a contingency cannot be covered", plan.total_slack)
    return plan, log
