"""Solver-agnostic LP/MILP models, a HiGHS-backed LP solve with duals and best-bound branch and bound."""

from __future__ import annotations

import heapq
import itertools
import logging
import math
import subprocess
import time
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Optional, Tuple, Union

import numpy as np
from scipy import sparse
from scipy.optimize import linprog

from config import SolverConfig


LOGGER = logging.getLogger(__name__)

FEASIBILITY_TOL = 1e-7
OPTIMALITY_TOL = 1e-6
INTEGRALITY_TOL = 1e-6
DEFAULT_GAP = 1e-4


class SolverError(Exception):
    """Raised when a model is handed to a solver that cannot accept it."""


class ModelSizeExceeded(SolverError):
    """Raised when the built-in backend is asked to solve a model above its size cap."""


class ExternalSolveRequired(SolverError):
    """Raised after the MPS export when no external command or solution file is configured."""

    def __init__(self, message: str, mps_path: Path) -> None:
        super().__init__(message)
        self.mps_path = mps_path


class NameCollision(Exception):
    """Raised when a variable or constraint name is declared twice or is unusable."""


class VarType(str, Enum):
    CONTINUOUS = "continuous"
    BINARY = "binary"


class Sense(str, Enum):
    LE = "<="
    EQ = "="
    GE = ">="


class SolveStatus(str, Enum):
    OPTIMAL = "Optimal"
    INFEASIBLE = "Infeasible"
    UNBOUNDED = "Unbounded"
    ITER_LIMIT = "IterLimit"


@dataclass(frozen=True)
class Variable:
    name: str
    lower: float
    upper: float
    vtype: VarType


@dataclass(frozen=True)
class Constraint:
    name: str
    indices: Tuple[int, ...]
    coefficients: Tuple[float, ...]
    sense: Sense
    rhs: float


Terms = Union[Mapping[int, float], Iterable[Tuple[int, float]]]

MAX_NAME_LENGTH = 255


def _check_name(name: str) -> None:
    if not name or len(name) > MAX_NAME_LENGTH or any(ch.isspace() for ch in name):
        raise NameCollision(f"Unusable name {name!r}: must be 1-{MAX_NAME_LENGTH} chars without whitespace.")


def _merge_terms(terms: Terms) -> Dict[int, float]:
    items = terms.items() if isinstance(terms, Mapping) else terms
    merged: Dict[int, float] = {}
    for index, coef in items:
        merged[int(index)] = merged.get(int(index), 0.0) + float(coef)
    return {index: coef for index, coef in merged.items() if coef != 0.0}


class LinearProgram:
    """Minimisation model with named columns and rows.

    Models are built incrementally and treated as read-only once handed to a
    solver. Copies made by ``relaxed`` and ``with_bounds`` share the row
    storage with the original.
    """

    def __init__(self, name: str = "model") -> None:
        self.name = name
        self.variables: List[Variable] = []
        self.constraints: List[Constraint] = []
        self._cost: List[float] = []
        self.objective_constant = 0.0
        self._var_index: Dict[str, int] = {}
        self._row_index: Dict[str, int] = {}
        self._matrix: Optional[sparse.csr_matrix] = None

    # -- building -----------------------------------------------------------

    def add_variable(
        self,
        name: str,
        lower: float = 0.0,
        upper: float = math.inf,
        vtype: VarType = VarType.CONTINUOUS,
        cost: float = 0.0,
    ) -> int:
        _check_name(name)
        if name in self._var_index:
            raise NameCollision(f"Variable {name!r} already declared in {self.name}.")
        lower, upper = float(lower), float(upper)
        if lower > upper:
            raise ValueError(f"Variable {name!r} has lower {lower} > upper {upper}.")
        if vtype is VarType.BINARY and (lower < 0.0 or upper > 1.0):
            raise ValueError(f"Binary variable {name!r} must have bounds within [0, 1].")
        index = len(self.variables)
        self.variables.append(Variable(name, lower, upper, vtype))
        self._cost.append(float(cost))
        self._var_index[name] = index
        self._matrix = None
        return index

    def add_constraint(self, name: str, terms: Terms, sense: Union[Sense, str], rhs: float) -> int:
        _check_name(name)
        if name in self._row_index:
            raise NameCollision(f"Constraint {name!r} already declared in {self.name}.")
        merged = _merge_terms(terms)
        for index in merged:
            if not 0 <= index < len(self.variables):
                raise ValueError(f"Constraint {name!r} references undeclared column {index}.")
        ordered = sorted(merged)
        row = len(self.constraints)
        self.constraints.append(
            Constraint(
                name=name,
                indices=tuple(ordered),
                coefficients=tuple(merged[index] for index in ordered),
                sense=Sense(sense),
                rhs=float(rhs),
            )
        )
        self._row_index[name] = row
        self._matrix = None
        return row

    def add_objective(self, index: int, coef: float) -> None:
        self._cost[index] += float(coef)

    def set_bounds(self, index: int, lower: float, upper: float) -> None:
        variable = self.variables[index]
        if lower > upper:
            raise ValueError(f"Variable {variable.name!r} has lower {lower} > upper {upper}.")
        self.variables[index] = Variable(variable.name, float(lower), float(upper), variable.vtype)

    # -- queries ------------------------------------------------------------

    def var(self, name: str) -> int:
        return self._var_index[name]

    def row(self, name: str) -> int:
        return self._row_index[name]

    @property
    def num_variables(self) -> int:
        return len(self.variables)

    @property
    def num_constraints(self) -> int:
        return len(self.constraints)

    @property
    def num_nonzeros(self) -> int:
        return sum(len(con.indices) for con in self.constraints)

    def bounds(self) -> Tuple[np.ndarray, np.ndarray]:
        lower = np.array([var.lower for var in self.variables], dtype=float)
        upper = np.array([var.upper for var in self.variables], dtype=float)
        return lower, upper

    def cost_vector(self) -> np.ndarray:
        return np.array(self._cost, dtype=float)

    def binary_indices(self) -> np.ndarray:
        return np.array(
            [index for index, var in enumerate(self.variables) if var.vtype is VarType.BINARY],
            dtype=int,
        )

    def matrix(self) -> sparse.csr_matrix:
        if self._matrix is None:
            rows = [np.full(len(con.indices), row) for row, con in enumerate(self.constraints)]
            cols = [np.asarray(con.indices, dtype=int) for con in self.constraints]
            vals = [np.asarray(con.coefficients, dtype=float) for con in self.constraints]
            shape = (len(self.constraints), len(self.variables))
            if rows:
                self._matrix = sparse.coo_matrix(
                    (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=shape
                ).tocsr()
            else:
                self._matrix = sparse.csr_matrix(shape)
        return self._matrix

    def senses(self) -> np.ndarray:
        return np.array([con.sense.value for con in self.constraints], dtype=object)

    def rhs(self) -> np.ndarray:
        return np.array([con.rhs for con in self.constraints], dtype=float)

    def objective_value(self, x: np.ndarray) -> float:
        return float(self.cost_vector() @ x + self.objective_constant)

    def max_violation(self, x: np.ndarray) -> float:
        """Largest bound or row violation of the point ``x``."""

        x = np.asarray(x, dtype=float)
        lower, upper = self.bounds()
        worst = float(max(np.max(lower - x, initial=0.0), np.max(x - upper, initial=0.0)))
        if self.constraints:
            activity = self.matrix() @ x
            rhs = self.rhs()
            for row, con in enumerate(self.constraints):
                diff = activity[row] - rhs[row]
                if con.sense is Sense.LE:
                    worst = max(worst, diff)
                elif con.sense is Sense.GE:
                    worst = max(worst, -diff)
                else:
                    worst = max(worst, abs(diff))
        return worst

    # -- derived models -----------------------------------------------------

    def _shallow_copy(self) -> "LinearProgram":
        clone = LinearProgram(self.name)
        clone.variables = list(self.variables)
        clone.constraints = self.constraints
        clone._cost = list(self._cost)
        clone.objective_constant = self.objective_constant
        clone._var_index = self._var_index
        clone._row_index = self._row_index
        clone._matrix = self._matrix
        return clone

    def relaxed(self) -> "LinearProgram":
        clone = self._shallow_copy()
        clone.variables = [
            Variable(var.name, var.lower, var.upper, VarType.CONTINUOUS) for var in self.variables
        ]
        return clone

    def with_bounds(self, overrides: Mapping[int, Tuple[float, float]]) -> "LinearProgram":
        clone = self._shallow_copy()
        for index, (lower, upper) in overrides.items():
            clone.set_bounds(index, lower, upper)
        return clone


@dataclass
class Solution:
    status: SolveStatus
    objective: float = math.nan
    primal: Optional[np.ndarray] = None
    duals: Optional[np.ndarray] = None
    reduced_costs: Optional[np.ndarray] = None
    dual_objective: float = math.nan
    bound: float = math.nan
    mip_gap: float = math.nan
    nodes: int = 0
    iterations: int = 0
    message: str = ""
    var_index: Mapping[str, int] = field(default_factory=dict, repr=False)
    row_index: Mapping[str, int] = field(default_factory=dict, repr=False)

    @property
    def is_optimal(self) -> bool:
        return self.status is SolveStatus.OPTIMAL

    @property
    def has_primal(self) -> bool:
        return self.primal is not None

    @property
    def duality_residual(self) -> float:
        return abs(self.objective - self.dual_objective) / (1.0 + abs(self.objective))

    def value(self, name: str) -> float:
        if self.primal is None:
            raise SolverError(f"No primal values available (status {self.status.value}).")
        return float(self.primal[self.var_index[name]])

    def dual(self, name: str) -> float:
        if self.duals is None:
            raise SolverError(f"No dual values available (status {self.status.value}).")
        return float(self.duals[self.row_index[name]])


@dataclass(frozen=True)
class _StandardForm:
    cost: np.ndarray
    a_ub: Optional[sparse.csr_matrix]
    b_ub: Optional[np.ndarray]
    a_eq: Optional[sparse.csr_matrix]
    b_eq: Optional[np.ndarray]
    ub_rows: np.ndarray
    ub_sign: np.ndarray
    eq_rows: np.ndarray


def _standard_form(lp: LinearProgram) -> _StandardForm:
    """Split rows into linprog's A_ub x <= b_ub and A_eq x = b_eq; >= rows are negated."""

    matrix = lp.matrix()
    senses = lp.senses()
    rhs = lp.rhs()
    eq_rows = np.flatnonzero(senses == Sense.EQ.value)
    ub_rows = np.flatnonzero(senses != Sense.EQ.value)
    ub_sign = np.where(senses[ub_rows] == Sense.GE.value, -1.0, 1.0)
    a_ub = b_ub = a_eq = b_eq = None
    if ub_rows.size:
        a_ub = sparse.diags(ub_sign) @ matrix[ub_rows]
        b_ub = ub_sign * rhs[ub_rows]
    if eq_rows.size:
        a_eq = matrix[eq_rows]
        b_eq = rhs[eq_rows]
    return _StandardForm(lp.cost_vector(), a_ub, b_ub, a_eq, b_eq, ub_rows, ub_sign, eq_rows)


_LINPROG_STATUS = {
    0: SolveStatus.OPTIMAL,
    1: SolveStatus.ITER_LIMIT,
    2: SolveStatus.INFEASIBLE,
    3: SolveStatus.UNBOUNDED,
    4: SolveStatus.ITER_LIMIT,
}


def _bounds_pairs(lower: np.ndarray, upper: np.ndarray) -> List[Tuple[Optional[float], Optional[float]]]:
    return [
        (None if math.isinf(lo) else lo, None if math.isinf(up) else up)
        for lo, up in zip(lower.tolist(), upper.tolist())
    ]


def _solve_relaxation(
    lp: LinearProgram,
    form: _StandardForm,
    lower: np.ndarray,
    upper: np.ndarray,
    method: str = "highs-ds",
    time_limit_s: Optional[float] = None,
    iter_limit: Optional[int] = None,
) -> Solution:
    options: Dict[str, object] = {
        "presolve": True,
        "primal_feasibility_tolerance": FEASIBILITY_TOL,
        "dual_feasibility_tolerance": FEASIBILITY_TOL,
    }
    if method == "highs-ipm":
        options.pop("primal_feasibility_tolerance")
        options.pop("dual_feasibility_tolerance")
    if time_limit_s is not None:
        options["time_limit"] = max(float(time_limit_s), 1e-3)
    if iter_limit is not None:
        options["maxiter"] = int(iter_limit)

    result = linprog(
        form.cost,
        A_ub=form.a_ub,
        b_ub=form.b_ub,
        A_eq=form.a_eq,
        b_eq=form.b_eq,
        bounds=_bounds_pairs(lower, upper),
        method=method,
        options=options,
    )
    status = _LINPROG_STATUS.get(result.status, SolveStatus.ITER_LIMIT)
    if result.status == 4:
        LOGGER.warning("HiGHS reported numerical difficulties on %s: %s", lp.name, result.message)
    solution = Solution(
        status=status,
        message=str(result.message),
        iterations=int(getattr(result, "nit", 0) or 0),
        var_index=lp._var_index,
        row_index=lp._row_index,
    )
    if status is not SolveStatus.OPTIMAL or result.x is None:
        return solution

    # d(objective)/d(rhs) of each row as declared
    duals = np.zeros(lp.num_constraints)
    dual_objective = lp.objective_constant
    if form.ub_rows.size:
        marginals = np.asarray(result.ineqlin.marginals, dtype=float)
        duals[form.ub_rows] = form.ub_sign * marginals
        dual_objective += float(form.b_ub @ marginals)
    if form.eq_rows.size:
        marginals = np.asarray(result.eqlin.marginals, dtype=float)
        duals[form.eq_rows] = marginals
        dual_objective += float(form.b_eq @ marginals)
    lower_marg = np.asarray(result.lower.marginals, dtype=float)
    upper_marg = np.asarray(result.upper.marginals, dtype=float)
    finite_lo = np.isfinite(lower)
    finite_up = np.isfinite(upper)
    dual_objective += float(lower[finite_lo] @ lower_marg[finite_lo])
    dual_objective += float(upper[finite_up] @ upper_marg[finite_up])

    solution.primal = np.clip(np.asarray(result.x, dtype=float), lower, upper)
    solution.objective = float(result.fun) + lp.objective_constant
    solution.duals = duals
    solution.reduced_costs = lower_marg + upper_marg
    solution.dual_objective = dual_objective
    solution.bound = solution.objective
    solution.mip_gap = 0.0
    return solution


def solve_lp(
    lp: LinearProgram,
    method: str = "highs-ds",
    time_limit_s: Optional[float] = None,
    iter_limit: Optional[int] = None,
) -> Solution:
    """Solve a continuous model; infeasible or unbounded outcomes come back as statuses."""

    if lp.binary_indices().size:
        raise SolverError(f"{lp.name} has binary columns; relax them or call solve_milp.")
    lower, upper = lp.bounds()
    solution = _solve_relaxation(lp, _standard_form(lp), lower, upper, method, time_limit_s, iter_limit)
    if solution.is_optimal and solution.duality_residual > OPTIMALITY_TOL:
        LOGGER.warning(
            "Duality residual %.3e on %s (primal %.9g, dual %.9g)",
            solution.duality_residual,
            lp.name,
            solution.objective,
            solution.dual_objective,
        )
    return solution


def _relative_gap(incumbent: float, bound: float) -> float:
    if math.isinf(incumbent):
        return math.inf
    return max(incumbent - bound, 0.0) / max(abs(incumbent), 1.0)


def _most_fractional(x: np.ndarray, binaries: np.ndarray) -> Optional[int]:
    if not binaries.size:
        return None
    values = x[binaries]
    distance = np.minimum(values - np.floor(values), np.ceil(values) - values)
    position = int(np.argmax(distance))
    if distance[position] <= INTEGRALITY_TOL:
        return None
    return int(binaries[position])


def solve_milp(
    lp: LinearProgram,
    gap_tol: float = DEFAULT_GAP,
    node_limit: int = 100_000,
    time_limit_s: Optional[float] = None,
    method: str = "highs-ds",
) -> Solution:
    """Best-bound branch and bound over the binary columns of ``lp``.

    Branches on the most fractional binary (lowest index on ties). The
    incumbent is polished by a final LP with every binary fixed, so its
    duals are those of the continuous remainder.
    """

    started = time.monotonic()
    binaries = lp.binary_indices()
    form = _standard_form(lp)
    root_lower, root_upper = lp.bounds()

    def remaining() -> Optional[float]:
        if time_limit_s is None:
            return None
        return time_limit_s - (time.monotonic() - started)

    root = _solve_relaxation(lp, form, root_lower, root_upper, method, remaining())
    if root.status is not SolveStatus.OPTIMAL:
        LOGGER.info("Root relaxation of %s ended %s", lp.name, root.status.value)
        return root

    counter = itertools.count()
    heap: List[Tuple[float, int, np.ndarray, np.ndarray, Solution]] = [
        (root.objective, next(counter), root_lower, root_upper, root)
    ]
    incumbent: Optional[np.ndarray] = None
    incumbent_obj = math.inf
    nodes = 0
    stopped = False
    # lowest bound among subtrees abandoned before their relaxation finished
    lost_bound = math.inf

    def consider(relaxation: Solution) -> bool:
        nonlocal incumbent, incumbent_obj
        if _most_fractional(relaxation.primal, binaries) is not None:
            return False
        if relaxation.objective < incumbent_obj:
            incumbent = relaxation.primal.copy()
            incumbent_obj = relaxation.objective
            LOGGER.debug("New incumbent %.9g at node %d", incumbent_obj, nodes)
        return True

    while heap:
        bound, _, lower, upper, relaxation = heap[0]
        if _relative_gap(incumbent_obj, min(bound, lost_bound)) <= gap_tol:
            break
        left = remaining()
        if nodes >= node_limit or (left is not None and left <= 0):
            stopped = True
            break
        heapq.heappop(heap)
        nodes += 1
        if consider(relaxation):
            continue
        branch = _most_fractional(relaxation.primal, binaries)
        for value in (0.0, 1.0):
            child_lower = lower.copy()
            child_upper = upper.copy()
            child_lower[branch] = child_upper[branch] = value
            child = _solve_relaxation(lp, form, child_lower, child_upper, method, remaining())
            if child.status is SolveStatus.ITER_LIMIT:
                stopped = True
                lost_bound = min(lost_bound, bound)
                LOGGER.info("Node relaxation of %s hit its limit; keeping parent bound %.9g", lp.name, bound)
                continue
            if child.status is not SolveStatus.OPTIMAL:
                continue
            if _relative_gap(incumbent_obj, child.objective) <= gap_tol:
                continue
            if consider(child):
                continue
            heapq.heappush(heap, (child.objective, next(counter), child_lower, child_upper, child))

    best_bound = min(heap[0][0], incumbent_obj) if heap else incumbent_obj
    best_bound = min(best_bound, lost_bound)
    abandoned = not math.isinf(lost_bound)
    if incumbent is None:
        status = SolveStatus.ITER_LIMIT if stopped else SolveStatus.INFEASIBLE
        LOGGER.info("Branch and bound on %s found no incumbent after %d nodes", lp.name, nodes)
        return Solution(
            status=status,
            bound=best_bound if stopped else math.inf,
            nodes=nodes,
            message="no integer-feasible point found",
            var_index=lp._var_index,
            row_index=lp._row_index,
        )

    fixed_lower, fixed_upper = root_lower.copy(), root_upper.copy()
    rounded = np.round(incumbent[binaries])
    fixed_lower[binaries] = rounded
    fixed_upper[binaries] = rounded
    polished = _solve_relaxation(lp, form, fixed_lower, fixed_upper, method)
    if polished.status is not SolveStatus.OPTIMAL:
        LOGGER.warning("Polishing LP for %s ended %s; keeping raw incumbent", lp.name, polished.status.value)
        polished = Solution(
            status=SolveStatus.OPTIMAL,
            objective=incumbent_obj,
            primal=incumbent,
            var_index=lp._var_index,
            row_index=lp._row_index,
        )
    polished.bound = min(best_bound, polished.objective)
    polished.mip_gap = _relative_gap(polished.objective, polished.bound)
    polished.nodes = nodes
    if abandoned or (stopped and polished.mip_gap > gap_tol):
        polished.status = SolveStatus.ITER_LIMIT
    else:
        polished.status = SolveStatus.OPTIMAL
    LOGGER.debug(
        "Branch and bound on %s: obj %.9g bound %.9g gap %.2e nodes %d",
        lp.name,
        polished.objective,
        polished.bound,
        polished.mip_gap,
        nodes,
    )
    return polished


def _solve_external(lp: LinearProgram, config: SolverConfig) -> Solution:
    from mps_format import read_solution, write_mps

    work_dir = Path(config.work_dir)
    work_dir.mkdir(parents=True, exist_ok=True)
    mps_path = work_dir / f"{lp.name}.mps"
    mps_path.write_text(write_mps(lp), encoding="utf-8")
    LOGGER.info("Wrote %s (%d rows, %d columns)", mps_path, lp.num_constraints, lp.num_variables)

    if config.solution_file:
        solution_path = Path(config.solution_file)
    elif config.command:
        solution_path = work_dir / f"{lp.name}.sol"
        command = config.command.format(mps=mps_path, solution=solution_path)
        LOGGER.info("Running external solver: %s", command)
        subprocess.run(command, shell=True, check=True)
    else:
        raise ExternalSolveRequired(
            f"Model written to {mps_path}; solve it externally and set solver.solution_file.",
            mps_path,
        )
    return read_solution(solution_path.read_text(encoding="utf-8"), lp)


def solve(lp: LinearProgram, config: SolverConfig) -> Solution:
    """Dispatch a model to the configured backend."""

    if config.backend == "external":
        return _solve_external(lp, config)
    if lp.num_nonzeros > config.max_nonzeros:
        raise ModelSizeExceeded(
            f"{lp.name} has {lp.num_nonzeros} nonzeros, above solver.max_nonzeros={config.max_nonzeros}; "
            "use solver.backend=external or raise the cap."
        )
    if lp.binary_indices().size:
        return solve_milp(
            lp,
            gap_tol=config.gap,
            node_limit=config.node_limit,
            time_limit_s=config.time_limit_s,
            method=config.method,
        )
    return solve_lp(lp, method=config.method, time_limit_s=config.time_limit_s)

