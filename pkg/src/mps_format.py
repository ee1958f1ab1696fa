"""Free-format MPS export/import and the plain-text external solution format."""

from __future__ import annotations

import logging
import math
from collections import defaultdict
from typing import Dict, List, Optional, Tuple

import numpy as np

from milp_core import LinearProgram, Sense, Solution, SolveStatus, VarType


LOGGER = logging.getLogger(__name__)

OBJECTIVE_ROW = "OBJ"

_ROW_CODES = {Sense.LE: "L", Sense.EQ: "E", Sense.GE: "G"}
_CODE_SENSES = {code: sense for sense, code in _ROW_CODES.items()}


class MpsFormatError(Exception):
    """Raised when MPS text cannot be parsed."""


class SolutionFormatError(Exception):
    """Raised when an external solution file cannot be parsed or does not match the model."""


def _no_negative_zero(value: float) -> float:
    """Make sure -0 is never output."""
    if value == 0:
        return 0.0
    return value


def _fmt(value: float) -> str:
    return format(_no_negative_zero(float(value)), ".17g")


def write_mps(lp: LinearProgram) -> str:
    """Render ``lp`` as free MPS; every column appears at least once in COLUMNS."""

    if OBJECTIVE_ROW in lp._row_index:
        raise MpsFormatError(f"Row name {OBJECTIVE_ROW!r} is reserved for the objective.")
    lines: List[str] = [f"NAME {lp.name.replace(' ', '_')}", "ROWS", f" N {OBJECTIVE_ROW}"]
    for con in lp.constraints:
        lines.append(f" {_ROW_CODES[con.sense]} {con.name}")

    lines.append("COLUMNS")
    columns = lp.matrix().tocsc()
    columns.sort_indices()
    cost = lp.cost_vector()
    in_marker = False
    marker_count = 0
    for index, var in enumerate(lp.variables):
        is_binary = var.vtype is VarType.BINARY
        if is_binary and not in_marker:
            lines.append(f" MARKER{marker_count} 'MARKER' 'INTORG'")
            in_marker = True
        elif not is_binary and in_marker:
            lines.append(f" MARKER{marker_count} 'MARKER' 'INTEND'")
            marker_count += 1
            in_marker = False
        start, end = columns.indptr[index], columns.indptr[index + 1]
        entries = list(zip(columns.indices[start:end].tolist(), columns.data[start:end].tolist()))
        if cost[index] != 0.0 or not entries:
            lines.append(f" {var.name} {OBJECTIVE_ROW} {_fmt(cost[index])}")
        for row, coef in entries:
            lines.append(f" {var.name} {lp.constraints[row].name} {_fmt(coef)}")
    if in_marker:
        lines.append(f" MARKER{marker_count} 'MARKER' 'INTEND'")

    lines.append("RHS")
    if lp.objective_constant != 0.0:
        # objective = c.x - RHS(OBJ)
        lines.append(f" RHS {OBJECTIVE_ROW} {_fmt(-lp.objective_constant)}")
    for con in lp.constraints:
        if con.rhs != 0.0:
            lines.append(f" RHS {con.name} {_fmt(con.rhs)}")

    lines.append("BOUNDS")
    for var in lp.variables:
        lines.extend(_bound_lines(var.name, var.lower, var.upper, var.vtype is VarType.BINARY))
    lines.append("ENDATA")
    return "\n".join(lines) + "\n"


def _bound_lines(name: str, lower: float, upper: float, is_binary: bool) -> List[str]:
    if is_binary:
        if lower == 0.0 and upper == 1.0:
            return [f" BV BOUND {name}"]
        return [f" LI BOUND {name} {_fmt(lower)}", f" UI BOUND {name} {_fmt(upper)}"]
    if lower == upper:
        return [f" FX BOUND {name} {_fmt(lower)}"]
    if math.isinf(lower) and math.isinf(upper):
        return [f" FR BOUND {name}"]
    lines = [f" MI BOUND {name}"] if math.isinf(lower) else [f" LO BOUND {name} {_fmt(lower)}"]
    if not math.isinf(upper):
        lines.append(f" UP BOUND {name} {_fmt(upper)}")
    return lines


def _parse_float(token: str, line_no: int) -> float:
    try:
        return float(token)
    except ValueError as exc:
        raise MpsFormatError(f"line {line_no}: {token!r} is not a number") from exc


def read_mps(text: str) -> LinearProgram:
    """Parse free MPS written by ``write_mps`` (RANGES rows are split in two)."""

    name = "model"
    section: Optional[str] = None
    row_order: List[str] = []
    row_sense: Dict[str, Sense] = {}
    col_order: List[str] = []
    col_binary: Dict[str, bool] = {}
    col_entries: Dict[str, List[Tuple[str, float]]] = defaultdict(list)
    rhs: Dict[str, float] = {}
    ranges: Dict[str, float] = {}
    bounds: Dict[str, List[float]] = {}
    objective_row: Optional[str] = None
    in_marker = False

    for line_no, raw in enumerate(text.splitlines(), start=1):
        if not raw.strip() or raw.startswith("*"):
            continue
        tokens = raw.split()
        if not raw[0].isspace():
            section = tokens[0].upper()
            if section == "NAME":
                name = tokens[1] if len(tokens) > 1 else name
            elif section == "ENDATA":
                break
            elif section not in ("ROWS", "COLUMNS", "RHS", "RANGES", "BOUNDS"):
                raise MpsFormatError(f"line {line_no}: unknown section {tokens[0]!r}")
            continue

        if section == "ROWS":
            code, row = tokens[0].upper(), tokens[1]
            if code == "N":
                objective_row = objective_row or row
                continue
            if code not in _CODE_SENSES:
                raise MpsFormatError(f"line {line_no}: bad row type {code!r}")
            row_order.append(row)
            row_sense[row] = _CODE_SENSES[code]
        elif section == "COLUMNS":
            if len(tokens) >= 3 and tokens[1].strip("'") == "MARKER":
                in_marker = tokens[2].strip("'") == "INTORG"
                continue
            col = tokens[0]
            if col not in col_binary:
                col_order.append(col)
                col_binary[col] = in_marker
            for row, value in zip(tokens[1::2], tokens[2::2]):
                col_entries[col].append((row, _parse_float(value, line_no)))
        elif section in ("RHS", "RANGES"):
            target = rhs if section == "RHS" else ranges
            for row, value in zip(tokens[1::2], tokens[2::2]):
                target[row] = _parse_float(value, line_no)
        elif section == "BOUNDS":
            kind, col = tokens[0].upper(), tokens[2]
            if col not in col_binary:
                raise MpsFormatError(f"line {line_no}: bound on unknown column {col!r}")
            lower, upper = bounds.setdefault(col, [0.0, 1.0 if col_binary[col] else math.inf])
            value = _parse_float(tokens[3], line_no) if len(tokens) > 3 else None
            if kind == "BV":
                col_binary[col] = True
                lower, upper = 0.0, 1.0
            elif kind in ("LO", "LI"):
                lower = value
            elif kind in ("UP", "UI"):
                upper = value
            elif kind == "FX":
                lower = upper = value
            elif kind == "FR":
                lower, upper = -math.inf, math.inf
            elif kind == "MI":
                lower = -math.inf
            elif kind == "PL":
                upper = math.inf
            else:
                raise MpsFormatError(f"line {line_no}: unsupported bound type {kind!r}")
            if kind in ("LI", "UI"):
                col_binary[col] = True
            bounds[col] = [lower, upper]

    if objective_row is None:
        raise MpsFormatError("no objective (N) row declared")

    lp = LinearProgram(name)
    for col in col_order:
        lower, upper = bounds.get(col, [0.0, 1.0 if col_binary[col] else math.inf])
        vtype = VarType.BINARY if col_binary[col] else VarType.CONTINUOUS
        lp.add_variable(col, lower, upper, vtype)

    row_terms: Dict[str, List[Tuple[int, float]]] = defaultdict(list)
    for col in col_order:
        index = lp.var(col)
        for row, value in col_entries[col]:
            if row == objective_row:
                lp.add_objective(index, value)
            elif row in row_sense:
                row_terms[row].append((index, value))
            else:
                raise MpsFormatError(f"column {col!r} references unknown row {row!r}")
    lp.objective_constant = -rhs.get(objective_row, 0.0)

    for row in row_order:
        sense = row_sense[row]
        value = rhs.get(row, 0.0)
        if row not in ranges:
            lp.add_constraint(row, row_terms[row], sense, value)
            continue
        width = ranges[row]
        if sense is Sense.EQ:
            low, high = (value, value + abs(width)) if width >= 0 else (value + width, value)
        elif sense is Sense.LE:
            low, high = value - abs(width), value
        else:
            low, high = value, value + abs(width)
        lp.add_constraint(row, row_terms[row], Sense.GE, low)
        lp.add_constraint(f"{row}_range", row_terms[row], Sense.LE, high)
    return lp


def write_solution(solution: Solution, lp: LinearProgram) -> str:
    """Render a solution in the external solution format read by ``read_solution``."""

    lines = [f"#status {solution.status.value}"]
    if solution.primal is None:
        return "\n".join(lines) + "\n"
    lines.append(f"#objective {_fmt(solution.objective)}")
    if solution.duals is not None:
        for con, dual in zip(lp.constraints, solution.duals.tolist()):
            lines.append(f"#dual {con.name} {_fmt(dual)}")
    for var, value in zip(lp.variables, solution.primal.tolist()):
        lines.append(f"{var.name} {_fmt(value)}")
    return "\n".join(lines) + "\n"


def read_solution(text: str, lp: LinearProgram) -> Solution:
    """Parse ``#status``/``#objective``/``#dual`` headers and ``name value`` lines against ``lp``."""

    status: Optional[SolveStatus] = None
    objective: Optional[float] = None
    primal = np.zeros(lp.num_variables)
    seen = np.zeros(lp.num_variables, dtype=bool)
    duals = np.zeros(lp.num_constraints)
    has_duals = False
    by_value = {member.value.lower(): member for member in SolveStatus}

    for line_no, raw in enumerate(text.splitlines(), start=1):
        tokens = raw.split()
        if not tokens:
            continue
        try:
            if tokens[0] == "#status":
                status = by_value[tokens[1].lower()]
            elif tokens[0] == "#objective":
                objective = float(tokens[1])
            elif tokens[0] == "#dual":
                duals[lp.row(tokens[1])] = float(tokens[2])
                has_duals = True
            elif tokens[0].startswith("#"):
                continue
            else:
                index = lp.var(tokens[0])
                primal[index] = float(tokens[1])
                seen[index] = True
        except (KeyError, IndexError, ValueError) as exc:
            raise SolutionFormatError(f"line {line_no}: cannot read {raw.strip()!r}") from exc

    if status is None:
        raise SolutionFormatError("missing '#status' header")
    solution = Solution(status=status, var_index=lp._var_index, row_index=lp._row_index)
    if status is SolveStatus.INFEASIBLE or status is SolveStatus.UNBOUNDED or not seen.any():
        return solution
    if not seen.all():
        LOGGER.warning("Solution file leaves %d columns unset; treating them as 0", int((~seen).sum()))
    solution.primal = primal
    solution.objective = objective if objective is not None else lp.objective_value(primal)
    solution.duals = duals if has_duals else None
    solution.bound = solution.objective
    return solution
