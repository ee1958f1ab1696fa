"""Read MATPOWER case files and turn them into per-unit DC networks."""

from __future__ import annotations

import logging
import re
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import networkx as nx
import numpy as np

from config import NetworkConfig
from network_model import Branch, Bus, Generator, Load, Network


LOGGER = logging.getLogger(__name__)

# 0-based MATPOWER column positions
BUS_I, BUS_TYPE, PD = 0, 1, 2
REF_TYPE, ISOLATED_TYPE = 3, 4
GEN_BUS, GEN_STATUS, PMAX, PMIN, RAMP_30 = 0, 7, 8, 9, 18
F_BUS, T_BUS, BR_X, RATE_A, BR_STATUS = 0, 1, 3, 5, 10
MODEL, NCOST, COST = 0, 3, 4
PW_LINEAR, POLYNOMIAL = 1, 2

MATRIX_SECTIONS = ("bus", "gen", "branch", "gencost")
REQUIRED_SECTIONS = ("bus", "gen", "branch")
MIN_COLUMNS = {"bus": 3, "gen": 10, "branch": 11, "gencost": 4}

_ASSIGNMENT = re.compile(r"^\s*mpc\.(\w+)\s*=\s*(.*)$")
_FUNCTION = re.compile(r"^\s*function\s+\w+\s*=\s*(\w+)")

Matrix = Tuple[Tuple[float, ...], ...]


class CaseFormatError(Exception):
    """Raised when case text does not follow the MATPOWER layout."""

    def __init__(self, message: str, line: Optional[int] = None) -> None:
        super().__init__(f"line {line}: {message}" if line is not None else message)
        self.line = line


class MalformedMatrix(CaseFormatError):
    """Raised for ragged or unterminated matrices."""


class MissingSection(CaseFormatError):
    """Raised when baseMVA, bus, gen or branch is absent."""


class NumericParse(CaseFormatError):
    """Raised when a matrix token is not a number."""


class NetworkError(Exception):
    """Raised when a parsed case cannot form a valid DC network."""


class IslandedNetwork(NetworkError):
    """Raised when in-service branches leave more than one connected component."""


class ZeroReactance(NetworkError):
    """Raised for an in-service branch with x <= 0."""


class NoReference(NetworkError):
    """Raised when no reference bus or generator bus exists."""


class DanglingBranch(NetworkError):
    """Raised for an in-service branch ending at an isolated or undeclared bus."""


@dataclass(frozen=True)
class RawCase:
    base_mva: float
    bus_rows: Matrix
    gen_rows: Matrix
    branch_rows: Matrix
    gencost_rows: Matrix = ()
    case_name: str = "case"


def _strip_comment(line: str) -> str:
    in_quote = False
    for pos, char in enumerate(line):
        if char == "'":
            in_quote = not in_quote
        elif char == "%" and not in_quote:
            return line[:pos]
    return line


def _parse_number(token: str, line_no: int) -> float:
    try:
        return float(token)
    except ValueError as exc:
        raise NumericParse(f"{token!r} is not a number", line_no) from exc


def parse_case(text: str) -> RawCase:
    """Capture baseMVA and the bus/gen/branch/gencost matrices of a MATPOWER file."""

    case_name = "case"
    base_mva: Optional[float] = None
    matrices: Dict[str, List[Tuple[float, ...]]] = {}
    row_lines: Dict[str, List[int]] = {}
    current: Optional[str] = None
    skipping = False
    opened_at = 0

    for line_no, raw in enumerate(text.splitlines(), start=1):
        line = _strip_comment(raw).strip()
        if not line:
            continue
        if current is None and not skipping:
            function = _FUNCTION.match(line)
            if function:
                case_name = function.group(1)
                continue
            assignment = _ASSIGNMENT.match(line)
            if not assignment:
                continue
            name, rest = assignment.group(1), assignment.group(2).strip()
            if name == "baseMVA":
                base_mva = _parse_number(rest.rstrip(";").strip(), line_no)
                continue
            if name not in MATRIX_SECTIONS:
                # cell arrays (bus_name etc.) and unknown matrices are skipped
                skipping = ("[" in rest or "{" in rest) and not ("]" in rest or "}" in rest)
                continue
            if not rest.startswith("["):
                raise MalformedMatrix(f"mpc.{name} is not a bracketed matrix", line_no)
            current, opened_at = name, line_no
            matrices[name], row_lines[name] = [], []
            line = rest[1:]
        elif skipping:
            skipping = not ("]" in line or "}" in line)
            continue

        closing = "]" in line
        body = line.split("]", 1)[0] if closing else line
        for chunk in body.split(";"):
            tokens = chunk.replace(",", " ").split()
            if tokens:
                matrices[current].append(tuple(_parse_number(tok, line_no) for tok in tokens))
                row_lines[current].append(line_no)
        if closing:
            current = None

    if current is not None:
        raise MalformedMatrix(f"mpc.{current} opened here is never closed", opened_at)
    if base_mva is None:
        raise MissingSection("mpc.baseMVA not found")
    for name in REQUIRED_SECTIONS:
        if not matrices.get(name):
            raise MissingSection(f"mpc.{name} not found or empty")

    for name, rows in matrices.items():
        width = len(rows[0]) if rows else 0
        for row, line_no in zip(rows, row_lines[name]):
            if len(row) != width:
                raise MalformedMatrix(f"mpc.{name} row has {len(row)} columns, expected {width}", line_no)
        if rows and width < MIN_COLUMNS[name]:
            raise MalformedMatrix(f"mpc.{name} needs at least {MIN_COLUMNS[name]} columns", row_lines[name][0])

    bus_numbers: Dict[int, int] = {}
    for row, line_no in zip(matrices["bus"], row_lines["bus"]):
        number = int(row[BUS_I])
        if number in bus_numbers:
            raise CaseFormatError(f"bus {number} declared twice", line_no)
        bus_numbers[number] = line_no
    for row, line_no in zip(matrices["branch"], row_lines["branch"]):
        for end in (int(row[F_BUS]), int(row[T_BUS])):
            if end not in bus_numbers:
                raise CaseFormatError(f"branch references unknown bus {end}", line_no)
    for row, line_no in zip(matrices["gen"], row_lines["gen"]):
        if int(row[GEN_BUS]) not in bus_numbers:
            raise CaseFormatError(f"generator references unknown bus {int(row[GEN_BUS])}", line_no)

    raw_case = RawCase(
        base_mva=base_mva,
        bus_rows=tuple(matrices["bus"]),
        gen_rows=tuple(matrices["gen"]),
        branch_rows=tuple(matrices["branch"]),
        gencost_rows=tuple(matrices.get("gencost", ())),
        case_name=case_name,
    )
    LOGGER.info(
        "Parsed %s: %d buses, %d generators, %d branches",
        case_name,
        len(raw_case.bus_rows),
        len(raw_case.gen_rows),
        len(raw_case.branch_rows),
    )
    return raw_case


def _format_number(value: float) -> str:
    if value.is_integer() and abs(value) < 1e15:
        return str(int(value))
    return repr(value)


def serialize_case(raw: RawCase) -> str:
    """Write a RawCase back out as MATPOWER text."""

    lines = [f"function mpc = {raw.case_name}", "mpc.version = '2';", f"mpc.baseMVA = {_format_number(raw.base_mva)};"]
    for name in MATRIX_SECTIONS:
        rows = getattr(raw, f"{name}_rows")
        if not rows:
            continue
        lines.append("")
        lines.append(f"mpc.{name} = [")
        for row in rows:
            lines.append("\t" + "\t".join(_format_number(value) for value in row) + ";")
        lines.append("];")
    return "\n".join(lines) + "\n"


def _linear_cost(row: Sequence[float], p_min_mw: float, p_max_mw: float, gen_id: int) -> float:
    model = int(row[MODEL])
    count = int(row[NCOST])
    coeffs = np.asarray(row[COST:], dtype=float)
    if model == POLYNOMIAL:
        poly = coeffs[:count]
        if count >= 3 and np.any(poly[:-2] != 0.0):
            midpoint = 0.5 * (p_min_mw + p_max_mw)
            slope = float(np.polyval(np.polyder(poly), midpoint))
            LOGGER.warning("Generator %d: nonlinear cost linearized at %.1f MW (%.4f $/MWh)", gen_id, midpoint, slope)
            return slope
        return float(poly[-2]) if count >= 2 else 0.0
    if model == PW_LINEAR:
        points = coeffs[: 2 * count].reshape(-1, 2)
        if len(points) < 2 or points[-1, 0] == points[0, 0]:
            return 0.0
        slope = float((points[-1, 1] - points[0, 1]) / (points[-1, 0] - points[0, 0]))
        LOGGER.warning("Generator %d: piecewise cost replaced by secant slope %.4f $/MWh", gen_id, slope)
        return slope
    raise CaseFormatError(f"gencost model {model} for generator {gen_id} is not 1 or 2")


def build_network(raw: RawCase, overrides: Optional[NetworkConfig] = None) -> Network:
    """Per-unit DC network from raw matrices; out-of-service rows are dropped."""

    overrides = overrides or NetworkConfig()
    base = raw.base_mva
    isolated = {int(row[BUS_I]) for row in raw.bus_rows if int(row[BUS_TYPE]) == ISOLATED_TYPE}
    bus_ids = sorted(int(row[BUS_I]) for row in raw.bus_rows if int(row[BUS_I]) not in isolated)
    known = set(bus_ids)
    if isolated:
        LOGGER.warning("Dropping %d isolated buses", len(isolated))

    branches: List[Branch] = []
    unrated = 0
    for position, row in enumerate(raw.branch_rows, start=1):
        if row[BR_STATUS] == 0:
            continue
        if row[BR_X] <= 0:
            raise ZeroReactance(f"Branch {position} ({int(row[F_BUS])}-{int(row[T_BUS])}) has x = {row[BR_X]}")
        for end in (int(row[F_BUS]), int(row[T_BUS])):
            if end in isolated:
                raise DanglingBranch(f"Branch {position} is in service but bus {end} is isolated (type 4)")
            if end not in known:
                raise DanglingBranch(f"Branch {position} references bus {end}, which is not in mpc.bus")
        if position in overrides.rating_overrides:
            s_max = overrides.rating_overrides[position] / base
        else:
            rating_mva = row[RATE_A]
            if rating_mva <= 0:
                unrated += 1
                rating_mva = overrides.default_rating_mva
            s_max = rating_mva / base * overrides.rating_scale
        branches.append(
            Branch(
                id=position,
                from_bus=int(row[F_BUS]),
                to_bus=int(row[T_BUS]),
                x=float(row[BR_X]),
                s_max=s_max,
                emergency_factor=overrides.emergency_factor,
            )
        )
    if unrated:
        LOGGER.warning("%d branches have rateA = 0; using %.0f MVA", unrated, overrides.default_rating_mva)

    cost_rows = raw.gencost_rows[: len(raw.gen_rows)]
    generators: List[Generator] = []
    for position, row in enumerate(raw.gen_rows, start=1):
        if row[GEN_STATUS] <= 0 or int(row[GEN_BUS]) in isolated:
            continue
        p_min_mw, p_max_mw = float(row[PMIN]), float(row[PMAX])
        if position <= len(cost_rows):
            cost = _linear_cost(cost_rows[position - 1], p_min_mw, p_max_mw, position)
        else:
            cost = 0.0
        if cost == 0.0:
            LOGGER.warning("Generator %d has zero cost", position)
        cost = max(cost, 0.0)
        ramp_mw = row[RAMP_30] if len(row) > RAMP_30 and row[RAMP_30] > 0 else overrides.ramp_fraction * p_max_mw
        reschedulable = overrides.reschedulable is None or position in overrides.reschedulable
        generators.append(
            Generator(
                id=position,
                bus=int(row[GEN_BUS]),
                p_min=p_min_mw / base,
                p_max=p_max_mw / base,
                cost=cost,
                adjust_up_cost=overrides.adjust_up_factor * cost,
                adjust_down_cost=overrides.adjust_down_factor * cost,
                ramp_up=ramp_mw / base,
                ramp_down=ramp_mw / base,
                reschedulable=reschedulable,
            )
        )

    loads: List[Load] = []
    for row in raw.bus_rows:
        bus_id = int(row[BUS_I])
        demand = float(row[PD]) * overrides.load_scale
        if bus_id in isolated or demand == 0.0:
            continue
        if demand < 0:
            # negative demand is a fixed injection
            LOGGER.warning("Bus %d has negative demand %.2f MW; modelled as fixed injection", bus_id, demand)
            generators.append(
                Generator(
                    id=-bus_id,
                    bus=bus_id,
                    p_min=-demand / base,
                    p_max=-demand / base,
                    cost=0.0,
                    adjust_up_cost=0.0,
                    adjust_down_cost=0.0,
                    ramp_up=0.0,
                    ramp_down=0.0,
                    reschedulable=False,
                )
            )
            continue
        loads.append(Load(id=bus_id, bus=bus_id, p_d=demand / base))

    reference = _reference_bus(raw, isolated, generators)
    buses = tuple(Bus(id=bus_id, is_reference=bus_id == reference) for bus_id in bus_ids)
    _check_connected(bus_ids, branches)

    network = Network(
        buses=buses,
        branches=tuple(branches),
        generators=tuple(generators),
        loads=tuple(loads),
        base_mva=base,
        theta_max=overrides.theta_max,
        name=raw.case_name,
    )
    LOGGER.info(
        "Built network %s: %d buses, %d in-service branches, %d generators, %d loads (%.1f MW), reference bus %d",
        network.name,
        len(network.buses),
        len(network.branches),
        len(network.generators),
        len(network.loads),
        network.total_load() * base,
        reference,
    )
    return network


def _reference_bus(raw: RawCase, isolated: set, generators: Sequence[Generator]) -> int:
    marked = [int(row[BUS_I]) for row in raw.bus_rows if int(row[BUS_TYPE]) == REF_TYPE]
    if marked:
        if len(marked) > 1:
            LOGGER.warning("Several reference buses %s; using %d", marked, marked[0])
        return marked[0]
    generator_buses = sorted({unit.bus for unit in generators if unit.bus not in isolated})
    if not generator_buses:
        raise NoReference("No bus of type 3 and no in-service generator bus")
    LOGGER.warning("No bus of type 3; using generator bus %d as reference", generator_buses[0])
    return generator_buses[0]


def _check_connected(bus_ids: Sequence[int], branches: Sequence[Branch]) -> None:
    graph = nx.MultiGraph()
    graph.add_nodes_from(bus_ids)
    graph.add_edges_from((branch.from_bus, branch.to_bus) for branch in branches)
    if not nx.is_connected(graph):
        parts = sorted((sorted(part) for part in nx.connected_components(graph)), key=len)
        raise IslandedNetwork(f"In-service branches form {len(parts)} islands; smallest: {parts[0][:10]}")


def load_case(path, overrides: Optional[NetworkConfig] = None) -> Network:
    with open(path, "r", encoding="utf-8") as handle:
        return build_network(parse_case(handle.read()), overrides)
