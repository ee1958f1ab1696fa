"""Exact mixed-integer rows for a series device on one branch in one operating state."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from enum import Enum
from typing import List, Optional

from milp_core import FEASIBILITY_TOL, LinearProgram, Sense, VarType
from network_model import VsrCandidate


LOGGER = logging.getLogger(__name__)

RECOVERY_TOL = 1e-6
ANGLE_TOL = 1e-6


class RecoveryOutOfRange(Exception):
    """Raised when a recovered susceptance falls outside the device range."""


@dataclass(frozen=True)
class VsrStateVars:
    """Column indices of the device variables for one (candidate, state)."""

    flow: int
    psi: int
    v: int
    y: int
    delta: int
    theta: int


def add_vsr_columns(
    lp: LinearProgram,
    candidate: VsrCandidate,
    tag: str,
    flow: int,
    theta: int,
    delta: int,
    theta_max: float,
    relax_y: bool = False,
) -> VsrStateVars:
    """Declare psi, v and y for one candidate in one state."""

    branch = candidate.branch
    psi = lp.add_variable(f"psi_{branch}_{tag}", -math.inf, math.inf)
    v = lp.add_variable(f"v_{branch}_{tag}", -theta_max, theta_max)
    y = lp.add_variable(
        f"y_{branch}_{tag}",
        0.0,
        1.0,
        VarType.CONTINUOUS if relax_y else VarType.BINARY,
    )
    return VsrStateVars(flow=flow, psi=psi, v=v, y=y, delta=delta, theta=theta)


def emit_vsr_constraints(
    lp: LinearProgram,
    candidate: VsrCandidate,
    in_service: int,
    susceptance: float,
    theta_max: float,
    vars: VsrStateVars,
    tag: str,
) -> List[int]:
    """Flow equation, both big-M pairs, the v box and the v-theta link.

    y = 0 selects the non-negative direction (bv_min*v <= psi <= bv_max*v),
    y = 1 the non-positive one.
    """

    m_value = candidate.big_m
    bv_min, bv_max = candidate.bv_min, candidate.bv_max
    name = f"{candidate.branch}_{tag}"
    psi, v, y, delta, theta = vars.psi, vars.v, vars.y, vars.delta, vars.theta
    flow_terms = [(vars.flow, 1.0)]
    if in_service:
        flow_terms += [(theta, -susceptance), (psi, -1.0)]
    return [
        lp.add_constraint(f"vflow_{name}", flow_terms, Sense.EQ, 0.0),
        lp.add_constraint(f"bigm1lo_{name}", [(psi, 1.0), (v, -bv_min), (y, m_value)], Sense.GE, 0.0),
        lp.add_constraint(f"bigm1up_{name}", [(psi, 1.0), (v, -bv_max), (y, -m_value)], Sense.LE, 0.0),
        lp.add_constraint(f"bigm2lo_{name}", [(psi, 1.0), (v, -bv_max), (y, -m_value)], Sense.GE, -m_value),
        lp.add_constraint(f"bigm2up_{name}", [(psi, 1.0), (v, -bv_min), (y, m_value)], Sense.LE, m_value),
        lp.add_constraint(f"vboxup_{name}", [(v, 1.0), (delta, -theta_max)], Sense.LE, 0.0),
        lp.add_constraint(f"vboxlo_{name}", [(v, 1.0), (delta, theta_max)], Sense.GE, 0.0),
        lp.add_constraint(f"vlinklo_{name}", [(v, 1.0), (theta, -1.0), (delta, -theta_max)], Sense.GE, -theta_max),
        lp.add_constraint(f"vlinkup_{name}", [(v, 1.0), (theta, -1.0), (delta, theta_max)], Sense.LE, theta_max),
    ]


def emit_strengthening_rows(
    lp: LinearProgram,
    candidate: VsrCandidate,
    theta_max: float,
    vars: VsrStateVars,
    tag: str,
) -> List[int]:
    """|psi| <= delta * max|bv| * theta_max; valid for every integer point."""

    reach = max(abs(candidate.bv_min), abs(candidate.bv_max)) * theta_max
    name = f"{candidate.branch}_{tag}"
    return [
        lp.add_constraint(f"psicapup_{name}", [(vars.psi, 1.0), (vars.delta, -reach)], Sense.LE, 0.0),
        lp.add_constraint(f"psicaplo_{name}", [(vars.psi, 1.0), (vars.delta, reach)], Sense.GE, 0.0),
    ]


class DeviceStatus(str, Enum):
    INSTALLED = "installed"
    NOT_INSTALLED = "not_installed"
    INDETERMINATE = "indeterminate"


@dataclass(frozen=True)
class DeviceSetting:
    status: DeviceStatus
    b_v: Optional[float] = None


def recover_device_setting(psi: float, theta: float, delta: float, candidate: VsrCandidate) -> DeviceSetting:
    """Invert psi = delta * b_v * theta for a solved state."""

    if round(delta) == 0:
        return DeviceSetting(DeviceStatus.NOT_INSTALLED)
    if abs(theta) <= ANGLE_TOL:
        return DeviceSetting(DeviceStatus.INDETERMINATE)
    b_v = psi / theta
    # row feasibility error on psi and v is amplified by 1/|theta|
    reach = max(abs(candidate.bv_min), abs(candidate.bv_max))
    tol = RECOVERY_TOL + FEASIBILITY_TOL * (1.0 + reach) / abs(theta)
    if not candidate.bv_min - tol <= b_v <= candidate.bv_max + tol:
        raise RecoveryOutOfRange(
            f"Branch {candidate.branch}: b_v = {b_v:.9g} outside [{candidate.bv_min:.9g}, {candidate.bv_max:.9g}]"
        )
    return DeviceSetting(DeviceStatus.INSTALLED, min(max(b_v, candidate.bv_min), candidate.bv_max))
