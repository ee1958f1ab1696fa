from __future__ import annotations

import os
import sys
from pathlib import Path

import pytest

ROOT = Path(__file__).resolve().parent.parent
sys.path.insert(0, str(ROOT / "src"))

DATA_DIR = Path(__file__).resolve().parent / "data"
CASE3_PATH = DATA_DIR / "case3.m"
CASE14_PATH = DATA_DIR / "case14_rated.m"
# stock MATPOWER case118 is not shipped; point CASE118_PATH at a local copy to run the 118-bus checks
CASE118_PATH = Path(os.getenv("CASE118_PATH", DATA_DIR / "case118.m"))

from config import NetworkConfig  # noqa: E402
from matpower_ingest import load_case  # noqa: E402
from network_model import Branch, Bus, Generator, Load, Network  # noqa: E402
from scenario import DurationPolicy, build_scenarios, make_load_levels  # noqa: E402


@pytest.fixture
def case3():
    return load_case(CASE3_PATH, NetworkConfig())


@pytest.fixture
def case14():
    return load_case(CASE14_PATH, NetworkConfig())


@pytest.fixture
def case118():
    if not CASE118_PATH.exists():
        pytest.skip(f"{CASE118_PATH} not available")
    return load_case(CASE118_PATH, NetworkConfig(rating_scale=0.7))


def two_level_scenarios(network, contingencies, contingency_hours=50.0):
    levels = make_load_levels([("peak", 1.0), ("low", 0.8)])
    policy = DurationPolicy(base_split={"peak": 0.4, "low": 0.6}, contingency_hours=contingency_hours)
    return build_scenarios(network, levels, contingencies, policy)


def single_level_scenarios(network, contingencies=(), scale=1.0):
    levels = make_load_levels([("peak", scale)])
    policy = DurationPolicy(base_split={"peak": 1.0}, contingency_hours=10.0)
    return build_scenarios(network, levels, list(contingencies), policy)


def line_network(rating=1.0, cheap_cost=10.0, dear_cost=50.0):
    """Two buses joined by one line: cheap unit at the reference, dear unit and 1 pu load at the far end."""

    return Network(
        buses=(Bus(1, is_reference=True), Bus(2)),
        branches=(Branch(1, 1, 2, x=0.1, s_max=rating),),
        generators=(
            Generator(1, 1, 0.0, 3.0, cheap_cost, 1.2 * cheap_cost, 0.8 * cheap_cost, 0.75, 0.75),
            Generator(2, 2, 0.0, 3.0, dear_cost, 1.2 * dear_cost, 0.8 * dear_cost, 0.75, 0.75),
        ),
        loads=(Load(2, 2, 1.0),),
        name="line2",
    )


def ring_network(num_buses=36, rating=1.0):
    """Ring of equal lines with two chords; generators at four evenly spaced buses, 0.2 pu load elsewhere."""

    ring = [Branch(bus, bus, bus % num_buses + 1, x=0.1, s_max=rating) for bus in range(1, num_buses + 1)]
    quarter = num_buses // 4
    sites = [1, 1 + quarter, 1 + 2 * quarter, 1 + 3 * quarter]
    chords = [
        Branch(num_buses + 1, sites[0], sites[2], x=0.2, s_max=rating),
        Branch(num_buses + 2, sites[1], sites[3], x=0.2, s_max=rating),
    ]
    costs = (10.0, 30.0, 50.0, 50.0)
    generators = tuple(
        Generator(number, bus, 0.0, 3.0, cost, 1.2 * cost, 0.8 * cost, 1.0, 1.0)
        for number, (bus, cost) in enumerate(zip(sites, costs), start=1)
    )
    loads = tuple(Load(bus, bus, 0.2) for bus in range(1, num_buses + 1) if bus not in sites)
    return Network(
        buses=tuple(Bus(bus, is_reference=bus == 1) for bus in range(1, num_buses + 1)),
        branches=tuple(ring + chords),
        generators=generators,
        loads=loads,
        name="ring36",
    )


def planning_year_scenarios(network, contingencies):
    """Three load levels with the default duration policy: 3 x (1 + len(contingencies)) states."""

    levels = make_load_levels([("peak", 1.2), ("normal", 1.0), ("low", 0.8)])
    return build_scenarios(network, levels, list(contingencies), DurationPolicy())
