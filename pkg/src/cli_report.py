"""Screen candidates, plan series-compensation devices and report stored runs."""

from __future__ import annotations

import argparse
import json
import logging
import math
import os
import sys
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple

import pandas as pd

from benders import BendersLog, MissingState, build_master, run_two_phase
from config import ConfigError, RunConfig, add_config_argument, load_run_config
from db import RunNotFound, create_engine_from_config, latest_run_id, load_run, run_identifier, store_run
from matpower_ingest import CaseFormatError, NetworkError, build_network, parse_case
from milp_core import LinearProgram, SolveStatus, SolverError
from mps_format import MpsFormatError, SolutionFormatError, write_mps
from network_model import Network, SingularCompensation, VsrCandidate, make_candidates
from planner_monolithic import (
    PlanInfeasible,
    PlanningOptions,
    PlanSolution,
    build_full_model,
    compare_with_without,
    cost_breakdown,
    require_solution,
    solve_plan,
    state_summary,
)
from reformulation import DeviceStatus, RecoveryOutOfRange
from scenario import (
    DurationPolicy,
    DurationUnderflow,
    IslandingContingency,
    ScenarioSet,
    ScreeningError,
    build_scenarios,
    candidate_scores,
    contingency_scores,
    make_load_levels,
    rank_contingencies,
    screening_level,
    select_candidates,
    solve_base_dispatch,
)

LOGGER = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_GAP = 2

PLANNING_ERRORS = (
    ConfigError,
    CaseFormatError,
    NetworkError,
    SingularCompensation,
    IslandingContingency,
    DurationUnderflow,
    ScreeningError,
    SolverError,
    PlanInfeasible,
    MissingState,
    RecoveryOutOfRange,
    RunNotFound,
    MpsFormatError,
    SolutionFormatError,
    OSError,
)

SCREEN_COLUMNS = ["rank", "branch_id", "from", "to", "score"]


def parse_args(argv: Optional[Sequence[str]] = None) -> argparse.Namespace:
    common = argparse.ArgumentParser(add_help=False)
    add_config_argument(common)
    common.add_argument("--case", default=None, help="MATPOWER case file (default: 'case' in the config)")
    common.add_argument("--out-dir", default=None, help="Directory for outputs (default: 'out_dir' in the config)")
    common.add_argument(
        "--log-level",
        default=os.getenv("LOG_LEVEL", "INFO"),
        help="Logging level (default: %(default)s)",
    )

    parser = argparse.ArgumentParser(description=__doc__)
    commands = parser.add_subparsers(dest="command", required=True)

    screen = commands.add_parser("screen", parents=[common], help="Rank device candidates and contingencies")
    screen.add_argument("--top", type=int, default=None, help="Rows per ranking (default: screen.* counts)")

    plan = commands.add_parser("plan", parents=[common], help="Solve the placement problem")
    plan.add_argument("--mode", choices=("monolithic", "benders"), default=None, help="Solution method (default: config)")
    plan.add_argument("--top", type=int, default=None, help="Screened candidates and contingencies (default: screen.*)")
    plan.add_argument("--export-mps", default=None, help="Write the full model (monolithic) or first master (benders) here")
    plan.add_argument("--compare", action="store_true", help="Also solve without devices and write comparison.csv")

    report = commands.add_parser("report", parents=[common], help="Render a stored run as text")
    report.add_argument("--run-id", default=None, help="Run to render (default: most recent)")
    return parser.parse_args(argv)


def resolve_config(args: argparse.Namespace) -> RunConfig:
    config = load_run_config(args.config).with_overrides(
        case=args.case, out_dir=args.out_dir, mode=getattr(args, "mode", None)
    )
    return config


def ensure_output_dir(path: Path) -> None:
    if not path.exists():
        path.mkdir(parents=True, exist_ok=True)


def load_network(config: RunConfig) -> Tuple[str, Network]:
    config.validate_paths()
    case_text = config.case.read_text(encoding="utf-8")
    return case_text, build_network(parse_case(case_text), config.network)


@dataclass
class PlanningInputs:
    network: Network
    scenarios: ScenarioSet

    @property
    def candidates(self) -> List[VsrCandidate]:
        return list(self.network.vsr_candidates)


def screening_frame(network: Network, scores: pd.Series, ranked: Sequence[int]) -> pd.DataFrame:
    rows = []
    for rank, branch_id in enumerate(ranked, start=1):
        branch = network.branch(branch_id)
        rows.append(
            {"rank": rank, "branch_id": branch_id, "from": branch.from_bus, "to": branch.to_bus, "score": scores[branch_id]}
        )
    return pd.DataFrame(rows, columns=SCREEN_COLUMNS)


def prepare_inputs(config: RunConfig, network: Network, top: Optional[int] = None) -> PlanningInputs:
    """Screen where the config gives no explicit lists, then build states and candidates."""

    levels = make_load_levels(config.scenario.load_levels)
    contingencies = config.scenario.contingencies
    candidate_ids = config.vsr.candidates
    if contingencies is None or candidate_ids is None:
        level = screening_level(levels, config.screen.level)
        dispatch = solve_base_dispatch(network, level.scale, config.solver.method)
        if contingencies is None:
            contingencies = rank_contingencies(network, dispatch, config.screen.num_contingencies if top is None else top)
        if candidate_ids is None:
            candidate_ids = select_candidates(network, dispatch, config.screen.num_candidates if top is None else top)
    policy = DurationPolicy(
        base_split=config.scenario.base_hours_split,
        contingency_hours=config.scenario.contingency_hours,
    )
    scenarios = build_scenarios(network, levels, list(contingencies), policy)
    candidates = make_candidates(
        network,
        candidate_ids,
        comp_min=config.vsr.comp_min,
        comp_max=config.vsr.comp_max,
        device_cost=config.vsr.device_cost,
        interest=config.finance.interest,
        life_years=config.finance.life_years,
        big_m_rule=config.vsr.big_m,
    )
    return PlanningInputs(network.with_candidates(candidates), scenarios)


def cmd_screen(config: RunConfig, top: Optional[int] = None) -> Tuple[Path, Path]:
    """Write candidates.csv and contingencies.csv ranked at the screening level."""

    _, network = load_network(config)
    levels = make_load_levels(config.scenario.load_levels)
    level = screening_level(levels, config.screen.level)
    dispatch = solve_base_dispatch(network, level.scale, config.solver.method)

    candidate_count = config.screen.num_candidates if top is None else top
    contingency_count = config.screen.num_contingencies if top is None else top
    candidates = screening_frame(
        network, candidate_scores(network, dispatch), select_candidates(network, dispatch, candidate_count)
    )
    contingencies = screening_frame(
        network, contingency_scores(network, dispatch), rank_contingencies(network, dispatch, contingency_count)
    )

    ensure_output_dir(config.out_dir)
    candidates_path = config.out_dir / "candidates.csv"
    contingencies_path = config.out_dir / "contingencies.csv"
    candidates.to_csv(candidates_path, index=False, float_format="%.9g")
    contingencies.to_csv(contingencies_path, index=False, float_format="%.9g")
    LOGGER.info("Wrote %s (%d rows) and %s (%d rows)", candidates_path, len(candidates), contingencies_path, len(contingencies))
    return candidates_path, contingencies_path


def devices_frame(plan: PlanSolution) -> pd.DataFrame:
    rows = []
    settings = plan.device_settings
    for candidate in plan.candidates:
        branch = plan.network.branch(candidate.branch)
        values = [
            setting.b_v
            for setting in settings[candidate.branch].values()
            if setting.status is DeviceStatus.INSTALLED
        ]
        rows.append(
            {
                "branch_id": candidate.branch,
                "from_bus": branch.from_bus,
                "to_bus": branch.to_bus,
                "installed": plan.installed[candidate.branch],
                "annual_cost": candidate.annual_cost,
                "bv_low": min(values) if values else math.nan,
                "bv_high": max(values) if values else math.nan,
            }
        )
    return pd.DataFrame(
        rows, columns=["branch_id", "from_bus", "to_bus", "installed", "annual_cost", "bv_low", "bv_high"]
    )


def plan_status(mode: str, plan: PlanSolution, log: Optional[BendersLog]) -> str:
    if mode == "benders" and log is not None:
        return "converged" if log.converged else f"stopped: {log.stop_reason}"
    return plan.status.value


def format_report(
    summary: Mapping[str, Any],
    devices: pd.DataFrame,
    costs: pd.DataFrame,
    iterations: Optional[pd.DataFrame],
    config: Mapping[str, Any],
) -> str:
    lines: List[str] = []
    lines.append(f"Series Compensation Plan - {summary['case_name']} ({summary['mode']})")
    lines.append("=" * 60)
    lines.append(f"Run: {summary.get('run_id', 'n/a')}")
    lines.append(f"Status: {summary['status']}")
    lines.append(f"Total cost: {summary['objective'] / 1e6:.4f} M$/yr")
    if summary.get("mip_gap") is not None and not pd.isna(summary.get("mip_gap")):
        lines.append(f"Gap: {summary['mip_gap']:.3e}")
    solve_seconds = summary.get("solve_seconds")
    if solve_seconds is not None and not pd.isna(solve_seconds):
        lines.append(f"Solve time: {solve_seconds:.2f} s")
    lines.append("")

    lines.append("Installed Devices")
    lines.append("-" * 60)
    installed = devices[devices["installed"] == 1] if not devices.empty else devices
    if installed.empty:
        lines.append("No devices installed.")
    else:
        for _, row in installed.sort_values("branch_id").iterrows():
            setting = ""
            if not pd.isna(row["bv_low"]):
                setting = f" (b_v {row['bv_low']:.4f} to {row['bv_high']:.4f} pu)"
            lines.append(
                f"- ({int(row['from_bus'])}-{int(row['to_bus'])}) branch {int(row['branch_id'])}: "
                f"{row['annual_cost'] / 1e6:.4f} M$/yr{setting}"
            )
    lines.append("")

    lines.append("Annual Cost Breakdown (M$/yr)")
    lines.append("-" * 60)
    if costs.empty:
        lines.append("No cost data available.")
    else:
        for _, row in costs.iterrows():
            lines.append(f"- {row['category']}: {row['usd_per_year'] / 1e6:.4f}")
        lines.append(f"- total: {costs['usd_per_year'].sum() / 1e6:.4f}")
    lines.append("")

    if iterations is not None:
        lines.append("Benders Convergence")
        lines.append("-" * 60)
        if iterations.empty:
            lines.append("No iterations recorded.")
        else:
            phase_one = summary.get("phase_one_bound")
            if phase_one is not None and not pd.isna(phase_one):
                lines.append(f"Phase-one lower bound: {phase_one / 1e6:.4f} M$/yr")
            for _, row in iterations.sort_values("iteration").iterrows():
                elapsed = row.get("elapsed_s")
                timing = "" if elapsed is None or pd.isna(elapsed) else f" at {elapsed:.2f} s"
                lines.append(
                    f"- iter {int(row['iteration'])} phase {int(row['phase'])}: "
                    f"Z_down {row['z_down'] / 1e6:.4f} Z_up {row['z_up'] / 1e6:.4f} gap {row['gap']:.3e}{timing}"
                )
        lines.append("")

    lines.append("Configuration")
    lines.append("-" * 60)
    for key, value in sorted(_flatten(config).items()):
        lines.append(f"{key} = {value}")
    return "\n".join(lines) + "\n"


def _flatten(data: Mapping[str, Any], prefix: str = "") -> Dict[str, Any]:
    flat: Dict[str, Any] = {}
    for key, value in data.items():
        name = f"{prefix}{key}"
        if isinstance(value, Mapping) and value:
            flat.update(_flatten(value, f"{name}."))
        else:
            flat[name] = value
    return flat


def cmd_plan(
    config: RunConfig,
    top: Optional[int] = None,
    export_mps: Optional[str] = None,
    compare: bool = False,
) -> int:
    """Solve, then write plan.json, costs.csv, states.csv, report.txt (and convergence.csv for benders)."""

    case_text, network = load_network(config)
    inputs = prepare_inputs(config, network, top)
    options = PlanningOptions.from_config(config.penalty, config.vsr.strengthen)
    ensure_output_dir(config.out_dir)

    model = None
    if config.mode == "monolithic":
        model = build_full_model(inputs.network, inputs.scenarios, inputs.candidates, options)
        if export_mps:
            _write_mps(model.lp, Path(export_mps))
    elif export_mps:
        master = build_master(
            inputs.network, inputs.scenarios.base_states(), inputs.candidates, (), config.benders.alpha_down, options
        )
        _write_mps(master.lp, Path(export_mps))

    log: Optional[BendersLog] = None
    started = time.monotonic()
    if config.mode == "monolithic":
        plan = require_solution(
            solve_plan(inputs.network, inputs.scenarios, inputs.candidates, config.solver, options, model)
        )
        finished = plan.status is SolveStatus.OPTIMAL
    else:
        plan, log = run_two_phase(
            inputs.network, inputs.scenarios, inputs.candidates, config.benders, config.solver, options
        )
        finished = log.converged
    solve_seconds = time.monotonic() - started

    costs = cost_breakdown(plan)
    devices = devices_frame(plan)
    iterations = log.to_frame() if log is not None else None
    config_echo = config.to_dict()
    run_id = run_identifier(case_text, config_echo, config.mode)
    summary = {
        "run_id": run_id,
        "case_name": network.name,
        "mode": config.mode,
        "status": plan_status(config.mode, plan, log),
        "objective": float(plan.objective),
        "bound": float(plan.bound),
        "mip_gap": float(plan.mip_gap),
        "phase_one_bound": float(log.phase_one_bound) if log is not None else None,
        "iterations": len(log.records) if log is not None else None,
        "solve_seconds": solve_seconds,
        "config_json": json.dumps(config_echo, sort_keys=True, default=str),
    }

    costs.to_csv(config.out_dir / "costs.csv", index=False, float_format="%.6f")
    state_summary(plan).to_csv(config.out_dir / "states.csv", index=False, float_format="%.6f")
    if iterations is not None:
        iterations.to_csv(config.out_dir / "convergence.csv", index=False, float_format="%.9g")
    if compare:
        comparison = compare_with_without(
            inputs.network, inputs.scenarios, inputs.candidates, config.solver, options, with_plan=plan
        )
        comparison.table.to_csv(config.out_dir / "comparison.csv", index=False, float_format="%.6f")
        summary["annual_saving"] = comparison.annual_saving
        summary["saving_share"] = comparison.saving_share
        state_summary(comparison.without_devices).to_csv(
            config.out_dir / "states_without_devices.csv", index=False, float_format="%.6f"
        )

    plan_json = {
        "summary": {key: value for key, value in summary.items() if key != "config_json"},
        "installed_devices": [
            {"branch_id": int(row.branch_id), "from_bus": int(row.from_bus), "to_bus": int(row.to_bus)}
            for row in devices[devices["installed"] == 1].itertuples()
        ],
        "cost_breakdown": dict(zip(costs["category"], costs["usd_per_year"])),
        "config": config_echo,
    }
    (config.out_dir / "plan.json").write_text(json.dumps(plan_json, indent=2, sort_keys=True, default=str), encoding="utf-8")
    report = format_report(summary, devices, costs, iterations, config_echo)
    (config.out_dir / "report.txt").write_text(report, encoding="utf-8")

    engine = create_engine_from_config(config.results, config.out_dir)
    db_summary = {key: summary[key] for key in summary if key not in ("run_id", "annual_saving", "saving_share")}
    store_run(engine, run_id, db_summary, devices, costs, iterations)
    LOGGER.info("Plan written to %s (run %s)", config.out_dir, run_id)
    return EXIT_OK if finished else EXIT_GAP


def _write_mps(lp: LinearProgram, path: Path) -> None:
    ensure_output_dir(path.parent)
    path.write_text(write_mps(lp), encoding="utf-8")
    LOGGER.info("Wrote %s (%d rows, %d columns, %d nonzeros)", path, lp.num_constraints, lp.num_variables, lp.num_nonzeros)


def cmd_report(config: RunConfig, run_id: Optional[str] = None) -> Path:
    engine = create_engine_from_config(config.results, config.out_dir)
    run_id = run_id or latest_run_id(engine)
    frames = load_run(engine, run_id)
    summary = frames["plan_runs"].iloc[0].to_dict()
    iterations = frames["benders_iterations"] if summary["mode"] == "benders" else None
    stored_config = json.loads(summary.get("config_json") or "{}")
    content = format_report(summary, frames["plan_devices"], frames["plan_costs"], iterations, stored_config)
    ensure_output_dir(config.out_dir)
    report_path = config.out_dir / f"report_{run_id}.txt"
    report_path.write_text(content, encoding="utf-8")
    print(content, end="")
    return report_path


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = parse_args(argv)
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.INFO), format="%(levelname)s %(message)s")

    try:
        config = resolve_config(args)
        if args.command == "screen":
            cmd_screen(config, args.top)
            return EXIT_OK
        if args.command == "plan":
            return cmd_plan(config, args.top, args.export_mps, args.compare)
        cmd_report(config, args.run_id)
        return EXIT_OK
    except PLANNING_ERRORS as exc:
        LOGGER.error("%s: %s", type(exc).__name__, exc)
        return EXIT_ERROR
    except Exception:  # noqa: BLE001
        LOGGER.exception("Unexpected failure")
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
