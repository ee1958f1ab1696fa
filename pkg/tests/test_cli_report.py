from __future__ import annotations

import json

import pandas as pd
import pytest
import yaml

from cli_report import EXIT_ERROR, EXIT_GAP, EXIT_OK, format_report, load_network, main, parse_args, prepare_inputs
from config import load_run_config
from conftest import CASE3_PATH
from mps_format import read_mps


def write_config(tmp_path, **sections):
    data = {
        "case": str(CASE3_PATH),
        "mode": "monolithic",
        "out_dir": str(tmp_path / "out"),
        "vsr": {"candidates": [2]},
        "scenario": {
            "load_levels": [{"label": "peak", "scale": 1.0}, {"label": "low", "scale": 0.8}],
            "base_hours_split": {"peak": 0.4, "low": 0.6},
            "contingency_hours": 50,
            "contingencies": [3],
        },
        "solver": {"gap": 1e-9, "work_dir": str(tmp_path / "models")},
    }
    for name, values in sections.items():
        if isinstance(values, dict) and isinstance(data.get(name), dict):
            data[name] = {**data[name], **values}
        else:
            data[name] = values
    path = tmp_path / "config.yaml"
    path.write_text(yaml.safe_dump(data), encoding="utf-8")
    return path


def test_parse_args_defaults():
    args = parse_args(["plan", "--config", "x.yaml", "--compare"])
    assert args.command == "plan"
    assert args.mode is None
    assert args.compare
    assert parse_args(["report", "--run-id", "abc"]).run_id == "abc"


def test_screen_writes_rankings(tmp_path):
    config = write_config(tmp_path)
    assert main(["screen", "--config", str(config), "--top", "2"]) == EXIT_OK
    candidates = pd.read_csv(tmp_path / "out" / "candidates.csv")
    contingencies = pd.read_csv(tmp_path / "out" / "contingencies.csv")
    assert list(candidates.columns) == ["rank", "branch_id", "from", "to", "score"]
    assert list(candidates["branch_id"]) == [2, 3]
    assert list(contingencies["branch_id"]) == [3, 1]
    assert candidates["score"].iloc[0] == pytest.approx(6400.0, rel=1e-6)


def test_screen_is_repeatable_byte_for_byte(tmp_path):
    config = write_config(tmp_path)
    out = tmp_path / "out"
    assert main(["screen", "--config", str(config), "--top", "3"]) == EXIT_OK
    first = {name: (out / name).read_bytes() for name in ("candidates.csv", "contingencies.csv")}
    assert main(["screen", "--config", str(config), "--top", "3"]) == EXIT_OK
    assert {name: (out / name).read_bytes() for name in first} == first


def test_screen_top_zero_writes_header_only(tmp_path):
    config = write_config(tmp_path)
    assert main(["screen", "--config", str(config), "--top", "0"]) == EXIT_OK
    for name in ("candidates.csv", "contingencies.csv"):
        text = (tmp_path / "out" / name).read_text(encoding="utf-8")
        assert text.splitlines() == ["rank,branch_id,from,to,score"]
        assert pd.read_csv(tmp_path / "out" / name).empty


def test_prepared_candidates_travel_on_the_network(tmp_path):
    config = load_run_config(write_config(tmp_path))
    _, network = load_network(config)
    inputs = prepare_inputs(config, network)
    assert [candidate.branch for candidate in inputs.network.vsr_candidates] == [2]
    assert inputs.candidates == list(inputs.network.vsr_candidates)
    assert network.vsr_candidates == ()


def test_monolithic_plan_outputs(tmp_path):
    config = write_config(tmp_path)
    mps_path = tmp_path / "models" / "plan.mps"
    code = main(["plan", "--config", str(config), "--export-mps", str(mps_path), "--compare"])
    assert code == EXIT_OK
    out = tmp_path / "out"
    plan = json.loads((out / "plan.json").read_text(encoding="utf-8"))
    assert [device["branch_id"] for device in plan["installed_devices"]] == [2]
    assert plan["summary"]["status"] == "Optimal"
    assert plan["summary"]["annual_saving"] > 0
    costs = pd.read_csv(out / "costs.csv")
    assert costs["usd_per_year"].sum() == pytest.approx(plan["summary"]["objective"], rel=1e-6)
    states = pd.read_csv(out / "states.csv")
    assert len(states) == 4
    assert (out / "comparison.csv").exists()
    assert (out / "states_without_devices.csv").exists()
    assert not (out / "convergence.csv").exists()
    report = (out / "report.txt").read_text(encoding="utf-8")
    assert "Series Compensation Plan - case3 (monolithic)" in report
    assert "Solve time: " in report
    assert "(1-3) branch 2" in report
    assert "vsr.candidates = [2]" in report
    model = read_mps(mps_path.read_text(encoding="utf-8"))
    assert model.binary_indices().size == 5


def test_benders_plan_and_stored_report(tmp_path, capsys):
    config = write_config(tmp_path, mode="benders")
    assert main(["plan", "--config", str(config)]) == EXIT_OK
    out = tmp_path / "out"
    convergence = pd.read_csv(out / "convergence.csv")
    assert (convergence["elapsed_s"].diff().dropna() >= 0).all()
    assert set(convergence["phase"]) == {1, 2}
    assert (out / "runs.sqlite").exists()

    capsys.readouterr()
    assert main(["report", "--config", str(config)]) == EXIT_OK
    printed = capsys.readouterr().out
    assert "Benders Convergence" in printed
    assert "Status: converged" in printed
    assert "Solve time: " in printed
    assert len(list(out.glob("report_*.txt"))) == 1


def test_mode_flag_overrides_config(tmp_path):
    config = write_config(tmp_path, mode="benders")
    assert main(["plan", "--config", str(config), "--mode", "monolithic"]) == EXIT_OK
    plan = json.loads((tmp_path / "out" / "plan.json").read_text(encoding="utf-8"))
    assert plan["summary"]["mode"] == "monolithic"


def test_unconverged_benders_exits_with_gap_code(tmp_path):
    config = write_config(tmp_path, mode="benders", benders={"epsilon": 1e-12, "iter_cap": 2})
    assert main(["plan", "--config", str(config)]) == EXIT_GAP
    plan = json.loads((tmp_path / "out" / "plan.json").read_text(encoding="utf-8"))
    assert plan["summary"]["status"] == "stopped: iteration cap"


def test_errors_exit_with_code_one(tmp_path):
    config = write_config(tmp_path)
    assert main(["plan", "--config", str(config), "--case", str(tmp_path / "missing.m")]) == EXIT_ERROR
    assert main(["report", "--config", str(config)]) == EXIT_ERROR
    assert main(["plan", "--config", str(tmp_path / "absent.yaml")]) == EXIT_ERROR
    bad = write_config(tmp_path, scenario={"contingencies": [9]})
    assert main(["plan", "--config", str(bad)]) == EXIT_ERROR


def test_format_report_without_devices():
    summary = {"case_name": "case3", "mode": "monolithic", "status": "Optimal", "objective": 3.4164e7, "mip_gap": 0.0}
    devices = pd.DataFrame(columns=["branch_id", "from_bus", "to_bus", "installed", "annual_cost", "bv_low", "bv_high"])
    costs = pd.DataFrame({"category": ["base_generation"], "usd_per_year": [3.4164e7]})
    report = format_report(summary, devices, costs, None, {"solver": {"gap": 1e-4}})
    assert "No devices installed." in report
    assert "- total: 34.1640" in report
    assert "solver.gap = 0.0001" in report
    assert "Benders Convergence" not in report
