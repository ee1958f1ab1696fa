"""Shared configuration loading used by the planning commands."""

from __future__ import annotations

import json
import math
import os
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Tuple

import yaml


DEFAULT_CONFIG_PATH = Path(__file__).resolve().parent.parent / "config.yaml"

ENV_DEFAULTS = {
    "host": os.getenv("MYSQL_HOST"),
    "port": os.getenv("MYSQL_PORT"),
    "user": os.getenv("MYSQL_USER"),
    "password": os.getenv("MYSQL_PASSWORD"),
    "database": os.getenv("MYSQL_DATABASE"),
}


class ConfigError(Exception):
    """Raised when configuration cannot be loaded or is invalid."""


def _section(data: Mapping[str, Any], name: str) -> Mapping[str, Any]:
    section = data.get(name) or {}
    if not isinstance(section, Mapping):
        raise ConfigError(f"Config section '{name}' must be a mapping.")
    return section


def _number(section: Mapping[str, Any], key: str, default: float, *, low: float = -math.inf, high: float = math.inf) -> float:
    try:
        value = float(section.get(key, default))
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"Config key '{key}' must be a number.") from exc
    if not low <= value <= high:
        raise ConfigError(f"Config key '{key}'={value} outside [{low}, {high}].")
    return value


def _optional_number(section: Mapping[str, Any], key: str) -> Optional[float]:
    if section.get(key) is None:
        return None
    return _number(section, key, 0.0, low=0.0)


@dataclass(frozen=True)
class NetworkConfig:
    theta_max: float = math.pi / 3
    emergency_factor: float = 1.10
    rating_scale: float = 1.0
    rating_overrides: Mapping[int, float] = field(default_factory=dict)
    default_rating_mva: float = 9900.0
    load_scale: float = 1.0
    reschedulable: Optional[Tuple[int, ...]] = None  # None means every generator
    ramp_fraction: float = 0.25
    adjust_up_factor: float = 1.2
    adjust_down_factor: float = 0.8

    @classmethod
    def from_mapping(cls, data: Mapping[str, Any]) -> "NetworkConfig":
        resched = data.get("reschedulable", "all")
        if resched in (None, "all"):
            reschedulable = None
        elif isinstance(resched, (list, tuple)):
            reschedulable = tuple(int(gen) for gen in resched)
        else:
            raise ConfigError("network.reschedulable must be 'all' or a list of generator ids.")
        overrides = data.get("rating_overrides") or {}
        if not isinstance(overrides, Mapping):
            raise ConfigError("network.rating_overrides must map branch id to MVA.")
        return cls(
            theta_max=_number(data, "theta_max", math.pi / 3, low=1e-9, high=math.pi),
            emergency_factor=_number(data, "emergency_factor", 1.10, low=1.0),
            rating_scale=_number(data, "rating_scale", 1.0, low=1e-9),
            rating_overrides={int(key): float(value) for key, value in overrides.items()},
            default_rating_mva=_number(data, "default_rating_mva", 9900.0, low=1e-9),
            load_scale=_number(data, "load_scale", 1.0, low=0.0),
            reschedulable=reschedulable,
            ramp_fraction=_number(data, "ramp_fraction", 0.25, low=0.0, high=1.0),
            adjust_up_factor=_number(data, "adjust_up_factor", 1.2, low=0.0),
            adjust_down_factor=_number(data, "adjust_down_factor", 0.8, low=0.0),
        )


@dataclass(frozen=True)
class VsrConfig:
    comp_min: float = -0.7
    comp_max: float = 0.2
    device_cost: float = 1_948_000.0
    big_m: str = "exact"
    strengthen: bool = True
    candidates: Optional[Tuple[int, ...]] = None

    @classmethod
    def from_mapping(cls, data: Mapping[str, Any]) -> "VsrConfig":
        comp_min = _number(data, "comp_min", -0.7, low=-1.0 + 1e-9)
        comp_max = _number(data, "comp_max", 0.2)
        if comp_min > comp_max:
            raise ConfigError("vsr.comp_min must not exceed vsr.comp_max.")
        big_m = str(data.get("big_m", "exact"))
        if big_m not in ("exact", "reactance"):
            raise ConfigError("vsr.big_m must be 'exact' or 'reactance'.")
        candidates = data.get("candidates")
        return cls(
            comp_min=comp_min,
            comp_max=comp_max,
            device_cost=_number(data, "device_cost", 1_948_000.0, low=0.0),
            big_m=big_m,
            strengthen=bool(data.get("strengthen", True)),
            candidates=tuple(int(branch) for branch in candidates) if candidates is not None else None,
        )


@dataclass(frozen=True)
class FinanceConfig:
    interest: float = 0.05
    life_years: int = 5

    @classmethod
    def from_mapping(cls, data: Mapping[str, Any]) -> "FinanceConfig":
        return cls(
            interest=_number(data, "interest", 0.05, low=1e-12),
            life_years=int(_number(data, "life_years", 5, low=1)),
        )


LOAD_LEVEL_PRESETS: Dict[str, Tuple[Tuple[str, float], ...]] = {
    "ieee118": (("peak", 1.2), ("normal", 1.0), ("low", 0.8)),
    "polish": (("peak", 1.0), ("normal", 0.8), ("low", 0.6)),
}


@dataclass(frozen=True)
class ScenarioConfig:
    load_levels: Tuple[Tuple[str, float], ...] = LOAD_LEVEL_PRESETS["ieee118"]
    base_hours_split: Mapping[str, float] = field(
        default_factory=lambda: {"peak": 0.15, "normal": 0.55, "low": 0.30}
    )
    contingency_hours: float = 2.0
    contingencies: Optional[Tuple[int, ...]] = None

    @classmethod
    def from_mapping(cls, data: Mapping[str, Any]) -> "ScenarioConfig":
        preset = data.get("preset")
        if preset is not None and preset not in LOAD_LEVEL_PRESETS:
            raise ConfigError(f"scenario.preset must be one of {sorted(LOAD_LEVEL_PRESETS)}.")
        levels: Tuple[Tuple[str, float], ...] = LOAD_LEVEL_PRESETS[preset or "ieee118"]
        if data.get("load_levels"):
            parsed: List[Tuple[str, float]] = []
            for entry in data["load_levels"]:
                if not isinstance(entry, Mapping) or "label" not in entry or "scale" not in entry:
                    raise ConfigError("scenario.load_levels entries need 'label' and 'scale'.")
                parsed.append((str(entry["label"]), _number(entry, "scale", 1.0, low=1e-9)))
            levels = tuple(parsed)
        split = data.get("base_hours_split") or {"peak": 0.15, "normal": 0.55, "low": 0.30}
        if not isinstance(split, Mapping):
            raise ConfigError("scenario.base_hours_split must map level label to a share.")
        contingencies = data.get("contingencies")
        return cls(
            load_levels=levels,
            base_hours_split={str(key): float(value) for key, value in split.items()},
            contingency_hours=_number(data, "contingency_hours", 2.0, low=0.0),
            contingencies=tuple(int(branch) for branch in contingencies) if contingencies is not None else None,
        )


@dataclass(frozen=True)
class ScreenConfig:
    num_contingencies: int = 30
    num_candidates: int = 30
    level: str = "peak"

    @classmethod
    def from_mapping(cls, data: Mapping[str, Any]) -> "ScreenConfig":
        return cls(
            num_contingencies=int(_number(data, "num_contingencies", 30, low=0)),
            num_candidates=int(_number(data, "num_candidates", 30, low=0)),
            level=str(data.get("level", "peak")),
        )


@dataclass(frozen=True)
class SolverConfig:
    backend: str = "builtin"
    gap: float = 1e-4
    node_limit: int = 100_000
    time_limit_s: Optional[float] = None
    max_nonzeros: int = 50_000
    method: str = "highs-ds"
    command: Optional[str] = None
    solution_file: Optional[str] = None
    work_dir: str = "."

    @classmethod
    def from_mapping(cls, data: Mapping[str, Any]) -> "SolverConfig":
        backend = str(data.get("backend", "builtin"))
        if backend not in ("builtin", "external"):
            raise ConfigError("solver.backend must be 'builtin' or 'external'.")
        method = str(data.get("method", "highs-ds"))
        if method not in ("highs", "highs-ds", "highs-ipm"):
            raise ConfigError("solver.method must be one of highs, highs-ds, highs-ipm.")
        return cls(
            backend=backend,
            gap=_number(data, "gap", 1e-4, low=0.0, high=1.0),
            node_limit=int(_number(data, "node_limit", 100_000, low=1)),
            time_limit_s=_optional_number(data, "time_limit_s"),
            max_nonzeros=int(_number(data, "max_nonzeros", 50_000, low=1)),
            method=method,
            command=data.get("command"),
            solution_file=data.get("solution_file"),
            work_dir=str(data.get("work_dir", ".")),
        )


@dataclass(frozen=True)
class PenaltyConfig:
    load_shedding: float = 5000.0
    slack_factor: float = 10.0

    @classmethod
    def from_mapping(cls, data: Mapping[str, Any]) -> "PenaltyConfig":
        return cls(
            load_shedding=_number(data, "load_shedding", 5000.0, low=0.0),
            slack_factor=_number(data, "slack_factor", 10.0, low=1.0),
        )


@dataclass(frozen=True)
class BendersConfig:
    epsilon: float = 1e-3
    iter_cap: int = 50
    time_limit_s: Optional[float] = None
    alpha_down: float = 0.0
    workers: int = 1

    @classmethod
    def from_mapping(cls, data: Mapping[str, Any]) -> "BendersConfig":
        return cls(
            epsilon=_number(data, "epsilon", 1e-3, low=1e-12),
            iter_cap=int(_number(data, "iter_cap", 50, low=2)),
            time_limit_s=_optional_number(data, "time_limit_s"),
            alpha_down=_number(data, "alpha_down", 0.0),
            workers=int(_number(data, "workers", 1, low=1)),
        )


@dataclass(frozen=True)
class DatabaseConfig:
    """Container for the results-store connection."""

    url: Optional[str] = None
    host: str = "127.0.0.1"
    port: int = 3306
    user: str = "planner"
    password: str = "planner"
    database: str = "vsr_planning"

    def sqlalchemy_url(self, out_dir: Path) -> str:
        if self.url:
            return self.url
        return f"sqlite:///{(out_dir / 'runs.sqlite').as_posix()}"

    @classmethod
    def from_mapping(cls, data: Mapping[str, Any]) -> "DatabaseConfig":
        mysql = data.get("mysql")
        if isinstance(mysql, Mapping):
            config = cls(
                host=str(mysql.get("host", "127.0.0.1")),
                port=int(mysql.get("port", 3306)),
                user=str(mysql.get("user", "planner")),
                password=str(mysql.get("password", "planner")),
                database=str(mysql.get("database") or mysql.get("name") or "vsr_planning"),
            ).with_env_defaults()
            return replace(
                config,
                url=(
                    f"mysql+pymysql://{config.user}:{config.password}"
                    f"@{config.host}:{config.port}/{config.database}"
                ),
            )
        return cls(url=data.get("url"))

    def with_env_defaults(self) -> "DatabaseConfig":
        """Return a copy with environment variables filling in missing fields."""

        return DatabaseConfig(
            url=self.url,
            host=ENV_DEFAULTS["host"] or self.host,
            port=int(ENV_DEFAULTS["port"] or self.port),
            user=ENV_DEFAULTS["user"] or self.user,
            password=ENV_DEFAULTS["password"] or self.password,
            database=ENV_DEFAULTS["database"] or self.database,
        )


@dataclass(frozen=True)
class RunConfig:
    case: Optional[Path] = None
    mode: str = "benders"
    out_dir: Path = Path("out")
    network: NetworkConfig = field(default_factory=NetworkConfig)
    vsr: VsrConfig = field(default_factory=VsrConfig)
    finance: FinanceConfig = field(default_factory=FinanceConfig)
    scenario: ScenarioConfig = field(default_factory=ScenarioConfig)
    screen: ScreenConfig = field(default_factory=ScreenConfig)
    solver: SolverConfig = field(default_factory=SolverConfig)
    penalty: PenaltyConfig = field(default_factory=PenaltyConfig)
    benders: BendersConfig = field(default_factory=BendersConfig)
    results: DatabaseConfig = field(default_factory=DatabaseConfig)

    @classmethod
    def from_mapping(cls, data: Mapping[str, Any]) -> "RunConfig":
        mode = str(data.get("mode", "benders"))
        if mode not in ("monolithic", "benders"):
            raise ConfigError("mode must be 'monolithic' or 'benders'.")
        case = data.get("case")
        return cls(
            case=Path(case) if case else None,
            mode=mode,
            out_dir=Path(data.get("out_dir", "out")),
            network=NetworkConfig.from_mapping(_section(data, "network")),
            vsr=VsrConfig.from_mapping(_section(data, "vsr")),
            finance=FinanceConfig.from_mapping(_section(data, "finance")),
            scenario=ScenarioConfig.from_mapping(_section(data, "scenario")),
            screen=ScreenConfig.from_mapping(_section(data, "screen")),
            solver=SolverConfig.from_mapping(_section(data, "solver")),
            penalty=PenaltyConfig.from_mapping(_section(data, "penalty")),
            benders=BendersConfig.from_mapping(_section(data, "benders")),
            results=DatabaseConfig.from_mapping(_section(data, "results")),
        )

    def with_overrides(self, **overrides: Any) -> "RunConfig":
        """Apply CLI flags on top of the file values; None means 'not given'."""

        given = {key: value for key, value in overrides.items() if value is not None}
        if "case" in given:
            given["case"] = Path(given["case"])
        if "out_dir" in given:
            given["out_dir"] = Path(given["out_dir"])
        if given.get("mode") not in (None, "monolithic", "benders"):
            raise ConfigError("--mode must be 'monolithic' or 'benders'.")
        return replace(self, **given)

    def validate_paths(self) -> None:
        if self.case is None:
            raise ConfigError("No case file given (use --case or the 'case' config key).")
        if not self.case.exists():
            raise ConfigError(f"Case file not found: {self.case}")

    def to_dict(self) -> Dict[str, Any]:
        """Plain-data view of the resolved configuration, passwords masked."""

        data = asdict(self)
        data["case"] = str(self.case) if self.case else None
        data["out_dir"] = str(self.out_dir)
        data["results"]["password"] = "***"
        if data["results"].get("url") and "@" in data["results"]["url"]:
            data["results"]["url"] = "***"
        data["network"]["rating_overrides"] = {str(key): value for key, value in self.network.rating_overrides.items()}
        # tuples become lists so the echo matches what a YAML or JSON reader sees
        return json.loads(json.dumps(data, default=str))


def add_config_argument(parser, default_path: Path | None = None) -> None:
    """Attach a --config option to an argparse parser."""

    default = default_path or DEFAULT_CONFIG_PATH
    parser.add_argument(
        "--config",
        default=str(default),
        help=f"Path to configuration file (default: {default})",
    )


def load_yaml_config(path: Path) -> Mapping[str, Any]:
    if not path.exists():
        raise ConfigError(f"Configuration file not found: {path}")
    with path.open("r", encoding="utf-8") as handle:
        data = yaml.safe_load(handle) or {}
    if not isinstance(data, Mapping):
        raise ConfigError(f"Configuration root must be a mapping: {path}")
    return data


def load_run_config(config_path: str | Path | None = None) -> RunConfig:
    """Load the planning configuration from config.yaml."""

    path = Path(config_path) if config_path else DEFAULT_CONFIG_PATH
    return RunConfig.from_mapping(load_yaml_config(path))
