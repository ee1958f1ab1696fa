"""Results store for planning runs (SQLite by default, MySQL through PyMySQL)."""

from __future__ import annotations

import hashlib
import json
import logging
import math
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Dict, Iterable, Iterator, List, Mapping, Optional, Sequence

import pandas as pd
from sqlalchemy import (
    Column,
    DateTime,
    Float,
    Integer,
    MetaData,
    String,
    Table,
    Text,
    create_engine,
    delete,
    insert,
    select,
)
from sqlalchemy.dialects.mysql import insert as mysql_insert
from sqlalchemy.dialects.sqlite import insert as sqlite_insert
from sqlalchemy.engine import Engine

from config import DatabaseConfig


LOGGER = logging.getLogger(__name__)

CHUNK_SIZE = 500


class RunNotFound(Exception):
    """Raised when a run id is not present in the results store."""


def create_engine_from_config(config: DatabaseConfig, out_dir: Path) -> Engine:
    """Create a SQLAlchemy engine for the results store."""

    url = config.sqlalchemy_url(out_dir)
    if url.startswith("sqlite:///"):
        out_dir.mkdir(parents=True, exist_ok=True)
    return create_engine(url, future=True, pool_pre_ping=True)


def create_tables(engine: Engine) -> Dict[str, Table]:
    metadata = MetaData()
    tables = {
        "plan_runs": Table(
            "plan_runs",
            metadata,
            Column("run_id", String(32), primary_key=True),
            Column("created_at", DateTime),
            Column("case_name", String(128)),
            Column("mode", String(16)),
            Column("status", String(32)),
            Column("objective", Float),
            Column("bound", Float),
            Column("mip_gap", Float),
            Column("phase_one_bound", Float, nullable=True),
            Column("iterations", Integer, nullable=True),
            Column("solve_seconds", Float, nullable=True),
            Column("config_json", Text),
            mysql_charset="utf8mb4",
        ),
        "plan_devices": Table(
            "plan_devices",
            metadata,
            Column("run_id", String(32), primary_key=True),
            Column("branch_id", Integer, primary_key=True),
            Column("from_bus", Integer),
            Column("to_bus", Integer),
            Column("installed", Integer),
            Column("annual_cost", Float),
            Column("bv_low", Float, nullable=True),
            Column("bv_high", Float, nullable=True),
            mysql_charset="utf8mb4",
        ),
        "plan_costs": Table(
            "plan_costs",
            metadata,
            Column("run_id", String(32), primary_key=True),
            Column("category", String(32), primary_key=True),
            Column("usd_per_year", Float),
            mysql_charset="utf8mb4",
        ),
        "benders_iterations": Table(
            "benders_iterations",
            metadata,
            Column("run_id", String(32), primary_key=True),
            Column("iteration", Integer, primary_key=True),
            Column("phase", Integer),
            Column("z_down", Float),
            Column("z_up", Float),
            Column("gap", Float),
            Column("alpha", Float),
            Column("cuts", Integer),
            Column("installed", String(512)),
            Column("elapsed_s", Float),
            mysql_charset="utf8mb4",
        ),
    }
    metadata.create_all(engine, checkfirst=True)
    return tables


def run_identifier(case_text: str, config: Mapping[str, Any], mode: str) -> str:
    """Deterministic id from the case contents, resolved config and mode."""

    digest = hashlib.sha256()
    digest.update(case_text.encode("utf-8"))
    digest.update(json.dumps(config, sort_keys=True, default=str).encode("utf-8"))
    digest.update(mode.encode("utf-8"))
    return digest.hexdigest()[:16]


def chunked(iterable: Iterable[Dict[str, object]], size: int) -> Iterator[List[Dict[str, object]]]:
    chunk: List[Dict[str, object]] = []
    for item in iterable:
        chunk.append(item)
        if len(chunk) >= size:
            yield chunk
            chunk = []
    if chunk:
        yield chunk


def upsert_rows(engine: Engine, table: Table, rows: Sequence[Dict[str, object]], chunk_size: int = CHUNK_SIZE) -> int:
    if not rows:
        return 0

    keys = [column.name for column in table.primary_key.columns]
    written = 0
    with engine.begin() as connection:
        for batch in chunked(rows, chunk_size):
            dialect = engine.dialect.name
            if dialect == "mysql":
                stmt = mysql_insert(table).values(batch)
                update_columns = {
                    column.name: getattr(stmt.inserted, column.name)
                    for column in table.columns
                    if not column.primary_key
                }
                connection.execute(stmt.on_duplicate_key_update(**update_columns))
            elif dialect == "sqlite":
                stmt = sqlite_insert(table).values(batch)
                update_columns = {
                    column.name: getattr(stmt.excluded, column.name)
                    for column in table.columns
                    if not column.primary_key
                }
                connection.execute(stmt.on_conflict_do_update(index_elements=keys, set_=update_columns))
            else:
                for row in batch:
                    condition = [table.c[key] == row[key] for key in keys]
                    connection.execute(delete(table).where(*condition))
                connection.execute(insert(table), batch)
            written += len(batch)
    return written


def _records(frame: Optional[pd.DataFrame], run_id: str, columns: Sequence[str]) -> List[Dict[str, object]]:
    if frame is None or frame.empty:
        return []
    subset = frame[list(columns)]
    records = subset.astype(object).where(pd.notna(subset), None).to_dict(orient="records")
    for record in records:
        record["run_id"] = run_id
    return records


def store_run(
    engine: Engine,
    run_id: str,
    summary: Mapping[str, Any],
    devices: pd.DataFrame,
    costs: pd.DataFrame,
    iterations: Optional[pd.DataFrame] = None,
) -> None:
    """Write one run; child rows of an earlier run with the same id are replaced."""

    tables = create_tables(engine)
    with engine.begin() as connection:
        for name in ("plan_devices", "plan_costs", "benders_iterations"):
            connection.execute(delete(tables[name]).where(tables[name].c.run_id == run_id))

    run_row = {key: (None if isinstance(value, float) and math.isnan(value) else value) for key, value in summary.items()}
    run_row["run_id"] = run_id
    run_row.setdefault("created_at", datetime.now(timezone.utc).replace(tzinfo=None))
    upsert_rows(engine, tables["plan_runs"], [run_row])
    upsert_rows(
        engine,
        tables["plan_devices"],
        _records(devices, run_id, ["branch_id", "from_bus", "to_bus", "installed", "annual_cost", "bv_low", "bv_high"]),
    )
    upsert_rows(engine, tables["plan_costs"], _records(costs, run_id, ["category", "usd_per_year"]))
    upsert_rows(
        engine,
        tables["benders_iterations"],
        _records(
            iterations,
            run_id,
            ["iteration", "phase", "z_down", "z_up", "gap", "alpha", "cuts", "installed", "elapsed_s"],
        ),
    )
    LOGGER.info("Stored run %s in %s", run_id, engine.url.render_as_string(hide_password=True))


def load_run(engine: Engine, run_id: str) -> Dict[str, pd.DataFrame]:
    """Frames for one stored run keyed by table name."""

    tables = create_tables(engine)
    frames: Dict[str, pd.DataFrame] = {}
    with engine.connect() as connection:
        for name, table in tables.items():
            frames[name] = pd.read_sql(select(table).where(table.c.run_id == run_id), connection)
    if frames["plan_runs"].empty:
        raise RunNotFound(f"Run {run_id} not found")
    return frames


def latest_run_id(engine: Engine) -> str:
    tables = create_tables(engine)
    runs = tables["plan_runs"]
    with engine.connect() as connection:
        row = connection.execute(select(runs.c.run_id).order_by(runs.c.created_at.desc()).limit(1)).first()
    if row is None:
        raise RunNotFound("The results store holds no runs")
    return row[0]
