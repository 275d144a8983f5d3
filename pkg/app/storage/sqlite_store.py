# app/storage/sqlite_store.py
from __future__ import annotations

import json
import os
import sqlite3
import uuid
from datetime import datetime, timezone
from typing import Any, Dict, List, Optional

from models import RunMetrics

# DB file path: app/storage/proxops.db
_DB_PATH = os.path.join(os.path.dirname(__file__), "proxops.db")


def get_db_path() -> str:
    return _DB_PATH


def _connect(db_path: Optional[str] = None) -> sqlite3.Connection:
    conn = sqlite3.connect(db_path or _DB_PATH)
    conn.row_factory = sqlite3.Row
    return conn


def _utc_now_iso() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="microseconds")


def init_db(db_path: Optional[str] = None) -> None:
    with _connect(db_path) as conn:
        cur = conn.cursor()

        cur.execute(
            """
            CREATE TABLE IF NOT EXISTS runs (
                run_id TEXT PRIMARY KEY,
                scenario TEXT NOT NULL,
                mission TEXT NOT NULL,
                seed INTEGER NOT NULL,
                created_at TEXT NOT NULL,
                docked INTEGER NOT NULL DEFAULT 0,
                aborted INTEGER NOT NULL DEFAULT 0,
                endpoint_error_m REAL,
                pos_rmse_m REAL,
                out_dir TEXT,
                metrics_json TEXT NOT NULL
            )
            """
        )
        cur.execute("CREATE INDEX IF NOT EXISTS idx_runs_scenario ON runs(scenario, created_at)")

        cur.execute(
            """
            CREATE TABLE IF NOT EXISTS montecarlo_reports (
                report_id TEXT PRIMARY KEY,
                created_at TEXT NOT NULL,
                scenario TEXT NOT NULL,
                mission TEXT NOT NULL,
                seed_base INTEGER NOT NULL,
                n_runs INTEGER NOT NULL,
                n_failed INTEGER NOT NULL DEFAULT 0,
                report_json TEXT NOT NULL,   -- summary block as produced by app.metrics.audit
                table_json TEXT NOT NULL,    -- one record per run
                notes TEXT NOT NULL DEFAULT ''
            )
            """
        )
        cur.execute(
            "CREATE INDEX IF NOT EXISTS idx_reports_scenario "
            "ON montecarlo_reports(scenario, created_at)"
        )
        conn.commit()


def save_run(metrics: RunMetrics, out_dir: Optional[str] = None, db_path: Optional[str] = None) -> str:
    run_id = f"r_{uuid.uuid4().hex[:8]}"
    with _connect(db_path) as conn:
        conn.execute(
            """
            INSERT INTO runs
            (run_id, scenario, mission, seed, created_at, docked, aborted, endpoint_error_m, pos_rmse_m, out_dir, metrics_json)
            VALUES (?, ?, ?, ?, ?, ?, ?, ?, ?, ?, ?)
            """,
            (
                run_id,
                metrics.scenario,
                metrics.mission,
                metrics.seed,
                _utc_now_iso(),
                int(metrics.docked),
                int(metrics.aborted),
                metrics.endpoint_error_m,
                metrics.pos_rmse_m,
                out_dir,
                metrics.model_dump_json(),
            ),
        )
        conn.commit()
    return run_id


def get_run(run_id: str, db_path: Optional[str] = None) -> Optional[RunMetrics]:
    with _connect(db_path) as conn:
        row = conn.execute("SELECT metrics_json FROM runs WHERE run_id=?", (run_id,)).fetchone()
    if row is None:
        return None
    return RunMetrics.model_validate_json(row["metrics_json"])


def list_runs(scenario: Optional[str] = None, limit: int = 50, db_path: Optional[str] = None) -> List[sqlite3.Row]:
    sql = "SELECT run_id, scenario, mission, seed, created_at, docked, aborted, endpoint_error_m, pos_rmse_m FROM runs"
    params: List[Any] = []
    if scenario:
        sql += " WHERE scenario=?"
        params.append(scenario)
    sql += " ORDER BY created_at DESC LIMIT ?"
    params.append(limit)
    with _connect(db_path) as conn:
        return conn.execute(sql, tuple(params)).fetchall()


def save_montecarlo_report(
    report: Dict[str, Any],
    report_text: str,
    table_records: List[Dict[str, Any]],
    notes: str = "",
    db_path: Optional[str] = None,
) -> None:
    summary = report.get("summary", {})
    with _connect(db_path) as conn:
        conn.execute(
            """
            INSERT INTO montecarlo_reports
            (report_id, created_at, scenario, mission, seed_base, n_runs, n_failed, report_json, table_json, notes)
            VALUES (?, ?, ?, ?, ?, ?, ?, ?, ?, ?)
            """,
            (
                report["report_id"],
                report["created_at"],
                report["scenario"],
                report["mission"],
                int(report["seed_base"]),
                int(summary.get("n_runs", 0)),
                int(summary.get("n_failed", 0)),
                report_text,
                json.dumps(table_records, ensure_ascii=False, default=str),
                notes,
            ),
        )
        conn.commit()


def get_montecarlo_report(report_id: str, db_path: Optional[str] = None) -> Optional[dict]:
    with _connect(db_path) as conn:
        row = conn.execute(
            "SELECT report_json FROM montecarlo_reports WHERE report_id=?", (report_id,)
        ).fetchone()
    return json.loads(row["report_json"]) if row else None


def get_latest_montecarlo_report(scenario: Optional[str] = None, db_path: Optional[str] = None) -> Optional[dict]:
    sql = "SELECT report_json FROM montecarlo_reports"
    params: List[Any] = []
    if scenario:
        sql += " WHERE scenario=?"
        params.append(scenario)
    sql += " ORDER BY created_at DESC LIMIT 1"
    with _connect(db_path) as conn:
        row = conn.execute(sql, tuple(params)).fetchone()
    return json.loads(row["report_json"]) if row else None


def list_montecarlo_reports(limit: int = 20, db_path: Optional[str] = None) -> List[sqlite3.Row]:
    with _connect(db_path) as conn:
        return conn.execute(
            """
            SELECT report_id, created_at, scenario, mission, seed_base, n_runs, n_failed
            FROM montecarlo_reports
            ORDER BY created_at DESC
            LIMIT ?
            """,
            (limit,),
        ).fetchall()


def reset_db(db_path: Optional[str] = None) -> None:
    with _connect(db_path) as conn:
        conn.execute("DROP TABLE IF EXISTS runs")
        conn.execute("DROP TABLE IF EXISTS montecarlo_reports")
        conn.commit()
    init_db(db_path)
