# app/metrics/audit.py
"""Run metrics from log frames, and Monte-Carlo aggregation into saved reports."""
from __future__ import annotations

import json
import math
import uuid
from dataclasses import dataclass
from datetime import datetime, timezone
from typing import Any, Dict, List, Optional, Sequence

import numpy as np
import pandas as pd

from geometry import wrap_angle
from models import RunMetrics, Scenario


@dataclass
class AuditConfig:
    endpoint_radius_m: float = 0.05
    percentiles: Sequence[float] = (50.0, 90.0, 95.0)


def _utc_now_iso() -> str:
    return datetime.now(timezone.utc).replace(microsecond=0).isoformat()


def nearest_rank_percentile(values: Sequence[float], p: float) -> float:
    """Smallest sample with at least p percent of the samples at or below it."""
    if not 0.0 < p <= 100.0:
        raise ValueError("percentile must be in (0, 100]")
    xs = sorted(float(v) for v in values)
    if not xs:
        return math.nan
    rank = max(1, math.ceil(p / 100.0 * len(xs)))
    return xs[rank - 1]


def _count(df: pd.DataFrame, mask) -> int:
    return int(np.count_nonzero(mask)) if len(df) else 0


def compute_run_metrics(frames: Dict[str, pd.DataFrame], sc: Scenario) -> RunMetrics:
    """Metrics from the four log frames; the same call serves in-memory frames and re-read CSVs."""
    truth = frames["truth"]
    est = frames["estimate"]
    meas = frames["measurements"]
    phases = frames["phases"]

    m: Dict[str, Any] = dict(
        scenario=sc.name,
        mission=sc.mission,
        seed=sc.seed,
        truth_rows=len(truth),
        estimate_rows=len(est),
        measurement_rows=len(meas),
    )
    if len(truth):
        m["sim_time_s"] = float(truth["t"].iloc[-1])

    rows = est[est["event"] == ""] if len(est) else est
    if len(rows):
        ex = rows["x"].to_numpy() - rows["true_x"].to_numpy()
        ey = rows["y"].to_numpy() - rows["true_y"].to_numpy()
        eu = rows["u"].to_numpy() - rows["true_u"].to_numpy()
        ev = rows["v"].to_numpy() - rows["true_v"].to_numpy()
        m["pos_rmse_m"] = float(np.sqrt(np.mean(ex * ex + ey * ey)))
        m["vel_rmse_mps"] = float(np.sqrt(np.mean(eu * eu + ev * ev)))
        last = rows.iloc[-1]
        goal = sc.target.position
        true_xy = np.array([last["true_x"], last["true_y"]])
        m["final_estimate_error_m"] = float(math.hypot(ex[-1], ey[-1]))
        m["endpoint_error_m"] = float(np.linalg.norm(true_xy - goal))
        m["final_separation_m"] = m["endpoint_error_m"]
        m["final_heading_err_rad"] = abs(wrap_angle(float(last["true_psi"]) - sc.target.psi_rad))
        m["cov_checks"] = len(rows)
        m["cov_violations"] = _count(rows, rows["cov_ok"].to_numpy() == 0)

    if len(meas):
        acc = meas["accepted"].to_numpy() == 1
        for sensor in ("uwb", "accel", "vision"):
            is_s = (meas["sensor"] == sensor).to_numpy()
            processed = is_s & (meas["note"] == "").to_numpy()
            m[f"{sensor}_accepted"] = _count(meas, processed & acc)
            m[f"{sensor}_rejected"] = _count(meas, processed & ~acc)
        uwb = ((meas["sensor"] == "uwb") & (meas["note"] == "")).to_numpy()
        outlier = meas["outlier_component"].to_numpy() == 1
        gross = meas["gross_outlier"].to_numpy() == 1
        m["uwb_degenerate"] = _count(meas, ((meas["sensor"] == "uwb") & (meas["note"] == "degenerate")).to_numpy())
        m["vision_failures"] = _count(meas, ((meas["sensor"] == "vision") & meas["note"].str.startswith("error")).to_numpy())
        m["outliers_processed"] = _count(meas, uwb & outlier)
        m["outliers_rejected"] = _count(meas, uwb & outlier & ~acc)
        m["gross_outliers_processed"] = _count(meas, uwb & gross)
        m["gross_outliers_rejected"] = _count(meas, uwb & gross & ~acc)
        m["inliers_processed"] = _count(meas, uwb & ~outlier)
        m["inliers_rejected"] = _count(meas, uwb & ~outlier & ~acc)

    if len(phases):
        m["phase_timeline"] = [(float(t), str(p)) for t, p in zip(phases["t"], phases["phase"])]
        names = set(phases["phase"])
        m["docked"] = "DOCKED" in names
        m["aborted"] = "ABORT" in names
    if len(est) and (est["event"] != "").any():
        m["aborted"] = True
    return RunMetrics(**m)


# --------------------
# Monte Carlo
# --------------------
def metrics_row(index: int, metrics: Optional[RunMetrics], error: str = "") -> Dict[str, Any]:
    row: Dict[str, Any] = {"run": index, "failed": metrics is None, "error": error}
    if metrics is not None:
        data = metrics.model_dump()
        data.pop("phase_timeline")
        data["phases"] = ">".join(metrics.phases())
        row.update(data)
    return row


def aggregate_runs(table: pd.DataFrame, cfg: Optional[AuditConfig] = None) -> Dict[str, Any]:
    cfg = cfg or AuditConfig()
    ok = table[~table["failed"]] if len(table) else table
    endpoints: List[float] = [float(v) for v in ok["endpoint_error_m"]] if len(ok) else []
    endpoints = [v for v in endpoints if not math.isnan(v)]
    summary: Dict[str, Any] = {
        "n_runs": int(len(table)),
        "n_failed": int(table["failed"].sum()) if len(table) else 0,
        "endpoint_percentiles_m": {f"p{p:g}": nearest_rank_percentile(endpoints, p) for p in cfg.percentiles},
        "endpoint_max_m": max(endpoints) if endpoints else math.nan,
        "fraction_within_radius": (
            sum(1 for v in endpoints if v <= cfg.endpoint_radius_m) / len(endpoints) if endpoints else math.nan
        ),
        "endpoint_radius_m": cfg.endpoint_radius_m,
    }
    if len(ok):
        summary["pos_rmse_mean_m"] = float(ok["pos_rmse_m"].mean())
        summary["pos_rmse_p90_m"] = nearest_rank_percentile(ok["pos_rmse_m"].dropna(), 90.0)
        summary["vel_rmse_mean_mps"] = float(ok["vel_rmse_mps"].mean())
        gross = int(ok["gross_outliers_processed"].sum())
        inliers = int(ok["inliers_processed"].sum())
        summary["gate"] = {
            "uwb_accepted": int(ok["uwb_accepted"].sum()),
            "uwb_rejected": int(ok["uwb_rejected"].sum()),
            "gross_rejection_rate": int(ok["gross_outliers_rejected"].sum()) / gross if gross else math.nan,
            "inlier_rejection_rate": int(ok["inliers_rejected"].sum()) / inliers if inliers else math.nan,
        }
        summary["docked_fraction"] = float(ok["docked"].astype(bool).mean())
    return summary


def build_report(
    scenario: Scenario,
    table: pd.DataFrame,
    seed_base: int,
    cfg: Optional[AuditConfig] = None,
) -> Dict[str, Any]:
    return {
        "report_id": str(uuid.uuid4()),
        "created_at": _utc_now_iso(),
        "scenario": scenario.name,
        "mission": scenario.mission,
        "seed_base": seed_base,
        "summary": aggregate_runs(table, cfg),
    }


def report_json(report: Dict[str, Any]) -> str:
    # NaN is not valid JSON; numpy scalars are unwrapped first
    def clean(v):
        if isinstance(v, np.generic):
            v = v.item()
        if isinstance(v, float) and math.isnan(v):
            return None
        if isinstance(v, dict):
            return {k: clean(x) for k, x in v.items()}
        if isinstance(v, (list, tuple)):
            return [clean(x) for x in v]
        return v

    return json.dumps(clean(report), ensure_ascii=False, indent=2)
