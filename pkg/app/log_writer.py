# app/log_writer.py
"""Fixed CSV schemas for run logs.

Values are quantized to their printed precision before anything reads them, so metrics computed in
memory and metrics recomputed from the written files agree exactly.
"""
from __future__ import annotations

import os
from typing import Dict, Iterable, List, Sequence

import pandas as pd

SCHEMA_VERSION = 1
HEADER = f"# schema_version={SCHEMA_VERSION}\n"
FLOAT_FORMAT = "%.12g"

TRUTH_COLUMNS = ["t", "x", "y", "psi", "u", "v", "omega", "d0", "d1", "d2", "d3"]
ESTIMATE_COLUMNS = [
    "t", "x", "y", "u", "v", "p_xx", "p_yy", "p_uu", "p_vv", "p_xy",
    "psi_hat", "omega_hat", "attitude_source", "phase", "vision_converged", "cov_ok",
    "true_x", "true_y", "true_psi", "true_u", "true_v", "event",
]
MEASUREMENT_COLUMNS = [
    "t", "sensor", "anchor_id", "value", "accepted", "d2", "weight",
    "outlier_component", "gross_outlier", "note",
]
PHASE_COLUMNS = ["t", "phase", "reason"]

LOGS: Dict[str, List[str]] = {
    "truth": TRUTH_COLUMNS,
    "estimate": ESTIMATE_COLUMNS,
    "measurements": MEASUREMENT_COLUMNS,
    "phases": PHASE_COLUMNS,
}


def quantize(x: float) -> float:
    """Round-trip a float through its logged text form."""
    return float(FLOAT_FORMAT % x)


def quantize_time(t: float) -> float:
    return float("%.6f" % t)


def build_frame(name: str, rows: Iterable[Sequence]) -> pd.DataFrame:
    cols = LOGS[name]
    df = pd.DataFrame(list(rows), columns=cols)
    for c in cols:
        if c == "t":
            df[c] = df[c].astype(float).map(quantize_time)
        elif df[c].dtype.kind == "f":
            df[c] = df[c].map(quantize)
    return df


def write_frame(df: pd.DataFrame, path: str) -> None:
    out = df.copy()
    out["t"] = out["t"].map(lambda t: "%.6f" % t)
    with open(path, "w", encoding="utf-8", newline="") as f:
        f.write(HEADER)
        out.to_csv(f, index=False, float_format=FLOAT_FORMAT, lineterminator="\n")


def write_logs(frames: Dict[str, pd.DataFrame], out_dir: str) -> Dict[str, str]:
    os.makedirs(out_dir, exist_ok=True)
    paths = {}
    for name, df in frames.items():
        path = os.path.join(out_dir, f"{name}.csv")
        write_frame(df, path)
        paths[name] = path
    return paths


def read_frame(path: str) -> pd.DataFrame:
    with open(path, "r", encoding="utf-8") as f:
        first = f.readline().strip()
    if first != HEADER.strip():
        raise ValueError(f"{path}: unsupported log header {first!r}")
    df = pd.read_csv(path, comment=None, skiprows=1, float_precision="round_trip", keep_default_na=False, na_values=[""])
    for c in ("note", "reason", "event", "sensor", "phase", "attitude_source"):
        if c in df.columns:
            df[c] = df[c].fillna("").astype(str)
    return df


def read_logs(out_dir: str) -> Dict[str, pd.DataFrame]:
    return {name: read_frame(os.path.join(out_dir, f"{name}.csv")) for name in LOGS}


