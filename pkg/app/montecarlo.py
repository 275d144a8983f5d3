# app/montecarlo.py
"""Batches of randomized runs.

Run ``i`` of a batch draws its start pose and its scenario seed from
``SeedSequence(seed_base, spawn_key=(i,))``, so a run's inputs do not depend on the batch size or on
which worker executes it. joblib returns results in run order.
"""
from __future__ import annotations

import logging
import math
import os
from dataclasses import dataclass
from typing import Any, Dict, Optional

import numpy as np
import pandas as pd
from joblib import Parallel, delayed
from tqdm import tqdm

from app.controller import run_scenario
from app.metrics.audit import AuditConfig, build_report, metrics_row
from models import Scenario

logger = logging.getLogger(__name__)


@dataclass
class MonteCarloResult:
    table: pd.DataFrame
    report: Dict[str, Any]


def scenario_for_run(sc: Scenario, seed_base: int, index: int) -> Scenario:
    ss = np.random.SeedSequence(seed_base, spawn_key=(index,))
    rng = np.random.default_rng(ss)
    init = sc.initial
    lo = np.asarray(init.region_min_m, dtype=float)
    hi = np.asarray(init.region_max_m, dtype=float)
    xy = rng.uniform(lo, hi)
    psi = float(rng.uniform(-math.pi, math.pi)) if init.randomize_heading else init.psi_rad
    initial = init.model_copy(update={"x_m": float(xy[0]), "y_m": float(xy[1]), "psi_rad": psi})
    run_seed = int(ss.generate_state(1)[0])
    return sc.model_copy(update={"initial": initial, "seed": run_seed, "name": f"{sc.name}#{index}"})


def _run_one(sc: Scenario, index: int, out_dir: Optional[str]) -> Dict[str, Any]:
    run_dir = os.path.join(out_dir, f"run_{index:04d}") if out_dir else None
    try:
        result = run_scenario(sc, run_dir)
    except Exception as e:  # a failed run becomes a flagged row
        return metrics_row(index, None, f"{type(e).__name__}: {e}")
    return metrics_row(index, result.metrics)


def run_monte_carlo(
    sc: Scenario,
    n_runs: int,
    seed_base: int = 0,
    n_jobs: int = 1,
    out_dir: Optional[str] = None,
    progress: bool = True,
    audit: Optional[AuditConfig] = None,
) -> MonteCarloResult:
    if n_runs < 1:
        raise ValueError("n_runs must be at least 1")
    scenarios = [scenario_for_run(sc, seed_base, i) for i in range(n_runs)]
    results = Parallel(n_jobs=n_jobs, return_as="generator")(
        delayed(_run_one)(scenarios[i], i, out_dir) for i in range(n_runs)
    )
    # the bar advances as runs finish, not as they are queued
    rows = list(tqdm(results, total=n_runs, desc=f"Monte Carlo {sc.name}", disable=not progress))
    table = pd.DataFrame(rows).sort_values("run").reset_index(drop=True)
    n_failed = int(table["failed"].sum())
    if n_failed:
        logger.warning("%d of %d runs failed", n_failed, n_runs)
    report = build_report(sc, table, seed_base, audit)
    return MonteCarloResult(table, report)
