# app/cli.py
import argparse
import json
import logging
import os
import sys
from typing import Any, Dict, List, Optional

import app.storage.sqlite_store as store
from app.config import ConfigError, load_scenario
from app.controller import ScenarioAborted, run_scenario
from app.metrics.audit import report_json
from app.montecarlo import run_monte_carlo
from app.selfcheck import SelfCheckConfig, check_p3p_roundtrip, run_self_check
from models import RunMetrics

EXIT_OK = 0
EXIT_SCENARIO_FAILURE = 1
EXIT_CONFIG_ERROR = 2
EXIT_SELFCHECK_FAILURE = 3


def print_metrics(m: RunMetrics) -> None:
    print(f"\nScenario: {m.scenario} (mission={m.mission}, seed={m.seed})")
    print(f"sim_time: {m.sim_time_s:.2f} s")
    print(f"endpoint_error: {m.endpoint_error_m:.4f} m  pos_rmse: {m.pos_rmse_m:.4f} m  vel_rmse: {m.vel_rmse_mps:.4f} m/s")
    print(f"uwb: accepted={m.uwb_accepted} rejected={m.uwb_rejected} degenerate={m.uwb_degenerate}")
    print(f"accel: accepted={m.accel_accepted} rejected={m.accel_rejected}")
    print(f"vision: accepted={m.vision_accepted} rejected={m.vision_rejected} failures={m.vision_failures}")
    if m.gross_outliers_processed:
        print(f"gross outliers rejected: {m.gross_rejection_rate:.1%}  inliers rejected: {m.inlier_rejection_rate:.2%}")
    if m.phase_timeline:
        print("phases: " + " -> ".join(f"{p}@{t:.2f}" for t, p in m.phase_timeline))
    if m.mission == "docking":
        print(f"final separation: {m.final_separation_m:.4f} m  heading error: {m.final_heading_err_rad:.4f} rad")
    print(f"covariance: {m.cov_violations} violations in {m.cov_checks} checks")


def _metrics_dict(m: RunMetrics) -> Dict[str, Any]:
    data = m.model_dump()
    data["gross_rejection_rate"] = m.gross_rejection_rate
    data["outlier_rejection_rate"] = m.outlier_rejection_rate
    data["inlier_rejection_rate"] = m.inlier_rejection_rate
    return data


def _write_json(path: Optional[str], payload: Dict[str, Any]) -> None:
    if not path:
        return
    parent = os.path.dirname(path)
    if parent:
        os.makedirs(parent, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        f.write(report_json(payload))
    print(f"✅ JSON metrics written to {path}")


# ----------------
# Commands
# ----------------
def cmd_simulate(args: argparse.Namespace) -> int:
    sc = load_scenario(args.config)
    if args.seed is not None:
        sc = sc.model_copy(update={"seed": args.seed})
    try:
        result = run_scenario(sc, args.out_dir)
    except ScenarioAborted as e:
        print(f"❌ Scenario aborted: {e}")
        return EXIT_SCENARIO_FAILURE
    m = result.metrics
    print_metrics(m)
    if result.paths:
        print(f"✅ Logs written to {args.out_dir}")
    _write_json(args.json_metrics, _metrics_dict(m))
    if args.db:
        store.init_db(args.db)
        run_id = store.save_run(m, args.out_dir, db_path=args.db)
        print(f"✅ Run saved as {run_id}")
    if m.aborted or (m.mission == "docking" and not m.docked):
        return EXIT_SCENARIO_FAILURE
    return EXIT_OK


def cmd_montecarlo(args: argparse.Namespace) -> int:
    sc = load_scenario(args.config)
    res = run_monte_carlo(
        sc,
        args.runs,
        seed_base=args.seed,
        n_jobs=args.jobs,
        out_dir=args.out_dir,
        progress=not args.quiet,
    )
    text = report_json(res.report)
    print("\n--- MONTE CARLO ---")
    print(text)
    if args.out_dir:
        os.makedirs(args.out_dir, exist_ok=True)
        res.table.to_csv(os.path.join(args.out_dir, "montecarlo.csv"), index=False, float_format="%.12g")
    _write_json(args.json_metrics, res.report)
    if args.db:
        store.init_db(args.db)
        store.save_montecarlo_report(res.report, text, res.table.to_dict(orient="records"), db_path=args.db)
        print(f"✅ Report saved as {res.report['report_id']}")
    return EXIT_SCENARIO_FAILURE if res.report["summary"]["n_failed"] else EXIT_OK


def _print_checks(results) -> None:
    for r in results:
        mark = "✅" if r.passed else "❌"
        print(f"{mark} {r.name}: value={r.value:.3g} limit={r.limit:.3g} ({r.elapsed_s:.2f} s)")
        for k, v in r.detail.items():
            print(f"     {k}: {v}")


def cmd_selfcheck(args: argparse.Namespace) -> int:
    report = run_self_check(SelfCheckConfig(seed=args.seed))
    print("\n--- SELF-CHECK ---")
    _print_checks(report.results)
    _write_json(args.json_metrics, report.as_dict())
    return EXIT_OK if report.passed else EXIT_SELFCHECK_FAILURE


def cmd_p3p_roundtrip(args: argparse.Namespace) -> int:
    res = check_p3p_roundtrip(SelfCheckConfig(seed=args.seed), n_trials=args.trials)
    print("\n--- P3P ROUND TRIP ---")
    _print_checks([res])
    return EXIT_OK if res.passed else EXIT_SELFCHECK_FAILURE


def cmd_reports(args: argparse.Namespace) -> int:
    db = args.db or store.get_db_path()
    store.init_db(db)
    if args.report_id:
        rep = store.get_montecarlo_report(args.report_id, db_path=db)
        print(json.dumps(rep, indent=2) if rep else "(none)")
        return EXIT_OK
    rows = store.list_montecarlo_reports(limit=args.limit, db_path=db)
    print("\n--- MONTE CARLO REPORTS ---")
    if not rows:
        print("(none)")
    for r in rows:
        print(
            f"- {r['report_id']}: {r['scenario']} ({r['mission']}) runs={r['n_runs']} "
            f"failed={r['n_failed']} seed={r['seed_base']} at {r['created_at']}"
        )
    runs = store.list_runs(limit=args.limit, db_path=db)
    print("\n--- RUNS ---")
    if not runs:
        print("(none)")
    for r in runs:
        print(
            f"- {r['run_id']}: {r['scenario']} seed={r['seed']} docked={bool(r['docked'])} "
            f"aborted={bool(r['aborted'])} endpoint={r['endpoint_error_m']} at {r['created_at']}"
        )
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--out-dir", default=None, help="directory for CSV logs")
    common.add_argument("--quiet", action="store_true", help="warnings only, no progress bar")
    common.add_argument("--json-metrics", default=None, metavar="PATH", help="write a JSON summary")
    common.add_argument("--db", default=None, metavar="PATH", help="SQLite results store")

    parser = argparse.ArgumentParser(prog="proxops", description="Planar proximity-operations simulator")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", parents=[common], help="run one scenario")
    p.add_argument("config")
    p.add_argument("--seed", type=int, default=None, help="override the scenario seed")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("montecarlo", parents=[common], help="run a randomized batch")
    p.add_argument("config")
    p.add_argument("--runs", type=int, default=50)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=cmd_montecarlo)

    p = sub.add_parser("selfcheck", parents=[common], help="Jacobian, P3P, gating and covariance suites")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_selfcheck)

    p = sub.add_parser("p3p-roundtrip", parents=[common], help="P3P on random noiseless poses")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--trials", type=int, default=1000)
    p.set_defaults(func=cmd_p3p_roundtrip)

    p = sub.add_parser("reports", parents=[common], help="list saved runs and Monte Carlo reports")
    p.add_argument("report_id", nargs="?", default=None)
    p.add_argument("--limit", type=int, default=20)
    p.set_defaults(func=cmd_reports)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.WARNING if args.quiet else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"❌ Config error: {e}")
        return EXIT_CONFIG_ERROR


if __name__ == "__main__":
    sys.exit(main())
