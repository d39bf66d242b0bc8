"""Command-line entry point.

Exit codes: 0 success, 1 invalid input or config, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from vitalstream import report as report_mod
from vitalstream.edge.uplink import CostLedger, cost_report
from vitalstream.pipeline import ConfigError, load_config, replay, run
from vitalstream.sensors import ScenarioError, ScenarioScript, emit, generate_accel, generate_ecg, write_csv
from vitalstream.store import TimeSeriesStore

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2


class InputError(Exception):
    pass


def _store_dir(args) -> Path:
    if args.store_dir:
        return Path(args.store_dir)
    if args.config:
        return Path(load_config(args.config).store_dir)
    raise InputError("need --store-dir or --config")


def cmd_simulate(args, out) -> int:
    script = ScenarioScript.load(args.scenario)
    ecg, truth = generate_ecg(script)
    accel, _ = generate_accel(script)
    dest = Path(args.out)
    dest.mkdir(parents=True, exist_ok=True)
    write_csv(dest / "ecg.csv", ecg)
    write_csv(dest / "accel.csv", accel)
    gt = {"true_r_peaks": [float(t) for t in truth.true_r_peaks], "true_posture": [list(p) for p in truth.true_posture]}
    (dest / "truth.json").write_text(json.dumps(gt), encoding="utf-8")
    if args.speed_factor is not None:
        rep = emit(script, lambda s: None, args.speed_factor)
        wall = rep.wall_s
    else:
        wall = 0.0
    print(json.dumps({"ecg_samples": len(ecg), "accel_samples": len(accel), "r_peaks": len(truth.true_r_peaks),
                      "wall_s": round(wall, 3), "out": str(dest)}), file=out)
    return EXIT_OK


def cmd_run(args, out) -> int:
    cfg = load_config(args.config)
    result = run(cfg)
    print(json.dumps(result.summary, indent=2, sort_keys=True), file=out)
    return result.status


def cmd_report(args, out) -> int:
    root = _store_dir(args)
    if not (root / "store").is_dir():
        raise InputError(f"no store under {root}")
    t_to = args.t_to if args.t_to is not None else 2**62
    if args.t_from > t_to:
        raise InputError("--from must be <= --to")
    with TimeSeriesStore(root / "store", fsync=False) as store:
        results = report_mod.load_results(store, args.worker, args.metric, args.t_from, t_to)
    if args.format == "csv":
        text = report_mod.to_csv(results)
    else:
        text = report_mod.to_svg(results, f"{args.worker} {args.metric.lower()}")
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    else:
        out.write(text)
    return EXIT_OK


def _pct(ratio) -> str:
    return "n/a" if ratio is None else f"{100.0 * ratio:.2f}%"


def cost_table(doc: dict) -> str:
    """Per-worker and total raw/sent bytes from a ledger.json or run summary."""
    if "workers" in doc:
        rows = {w: cost_report(CostLedger.from_dict(d)) for w, d in doc["workers"].items()}
    elif "per_worker" in doc:
        rows = {w: d for w, d in doc["per_worker"].items()}
    elif "raw_bytes" in doc and "sent_bytes" in doc:
        rows = {"-": doc}
    else:
        raise InputError("not a ledger: expected 'workers', 'per_worker' or raw_bytes/sent_bytes")
    lines = [f"{'worker':<16}{'raw_bytes':>14}{'sent_bytes':>14}{'reduction':>12}"]
    raw_total = sent_total = 0
    for w in sorted(rows):
        raw, sent = int(rows[w]["raw_bytes"]), int(rows[w]["sent_bytes"])
        raw_total += raw
        sent_total += sent
        lines.append(f"{w:<16}{raw:>14}{sent:>14}{_pct(None if raw == 0 else 1 - sent / raw):>12}")
    total_ratio = None if raw_total == 0 else 1 - sent_total / raw_total
    lines.append(f"{'TOTAL':<16}{raw_total:>14}{sent_total:>14}{_pct(total_ratio):>12}")
    return "\n".join(lines) + "\n"


def cmd_cost(args, out) -> int:
    path = Path(args.ledger) if args.ledger else _store_dir(args) / "ledger.json"
    if not path.is_file():
        raise InputError(f"no ledger at {path}")
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise InputError(f"{path}: invalid JSON: {exc}") from None
    out.write(cost_table(doc))
    return EXIT_OK


def cmd_replay(args, out) -> int:
    res = replay(_store_dir(args))
    print(json.dumps(res, sort_keys=True), file=out)
    return EXIT_OK if res["identical"] else EXIT_RUNTIME


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="vitalstream", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="generate synthetic ECG/accel CSVs and ground truth")
    s.add_argument("--scenario", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--speed-factor", type=float, default=None, help="also emit the samples paced at this speed")
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("run", help="run the whole pipeline for a config")
    s.add_argument("--config", required=True)
    s.set_defaults(func=cmd_run)

    s = sub.add_parser("report", help="export a stored metric series")
    s.add_argument("--config")
    s.add_argument("--store-dir")
    s.add_argument("--worker", required=True)
    s.add_argument("--metric", required=True, choices=["FATIGUE", "RELAXATION", "fatigue", "relaxation"])
    s.add_argument("--from", dest="t_from", type=int, default=0)
    s.add_argument("--to", dest="t_to", type=int, default=None)
    s.add_argument("--format", choices=["csv", "svg"], default="csv")
    s.add_argument("--out")
    s.set_defaults(func=cmd_report)

    s = sub.add_parser("cost", help="print the raw vs sent byte table")
    s.add_argument("ledger", nargs="?", help="ledger.json or summary.json")
    s.add_argument("--config")
    s.add_argument("--store-dir")
    s.set_defaults(func=cmd_cost)

    s = sub.add_parser("replay", help="re-analyze a run's cleansed log and compare with stored results")
    s.add_argument("--config")
    s.add_argument("--store-dir")
    s.set_defaults(func=cmd_replay)
    return p


def main(argv=None, out=None) -> int:
    out = out or sys.stdout
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_INVALID
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr)
    try:
        return args.func(args, out)
    except (ConfigError, ScenarioError, InputError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except Exception as exc:
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
