"""Rest then load for one worker: fatigue and CVI per window, plus alerts.

Writes fatigue.svg and relaxation.svg next to the run's store.
"""

import argparse
import json
import tempfile
from pathlib import Path

from vitalstream.analysis import FATIGUE, RELAXATION
from vitalstream.pipeline import config_from_dict, run
from vitalstream.report import to_svg


def scenario(seed):
    rest = [(120, "UPRIGHT"), (12, "BENT"), (168, "UPRIGHT")]
    segs = [dict(duration_s=d, heart_rate_bpm=70, posture=p, noise_sigma_mv=0.03, rr_sd_ms=25.0) for d, p in rest]
    segs += [dict(duration_s=60, heart_rate_bpm=b, posture="UPRIGHT", noise_sigma_mv=0.03, rr_sd_ms=12.0)
             for b in (72, 74, 75, 77, 78)]
    return {"worker_id": "worker-1", "rng_seed": seed, "segments": segs}


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--seed", type=int, default=9)
    p.add_argument("--out", help="run directory (default: a fresh temp dir)")
    args = p.parse_args()
    out = Path(args.out) if args.out else Path(tempfile.mkdtemp(prefix="story-"))
    cfg = config_from_dict({"scenarios": [scenario(args.seed)], "store_dir": str(out / "run"),
                            "analysis": {"baseline_windows": 2}, "fsync": False, "alerts_sink": "stderr"})
    res = run(cfg)
    rows = {}
    for r in res.analyzer.emitted:
        rows.setdefault(r.window_start, {})[r.metric] = r
    print(f"{'minute':>6}{'phase':>7}{'fatigue':>10}{'cvi':>8}  quality")
    for start in sorted(rows):
        f, c = rows[start].get(FATIGUE), rows[start].get(RELAXATION)
        fv = "-" if f is None or f.value is None else f"{f.value:.2f}"
        cv = "-" if c is None or c.value is None else f"{c.value:.3f}"
        phase = "rest" if start < 300_000 else "load"
        print(f"{start // 60000:>6}{phase:>7}{fv:>10}{cv:>8}  {f.quality if f else ''}/{c.quality if c else ''}")
    print(json.dumps({k: res.summary[k] for k in ("alerts", "windows_emitted", "reduction_ratio")}))
    for metric in (FATIGUE, RELAXATION):
        series = [r for r in res.analyzer.emitted if r.metric == metric]
        (out / f"{metric.lower()}.svg").write_text(to_svg(series, metric.lower()), encoding="utf-8")
    print(f"charts in {out}")


if __name__ == "__main__":
    main()
