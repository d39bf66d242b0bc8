"""Raw versus uploaded bytes for a single worker, by upload interval."""

import argparse
import tempfile
from pathlib import Path

from vitalstream.pipeline import config_from_dict, run


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--seconds", type=int, default=60)
    p.add_argument("--bpm", type=float, default=75.0)
    p.add_argument("--intervals", type=float, nargs="+", default=[1, 5, 10, 30])
    args = p.parse_args()
    scen = {"worker_id": "w1", "segments": [{"duration_s": args.seconds, "heart_rate_bpm": args.bpm, "posture": "UPRIGHT"}]}
    print(f"{'interval_s':>10}{'raw_B':>10}{'sent_B':>10}{'batches':>9}{'reduction':>11}")
    with tempfile.TemporaryDirectory() as d:
        for iv in args.intervals:
            cfg = config_from_dict({"scenarios": [scen], "store_dir": str(Path(d) / f"i{iv}"), "fsync": False,
                                    "alerts_sink": None, "edge": {"upload_interval_s": iv}})
            res = run(cfg)
            s = res.summary
            n = len(res.links["w1"].transmitted)
            print(f"{iv:>10g}{s['raw_bytes']:>10}{s['sent_bytes']:>10}{n:>9}{100 * s['reduction_ratio']:>10.2f}%")


if __name__ == "__main__":
    main()
