"""Streaming R-peak detector accuracy across heart rates and noise levels."""

import argparse
import sys
import time
from pathlib import Path

import numpy as np

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "tests"))
from oracles import match_peaks  # noqa: E402

from vitalstream.edge.detect import StreamingPeakDetector  # noqa: E402
from vitalstream.sensors import ScenarioScript, Segment, generate_ecg  # noqa: E402


def detect(ecg, chunk=250):
    det = StreamingPeakDetector(ecg.fs)
    out = []
    for i in range(0, len(ecg.t_ms), chunk):
        out += det.feed(ecg.t_ms[i : i + chunk], ecg.v_mv[i : i + chunk])
    return out + det.flush()


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--duration", type=float, default=300.0)
    p.add_argument("--noise", type=float, nargs="+", default=[0.0, 0.1, 0.2])
    p.add_argument("--step", type=int, default=10)
    p.add_argument("--tol-ms", type=float, default=20.0)
    args = p.parse_args()
    print(f"{'bpm':>5}{'noise':>7}{'beats':>7}{'fp':>5}{'fn':>5}{'recall':>9}{'p95 err':>9}")
    t0 = time.perf_counter()
    for bpm in range(40, 181, args.step):
        for noise in args.noise:
            ecg, gt = generate_ecg(ScenarioScript("w", (Segment(args.duration, bpm, "UPRIGHT", noise),), rng_seed=bpm))
            tp, fp, fn, errs = match_peaks(detect(ecg), gt.true_r_peaks, args.tol_ms)
            n = len(gt.true_r_peaks)
            print(f"{bpm:>5}{noise:>7.2f}{n:>7}{fp:>5}{fn:>5}{tp / n:>9.4f}{np.percentile(errs, 95):>9.1f}")
    print(f"total {time.perf_counter() - t0:.1f} s")


if __name__ == "__main__":
    main()
