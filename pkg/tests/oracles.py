"""Independent reference implementations used as test oracles.

These are deliberately naive (two-pass, direct formulas, brute force) and
share no code with the package.
"""

import math

import numpy as np


def poincare_two_pass(rri):
    x = np.asarray(rri[:-1], dtype=float)
    y = np.asarray(rri[1:], dtype=float)
    d = (x - y) / math.sqrt(2.0)
    s = (x + y) / math.sqrt(2.0)
    sd1 = math.sqrt(sum((v - d.mean()) ** 2 for v in d) / len(d))
    sd2 = math.sqrt(sum((v - s.mean()) ** 2 for v in s) / len(s))
    return sd1, sd2


def cvi_two_pass(rri):
    sd1, sd2 = poincare_two_pass(rri)
    return math.log10((4 * sd2) * (4 * sd1))


def rmssd_direct(rri):
    diffs = np.diff(np.asarray(rri, dtype=float))
    return math.sqrt(float(np.mean(diffs**2)))


def fatigue_direct(mean_w, rmssd_w, mean_b, rmssd_b):
    a = max(0.0, (mean_b - mean_w) / mean_b)
    b = max(0.0, (rmssd_b - rmssd_w) / rmssd_b)
    return 100.0 * min(1.0, max(0.0, 0.5 * a + 0.5 * b))


def match_peaks(detected, truth, tol_ms):
    """Greedy one-to-one matching; returns (tp, fp, fn, errors)."""
    detected = sorted(float(d) for d in detected)
    truth = sorted(float(t) for t in truth)
    used = [False] * len(detected)
    errs = []
    j0 = 0
    for t in truth:
        best = None
        for j in range(j0, len(detected)):
            if detected[j] > t + tol_ms:
                break
            if not used[j] and abs(detected[j] - t) <= tol_ms and (best is None or abs(detected[j] - t) < abs(detected[best] - t)):
                best = j
        if best is not None:
            used[best] = True
            errs.append(abs(detected[best] - t))
        while j0 < len(detected) and detected[j0] < t - tol_ms:
            j0 += 1
    tp = len(errs)
    return tp, len(detected) - tp, len(truth) - tp, errs


def brute_scan(rows, worker, metric, t_from, t_to):
    return sorted(
        (r for r in rows if r[0] == worker and r[1] == metric and t_from <= r[2] < t_to),
        key=lambda r: r[:4],
    )
