"""Synthetic stand-in for a wearable ECG + 3-axis accelerometer shirt.

Streams are deterministic functions of a :class:`ScenarioScript` and carry
exact ground truth (R-peak times, posture intervals) for oracle tests.

Conventions
-----------
* Timestamps are integer milliseconds since scenario start; ``1000 / fs``
  must be an integer so sample spacing is exact (default ECG 250 Hz, accel
  25 Hz; the rates of the real device are not published, these are typical).
* Within each segment the first R-peak sits half a beat period after the
  segment start, then one per period while inside the segment.
* Posture changes are linearly interpolated over 3 s centred on the segment
  boundary.
"""

from __future__ import annotations

import csv
import json
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np

POSTURE_LABELS = ("UPRIGHT", "BENT", "LYING")
BENT_ANGLE_DEG = 70.0
GRAVITY = {
    "UPRIGHT": (0.0, 0.0, 1.0),
    "BENT": (math.sin(math.radians(BENT_ANGLE_DEG)), 0.0, math.cos(math.radians(BENT_ANGLE_DEG))),
    "LYING": (0.0, 1.0, 0.0),
}
TRANSITION_MS = 3000.0

QRS_AMPLITUDE_MV = 1.0
QRS_SIGMA_MS = 8.0  # FWHM ~19 ms
QRS_SUPPORT_SIGMAS = 6.0
# (amplitude mV, centre / RR, sigma / RR); compact support of 3 sigma
P_WAVE = (0.15, -0.20, 0.03)
T_WAVE = (0.30, 0.30, 0.05)
_BUMP_FLOOR = math.exp(-4.5)


class ScenarioError(ValueError):
    def __init__(self, field_name: str, message: str):
        self.field = field_name
        super().__init__(f"{field_name}: {message}")


class EcgSample(NamedTuple):
    t: int
    v: float


class AccelSample(NamedTuple):
    t: int
    ax: float
    ay: float
    az: float


@dataclass(frozen=True)
class Segment:
    duration_s: float
    heart_rate_bpm: float
    posture: str = "UPRIGHT"
    noise_sigma_mv: float = 0.0
    # beat-to-beat timing jitter (N(0, sd) per beat, clipped to a quarter period)
    rr_sd_ms: float = 0.0

    @property
    def period_ms(self) -> float:
        return 60000.0 / self.heart_rate_bpm


@dataclass(frozen=True)
class ScenarioScript:
    worker_id: str
    segments: tuple[Segment, ...]
    ecg_fs: float = 250.0
    accel_fs: float = 25.0
    rng_seed: int = 0
    accel_jitter_g: float = 0.02
    device_id: str = "sim-0"

    def validate(self) -> ScenarioScript:
        if not isinstance(self.worker_id, str) or not self.worker_id:
            raise ScenarioError("worker_id", "must be a non-empty string")
        for name in ("ecg_fs", "accel_fs"):
            fs = getattr(self, name)
            if not fs > 0:
                raise ScenarioError(name, f"must be > 0, got {fs}")
            step = 1000.0 / fs
            if abs(step - round(step)) > 1e-9:
                raise ScenarioError(name, f"1000/fs must be a whole number of ms, got {step}")
        if self.accel_jitter_g < 0:
            raise ScenarioError("accel_jitter_g", "must be >= 0")
        for i, seg in enumerate(self.segments):
            where = f"segments[{i}]"
            if not seg.duration_s > 0:
                raise ScenarioError(f"{where}.duration_s", f"must be > 0, got {seg.duration_s}")
            if not 30 <= seg.heart_rate_bpm <= 220:
                raise ScenarioError(f"{where}.heart_rate_bpm", f"must be in [30, 220], got {seg.heart_rate_bpm}")
            if seg.posture not in POSTURE_LABELS:
                raise ScenarioError(f"{where}.posture", f"must be one of {POSTURE_LABELS}, got {seg.posture!r}")
            if seg.noise_sigma_mv < 0:
                raise ScenarioError(f"{where}.noise_sigma_mv", "must be >= 0")
            if seg.rr_sd_ms < 0:
                raise ScenarioError(f"{where}.rr_sd_ms", "must be >= 0")
        return self

    @property
    def duration_ms(self) -> float:
        return sum(s.duration_s for s in self.segments) * 1000.0

    def boundaries_ms(self) -> np.ndarray:
        return np.concatenate([[0.0], np.cumsum([s.duration_s * 1000.0 for s in self.segments])])

    # -- serialization --

    def to_dict(self) -> dict:
        d = asdict(self)
        d["segments"] = [asdict(s) for s in self.segments]
        return d

    @classmethod
    def from_dict(cls, obj: dict) -> ScenarioScript:
        segs = []
        for i, raw in enumerate(obj.get("segments", [])):
            if isinstance(raw, (list, tuple)):
                if len(raw) < 4:
                    raise ScenarioError(f"segments[{i}]", "expected (duration_s, heart_rate_bpm, posture, noise_sigma_mv)")
                segs.append(Segment(*raw))
            elif isinstance(raw, dict):
                raw = dict(raw)
                if "posture_label" in raw:
                    raw["posture"] = raw.pop("posture_label")
                try:
                    segs.append(Segment(**raw))
                except TypeError as exc:
                    raise ScenarioError(f"segments[{i}]", str(exc)) from None
            else:
                raise ScenarioError(f"segments[{i}]", "must be an object or a list")
        kwargs = {k: v for k, v in obj.items() if k != "segments"}
        if "worker_id" not in kwargs:
            raise ScenarioError("worker_id", "missing")
        try:
            script = cls(segments=tuple(segs), **kwargs)
        except TypeError as exc:
            raise ScenarioError("scenario", str(exc)) from None
        return script.validate()

    @classmethod
    def load(cls, path) -> ScenarioScript:
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))

    def dump(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2), encoding="utf-8")


@dataclass
class GroundTruth:
    true_r_peaks: np.ndarray
    true_posture: list[tuple[int, int, str]] = field(default_factory=list)

    def bent_intervals(self):
        return [(a, b) for a, b, lab in self.true_posture if lab == "BENT"]


@dataclass
class EcgStream:
    t_ms: np.ndarray
    v_mv: np.ndarray
    fs: float

    def __len__(self):
        return len(self.t_ms)

    def __iter__(self):
        for t, v in zip(self.t_ms.tolist(), self.v_mv.tolist()):
            yield EcgSample(t, v)

    def between(self, t0, t1) -> EcgStream:
        lo, hi = np.searchsorted(self.t_ms, [t0, t1])
        return EcgStream(self.t_ms[lo:hi], self.v_mv[lo:hi], self.fs)


@dataclass
class AccelStream:
    t_ms: np.ndarray
    xyz: np.ndarray
    fs: float

    def __len__(self):
        return len(self.t_ms)

    def __iter__(self):
        for t, (x, y, z) in zip(self.t_ms.tolist(), self.xyz.tolist()):
            yield AccelSample(t, x, y, z)

    def between(self, t0, t1) -> AccelStream:
        lo, hi = np.searchsorted(self.t_ms, [t0, t1])
        return AccelStream(self.t_ms[lo:hi], self.xyz[lo:hi], self.fs)


def _rngs(script: ScenarioScript):
    beats, ecg_noise, accel = np.random.SeedSequence(script.rng_seed).spawn(3)
    return np.random.default_rng(beats), np.random.default_rng(ecg_noise), np.random.default_rng(accel)


def _sample_times(duration_ms: float, fs: float) -> np.ndarray:
    step = int(round(1000.0 / fs))
    n = int(math.floor(duration_ms / step + 1e-9))
    return np.arange(n, dtype=np.int64) * step


def beat_times(script: ScenarioScript, rng=None) -> np.ndarray:
    """R-peak times (ms, float) for every segment of ``script``."""
    if rng is None:
        rng = _rngs(script)[0]
    bounds = script.boundaries_ms()
    out = []
    for seg, start in zip(script.segments, bounds[:-1]):
        period = seg.period_ms
        n = max(0, math.ceil(seg.duration_s * seg.heart_rate_bpm / 60.0 - 0.5 - 1e-9))
        times = start + (np.arange(n) + 0.5) * period
        if seg.rr_sd_ms > 0 and n:
            jitter = np.clip(rng.normal(0.0, seg.rr_sd_ms, n), -0.25 * period, 0.25 * period)
            times = times + jitter
        out.append(times)
    return np.concatenate(out) if out else np.zeros(0)


def _bump(x: np.ndarray) -> np.ndarray:
    return np.maximum(0.0, np.exp(-0.5 * x * x) - _BUMP_FLOOR) / (1.0 - _BUMP_FLOOR)


def _neighbour_rr(beats: np.ndarray, script: ScenarioScript):
    """Preceding and following RR for each beat (own segment period at the ends)."""
    if len(beats) == 0:
        return beats, beats
    bounds = script.boundaries_ms()
    seg_idx = np.clip(np.searchsorted(bounds, beats, side="right") - 1, 0, len(script.segments) - 1)
    periods = np.array([script.segments[i].period_ms for i in seg_idx])
    diffs = np.diff(beats)
    rr_prev = np.concatenate([[periods[0]], diffs])
    rr_next = np.concatenate([diffs, [periods[-1]]])
    return rr_prev, rr_next


def ecg_waveform(t_ms, beats: np.ndarray, rr_prev: np.ndarray, rr_next: np.ndarray) -> np.ndarray:
    """Noise-free ECG (mV) at arbitrary times ``t_ms`` for the given beats."""
    t = np.asarray(t_ms, dtype=float)
    v = np.zeros_like(t)
    if t.size == 0:
        return v
    order = np.argsort(t, kind="stable")
    ts = t[order]
    acc = np.zeros_like(ts)

    def add(centre, sigma, amp, support, shape):
        lo, hi = np.searchsorted(ts, [centre - support, centre + support])
        if hi > lo:
            acc[lo:hi] += amp * shape((ts[lo:hi] - centre) / sigma)

    gauss = lambda x: np.exp(-0.5 * x * x)  # noqa: E731
    for b, rp, rn in zip(beats.tolist(), rr_prev.tolist(), rr_next.tolist()):
        add(b, QRS_SIGMA_MS, QRS_AMPLITUDE_MV, QRS_SUPPORT_SIGMAS * QRS_SIGMA_MS, gauss)
        amp, c, s = P_WAVE
        add(b + c * rp, s * rp, amp, 3 * s * rp, _bump)
        amp, c, s = T_WAVE
        add(b + c * rn, s * rn, amp, 3 * s * rn, _bump)
    v[order] = acc
    return v


def _posture_truth(script: ScenarioScript):
    bounds = script.boundaries_ms()
    return [
        (int(round(a)), int(round(b)), seg.posture)
        for seg, a, b in zip(script.segments, bounds[:-1], bounds[1:])
    ]


def generate_ecg(script: ScenarioScript) -> tuple[EcgStream, GroundTruth]:
    script.validate()
    beat_rng, noise_rng, _ = _rngs(script)
    beats = beat_times(script, beat_rng)
    t = _sample_times(script.duration_ms, script.ecg_fs)
    rr_prev, rr_next = _neighbour_rr(beats, script)
    v = ecg_waveform(t, beats, rr_prev, rr_next)
    if len(t) and any(s.noise_sigma_mv > 0 for s in script.segments):
        bounds = script.boundaries_ms()
        sig = np.array([s.noise_sigma_mv for s in script.segments])
        idx = np.clip(np.searchsorted(bounds, t, side="right") - 1, 0, len(sig) - 1)
        v = v + noise_rng.standard_normal(len(t)) * sig[idx]
    return EcgStream(t, v, script.ecg_fs), GroundTruth(beats, _posture_truth(script))


def generate_accel(script: ScenarioScript) -> tuple[AccelStream, GroundTruth]:
    script.validate()
    beat_rng, _, accel_rng = _rngs(script)
    t = _sample_times(script.duration_ms, script.accel_fs)
    truth = GroundTruth(beat_times(script, beat_rng), _posture_truth(script))
    if not script.segments:
        return AccelStream(t, np.zeros((0, 3)), script.accel_fs), truth
    bounds = script.boundaries_ms()
    durs = np.diff(bounds)
    knots_t = [0.0]
    knots_g = [GRAVITY[script.segments[0].posture]]
    for k in range(1, len(script.segments)):
        b = bounds[k]
        h = min(TRANSITION_MS / 2, 0.45 * durs[k - 1], 0.45 * durs[k])
        knots_t += [b - h, b + h]
        knots_g += [GRAVITY[script.segments[k - 1].posture], GRAVITY[script.segments[k].posture]]
    knots_t.append(bounds[-1])
    knots_g.append(GRAVITY[script.segments[-1].posture])
    kg = np.array(knots_g)
    xyz = np.column_stack([np.interp(t, knots_t, kg[:, a]) for a in range(3)])
    if script.accel_jitter_g > 0:
        xyz = xyz + accel_rng.normal(0.0, script.accel_jitter_g, xyz.shape)
    return AccelStream(t, xyz, script.accel_fs), truth


# -- replay -------------------------------------------------------------------


@dataclass
class EmitReport:
    ecg_count: int = 0
    accel_count: int = 0
    wall_s: float = 0.0
    error: str | None = None

    @property
    def aborted(self) -> bool:
        return self.error is not None


def emit(script: ScenarioScript, sink, speed_factor: float = math.inf) -> EmitReport:
    """Deliver samples to ``sink(sample)`` in timestamp order, paced.

    Wall-clock pacing is scenario time / ``speed_factor``; ``math.inf``
    delivers as fast as possible. ECG samples precede accel samples that share
    a timestamp. A raising sink aborts the replay; the report then carries
    the counts delivered so far and the error.
    """
    if not speed_factor > 0:
        raise ValueError("speed_factor must be > 0")
    ecg, _ = generate_ecg(script)
    acc, _ = generate_accel(script)
    report = EmitReport()
    start = time.perf_counter()
    paced = math.isfinite(speed_factor)
    e_t, e_v = ecg.t_ms.tolist(), ecg.v_mv.tolist()
    a_t, a_xyz = acc.t_ms.tolist(), acc.xyz.tolist()
    i = j = 0
    try:
        while i < len(e_t) or j < len(a_t):
            if j >= len(a_t) or (i < len(e_t) and e_t[i] <= a_t[j]):
                t, sample = e_t[i], EcgSample(e_t[i], e_v[i])
            else:
                x, y, z = a_xyz[j]
                t, sample = a_t[j], AccelSample(a_t[j], x, y, z)
            if paced:
                ahead = t / 1000.0 / speed_factor - (time.perf_counter() - start)
                if ahead > 0.002:
                    time.sleep(ahead)
            sink(sample)
            if isinstance(sample, EcgSample):
                i += 1
                report.ecg_count += 1
            else:
                j += 1
                report.accel_count += 1
    except Exception as exc:  # sink failure
        report.error = f"{type(exc).__name__}: {exc}"
    report.wall_s = time.perf_counter() - start
    return report


def write_csv(path, stream):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        if isinstance(stream, EcgStream):
            w.writerow(["t_ms", "v_mv"])
            w.writerows(zip(stream.t_ms.tolist(), stream.v_mv.tolist()))
        else:
            w.writerow(["t_ms", "ax_g", "ay_g", "az_g"])
            for t, row in zip(stream.t_ms.tolist(), stream.xyz.tolist()):
                w.writerow([t, *row])


def read_csv(path):
    """Load a CSV dump written by :func:`write_csv`."""
    with open(path, newline="", encoding="utf-8") as fh:
        header = next(csv.reader(fh))
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    t = data[:, 0].astype(np.int64)
    fs = 1000.0 / (t[1] - t[0]) if len(t) > 1 else 0.0
    if header == ["t_ms", "v_mv"]:
        return EcgStream(t, data[:, 1].copy(), fs)
    if header == ["t_ms", "ax_g", "ay_g", "az_g"]:
        return AccelStream(t, data[:, 1:4].copy(), fs)
    raise ValueError(f"unrecognized CSV header {header}")
