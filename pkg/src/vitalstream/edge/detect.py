"""R-peak detection: a simplified Pan-Tompkins pipeline.

band-pass (difference of two centred moving averages, ~5-15 Hz)
-> derivative -> square -> 150 ms moving-window integration
-> adaptive threshold over integrator peaks (signal/noise running estimates,
   threshold = noise + 0.25 * (signal - noise)) with a 200 ms refractory period
   and a half-threshold search-back for long gaps
-> each detection refined to the raw-signal maximum within +/-50 ms.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import uniform_filter1d
from scipy.signal import find_peaks

# A length-N moving average has its -3 dB point near 0.443 * fs / N.
_MA_CUTOFF = 0.443


class DetectionError(ValueError):
    pass


@dataclass(frozen=True)
class DetectorParams:
    low_cut_hz: float = 5.0
    high_cut_hz: float = 15.0
    integration_ms: float = 150.0
    refractory_ms: float = 200.0
    threshold_fraction: float = 0.25
    refine_ms: float = 50.0
    learning_s: float = 2.0
    searchback_factor: float = 1.66
    min_window_s: float = 2.0


def _odd(n: float) -> int:
    n = max(1, int(round(n)))
    return n if n % 2 else n + 1


def integrated_energy(v: np.ndarray, fs: float, params: DetectorParams = DetectorParams()) -> np.ndarray:
    """The moving-window-integrated squared slope of the band-passed signal."""
    x = np.asarray(v, dtype=float)
    short = _odd(_MA_CUTOFF * fs / params.high_cut_hz)
    long_ = _odd(_MA_CUTOFF * fs / params.low_cut_hz)
    band = uniform_filter1d(x, short, mode="nearest") - uniform_filter1d(x, long_, mode="nearest")
    slope = np.gradient(band) * fs
    return uniform_filter1d(slope * slope, _odd(params.integration_ms * fs / 1000.0), mode="nearest")


def _check(t_ms: np.ndarray, fs: float, params: DetectorParams):
    if fs <= 0:
        raise DetectionError("fs must be > 0")
    step = 1000.0 / fs
    if len(t_ms) * step < params.min_window_s * 1000.0:
        raise DetectionError(f"window of {len(t_ms) * step:.0f} ms is shorter than {params.min_window_s} s")
    d = np.diff(t_ms)
    if d.size and (np.abs(d - step) > 1e-6).any():
        raise DetectionError(f"samples are not uniformly spaced at {step} ms")


@dataclass
class ThresholdState:
    """Running signal/noise peak estimates carried across chunks."""

    signal: float
    noise: float
    rr_ms: list = field(default_factory=list)
    last_peak_ms: float | None = None
    # (t_ms, value) of integrator peaks classed as noise since the last beat
    noise_since_peak: list = field(default_factory=list)

    @classmethod
    def learn(cls, mwi: np.ndarray, fs: float, params: DetectorParams) -> ThresholdState:
        head = mwi[: max(1, int(params.learning_s * fs))]
        return cls(signal=head.max() / 3.0, noise=head.mean() / 2.0)

    def threshold(self, fraction: float) -> float:
        return self.noise + fraction * (self.signal - self.noise)

    def _accept(self, t, value, weight):
        self.signal = weight * value + (1 - weight) * self.signal
        if self.last_peak_ms is not None:
            self.rr_ms.append(t - self.last_peak_ms)
            del self.rr_ms[:-8]
        self.last_peak_ms = t
        self.noise_since_peak.clear()


def _classify(times, values, state: ThresholdState, params: DetectorParams) -> list[float]:
    """Feed integrator peaks (in time order) through the adaptive threshold."""
    frac = params.threshold_fraction
    accepted = []
    for t, value in zip(times, values):
        if state.rr_ms and state.noise_since_peak:
            gap_limit = params.searchback_factor * (sum(state.rr_ms) / len(state.rr_ms))
            if t - state.last_peak_ms > gap_limit:
                bt, bv = max(state.noise_since_peak, key=lambda c: c[1])
                if bv > 0.5 * state.threshold(frac) and bt - state.last_peak_ms >= params.refractory_ms:
                    state._accept(bt, bv, 0.25)
                    accepted.append(bt)
        if state.last_peak_ms is not None and t - state.last_peak_ms < params.refractory_ms:
            continue
        if value > state.threshold(frac):
            state._accept(t, value, 0.125)
            accepted.append(t)
        else:
            state.noise = 0.125 * value + 0.875 * state.noise
            state.noise_since_peak.append((t, value))
    return accepted


def _candidates(mwi: np.ndarray, fs: float, params: DetectorParams) -> np.ndarray:
    if not np.any(mwi > 0):
        return np.zeros(0, dtype=np.int64)
    refractory = max(1, int(round(params.refractory_ms * fs / 1000.0)))
    # zero-pad the tail so a beat cut off by the end of the record is still a peak
    idx = find_peaks(np.append(mwi, 0.0), distance=refractory)[0]
    return idx[idx < len(mwi)]


def _refine(t_ms: np.ndarray, v: np.ndarray, peak_times, params: DetectorParams) -> list[int]:
    """Snap each detection to the raw maximum within +/- refine_ms."""
    out = []
    for t in peak_times:
        lo = np.searchsorted(t_ms, t - params.refine_ms, side="left")
        hi = np.searchsorted(t_ms, t + params.refine_ms, side="right")
        if hi <= lo:
            peak = int(t)
        else:
            peak = int(t_ms[lo + int(np.argmax(v[lo:hi]))])
        if not out or peak - out[-1] >= params.refractory_ms:
            out.append(peak)
    return out


def detect_r_peaks(t_ms, v_mv, fs: float, params: DetectorParams = DetectorParams()) -> np.ndarray:
    """Timestamps (ms) of R-peaks in one contiguous, uniformly sampled window."""
    t_ms = np.asarray(t_ms, dtype=np.int64)
    v = np.asarray(v_mv, dtype=float)
    _check(t_ms, fs, params)
    mwi = integrated_energy(v, fs, params)
    cands = _candidates(mwi, fs, params)
    if cands.size == 0:
        return np.zeros(0, dtype=np.int64)
    state = ThresholdState.learn(mwi, fs, params)
    found = _classify(t_ms[cands].tolist(), mwi[cands].tolist(), state, params)
    return np.asarray(_refine(t_ms, v, found, params), dtype=np.int64)


class StreamingPeakDetector:
    """Chunked, stateful version of :func:`detect_r_peaks` for a live stream.

    The band-pass/integration front end is recomputed over each chunk plus
    ``history`` of earlier signal; the adaptive threshold state carries over,
    so each integrator peak is classified exactly once. Peaks become final once
    ``margin_s`` of signal beyond them has been seen.
    """

    def __init__(self, fs: float, params: DetectorParams = DetectorParams(), chunk_s: float = 5.0, margin_s: float = 1.0):
        self.fs = fs
        self.params = params
        self.step = int(round(1000.0 / fs))
        self.chunk_ms = int(chunk_s * 1000)
        self.margin_ms = int(margin_s * 1000)
        self.history_ms = max(int(params.min_window_s * 1000), self.margin_ms) + 1000
        self._t = np.zeros(0, dtype=np.int64)
        self._v = np.zeros(0)
        self._committed = None
        self._state: ThresholdState | None = None
        self._last_peak = None

    def feed(self, t_ms, v_mv) -> list[int]:
        t_ms = np.asarray(t_ms, dtype=np.int64)
        if t_ms.size == 0:
            return []
        if len(self._t) and t_ms[0] != self._t[-1] + self.step:
            raise DetectionError("stream is not contiguous")
        self._t = np.concatenate([self._t, t_ms])
        self._v = np.concatenate([self._v, np.asarray(v_mv, dtype=float)])
        if self._committed is None:
            self._committed = int(self._t[0])
        out = []
        while self._end() - self._committed >= self.chunk_ms + self.margin_ms:
            out += self._run(self._end() - self.margin_ms)
        return out

    def flush(self) -> list[int]:
        if self._committed is None or len(self._t) * self.step < self.params.min_window_s * 1000:
            return []
        return self._run(self._end())

    def _end(self) -> int:
        return int(self._t[-1]) + self.step if len(self._t) else 0

    def _run(self, commit_to: int) -> list[int]:
        t, v = self._t, self._v
        found: list[int] = []
        if len(t) * self.step >= self.params.min_window_s * 1000:
            mwi = integrated_energy(v, self.fs, self.params)
            if self._state is None:
                self._state = ThresholdState.learn(mwi, self.fs, self.params)
            cands = _candidates(mwi, self.fs, self.params)
            ct = t[cands]
            keep = (ct >= self._committed) & (ct < commit_to)
            hits = _classify(ct[keep].tolist(), mwi[cands][keep].tolist(), self._state, self.params)
            for p in _refine(t, v, hits, self.params):
                if self._last_peak is not None and p - self._last_peak < self.params.refractory_ms:
                    continue
                found.append(p)
                self._last_peak = p
        self._committed = commit_to
        cut = np.searchsorted(self._t, commit_to - self.history_ms)
        self._t, self._v = self._t[cut:], self._v[cut:]
        return found
