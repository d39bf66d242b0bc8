"""Micro-batch analysis of cleansed RRI: fatigue and relaxation (CVI).

Windows are epoch-aligned tumbling windows, configured per metric. A window
closes on the first tick at or after ``window_end + allowed_lateness``;
events for an already-closed window are only counted.

Relaxation is the cardiac vagal index from the Poincare (Lorenz) plot of
successive RRI pairs, ``log10(16 * SD1 * SD2)``. Fatigue is a one-sided,
baseline-relative blend of mean-RRI drop and RMSSD drop, scaled to 0-100.
It is an engineering index, not a validated clinical measure.
"""

from __future__ import annotations

import json
import logging
import math
from collections import defaultdict
from dataclasses import asdict, dataclass, field

from vitalstream import wire
from vitalstream.broker import Broker, Envelope, Topics
from vitalstream.store import Metric, Row, TimeSeriesStore

log = logging.getLogger(__name__)

FATIGUE = "FATIGUE"
RELAXATION = "RELAXATION"
DEGENERATE_EPS_MS = 1e-6


class Quality:
    OK = "OK"
    INSUFFICIENT_DATA = "INSUFFICIENT_DATA"
    DEGENERATE = "DEGENERATE"


@dataclass(frozen=True)
class WindowConfig:
    metric: str
    window_s: float = 60.0
    tick_s: float = 10.0
    allowed_lateness_s: float = 30.0
    min_events: int = 20

    def __post_init__(self):
        if self.metric not in (FATIGUE, RELAXATION):
            raise ValueError(f"metric must be FATIGUE or RELAXATION, got {self.metric!r}")
        if not self.window_s >= self.tick_s > 0:
            raise ValueError("need window_s >= tick_s > 0")
        if self.min_events < 3:
            raise ValueError("min_events must be >= 3")
        if self.allowed_lateness_s < 0:
            raise ValueError("allowed_lateness_s must be >= 0")

    @property
    def window_ms(self) -> int:
        return int(round(self.window_s * 1000))

    @property
    def tick_ms(self) -> int:
        return int(round(self.tick_s * 1000))

    @property
    def lateness_ms(self) -> int:
        return int(round(self.allowed_lateness_s * 1000))


@dataclass(frozen=True)
class Baseline:
    worker_id: str
    mean_rri_ms: float
    rmssd_ms: float
    established_over: int


@dataclass(frozen=True)
class AnalysisResult:
    worker_id: str
    metric: str
    window_start: int
    window_end: int
    value: float | None
    n_events: int
    quality: str
    reason: str | None = None

    def to_bytes(self) -> bytes:
        return json.dumps(asdict(self), separators=(",", ":"), sort_keys=True).encode("utf-8")

    @classmethod
    def from_bytes(cls, data: bytes) -> AnalysisResult:
        return cls(**json.loads(data))


def assign_window(t_ms: int, config: WindowConfig) -> int:
    w = config.window_ms
    return (int(t_ms) // w) * w


# -- statistics -------------------------------------------------------------


class PoincareAccumulator:
    """Single-pass (Welford) spread of successive RRI pairs along both axes.

    ``d = (x - y) / sqrt 2`` is the transverse coordinate, ``s = (x + y) / sqrt 2``
    the longitudinal one; SD1/SD2 are their population standard deviations.
    """

    def __init__(self):
        self.n = 0
        self._prev = None
        self._mean_d = self._m2_d = 0.0
        self._mean_s = self._m2_s = 0.0

    def push(self, rri: float):
        if self._prev is not None:
            x, y = self._prev, rri
            d = (x - y) / math.sqrt(2.0)
            s = (x + y) / math.sqrt(2.0)
            self.n += 1
            delta = d - self._mean_d
            self._mean_d += delta / self.n
            self._m2_d += delta * (d - self._mean_d)
            delta = s - self._mean_s
            self._mean_s += delta / self.n
            self._m2_s += delta * (s - self._mean_s)
        self._prev = rri

    @property
    def sd1(self) -> float:
        return math.sqrt(self._m2_d / self.n) if self.n else 0.0

    @property
    def sd2(self) -> float:
        return math.sqrt(self._m2_s / self.n) if self.n else 0.0


def poincare_sd(rri) -> tuple[float, float]:
    acc = PoincareAccumulator()
    for r in rri:
        acc.push(float(r))
    return acc.sd1, acc.sd2


def rmssd(rri) -> float:
    rri = [float(r) for r in rri]
    if len(rri) < 2:
        return 0.0
    return math.sqrt(math.fsum((b - a) ** 2 for a, b in zip(rri, rri[1:])) / (len(rri) - 1))


def _bounds(config: WindowConfig, window_start: int):
    return window_start, window_start + config.window_ms


def compute_cvi(rri_window, config: WindowConfig, worker_id: str = "", window_start: int = 0) -> AnalysisResult:
    rri = list(rri_window)
    start, end = _bounds(config, window_start)
    if len(rri) < config.min_events:
        return AnalysisResult(worker_id, RELAXATION, start, end, None, len(rri), Quality.INSUFFICIENT_DATA, "TOO_FEW_EVENTS")
    sd1, sd2 = poincare_sd(rri)
    if sd1 <= DEGENERATE_EPS_MS or sd2 <= DEGENERATE_EPS_MS:
        return AnalysisResult(worker_id, RELAXATION, start, end, None, len(rri), Quality.DEGENERATE, "ZERO_SPREAD")
    # L = 4 SD2, T = 4 SD1
    return AnalysisResult(worker_id, RELAXATION, start, end, math.log10(16.0 * sd1 * sd2), len(rri), Quality.OK)


@dataclass(frozen=True)
class FatigueWeights:
    mean_drop: float = 0.5
    rmssd_drop: float = 0.5


def fatigue_index(mean_w: float, rmssd_w: float, baseline: Baseline, weights: FatigueWeights = FatigueWeights()) -> float:
    mean_term = max(0.0, (baseline.mean_rri_ms - mean_w) / baseline.mean_rri_ms)
    rmssd_term = max(0.0, (baseline.rmssd_ms - rmssd_w) / baseline.rmssd_ms)
    return 100.0 * min(1.0, max(0.0, weights.mean_drop * mean_term + weights.rmssd_drop * rmssd_term))


def compute_fatigue(
    rri_window,
    baseline: Baseline | None,
    config: WindowConfig,
    worker_id: str = "",
    window_start: int = 0,
    weights: FatigueWeights = FatigueWeights(),
) -> AnalysisResult:
    rri = [float(r) for r in rri_window]
    start, end = _bounds(config, window_start)
    if baseline is None:
        return AnalysisResult(worker_id, FATIGUE, start, end, None, len(rri), Quality.INSUFFICIENT_DATA, "NO_BASELINE")
    if len(rri) < config.min_events:
        return AnalysisResult(worker_id, FATIGUE, start, end, None, len(rri), Quality.INSUFFICIENT_DATA, "TOO_FEW_EVENTS")
    mean_w = math.fsum(rri) / len(rri)
    value = fatigue_index(mean_w, rmssd(rri), baseline, weights)
    return AnalysisResult(worker_id, FATIGUE, start, end, value, len(rri), Quality.OK)


@dataclass(frozen=True)
class WindowStats:
    mean_rri_ms: float
    rmssd_ms: float
    n_events: int


def window_stats(rri) -> WindowStats:
    rri = [float(r) for r in rri]
    return WindowStats(math.fsum(rri) / len(rri), rmssd(rri), len(rri))


def establish_baseline(worker_id: str, windows: list[WindowStats], k: int = 5) -> Baseline | None:
    """Event-weighted baseline over the first ``k`` windows; None if fewer."""
    if len(windows) < k:
        return None
    used = windows[:k]
    total = sum(w.n_events for w in used)
    mean = math.fsum(w.mean_rri_ms * w.n_events for w in used) / total
    rm = math.fsum(w.rmssd_ms * w.n_events for w in used) / total
    return Baseline(worker_id, mean, rm, k)


# -- the micro-batch job ----------------------------------------------------


_STORE_METRIC = {FATIGUE: Metric.FATIGUE, RELAXATION: Metric.RELAXATION}


def default_windows() -> dict[str, WindowConfig]:
    return {FATIGUE: WindowConfig(FATIGUE), RELAXATION: WindowConfig(RELAXATION)}


@dataclass
class _WorkerState:
    windows: dict = field(default_factory=lambda: defaultdict(lambda: defaultdict(dict)))  # metric -> start -> seq -> (t, rri)
    closed: dict = field(default_factory=lambda: defaultdict(set))
    seen: set = field(default_factory=set)
    baseline_windows: list = field(default_factory=list)
    baseline: Baseline | None = None


class MicroBatchAnalyzer:
    """Consumes cleansed RRI events and emits one result per (worker, window, metric)."""

    SUBSCRIPTION = "analyzer"

    def __init__(
        self,
        windows: dict[str, WindowConfig] | None = None,
        store: TimeSeriesStore | None = None,
        broker: Broker | None = None,
        baseline_windows: int = 5,
        weights: FatigueWeights = FatigueWeights(),
    ):
        self.windows = windows or default_windows()
        self.store = store
        self.broker = broker
        self.baseline_k = baseline_windows
        self.weights = weights
        self._workers: dict[str, _WorkerState] = defaultdict(_WorkerState)
        self._next_tick = {m: None for m in self.windows}
        self._pending: list[AnalysisResult] = []
        self.emitted: list[AnalysisResult] = []
        self._emitted_keys: set = set()
        self.late_events = 0
        self.late_by_metric: dict[str, int] = defaultdict(int)
        self.sub = None

    def baseline(self, worker_id: str) -> Baseline | None:
        return self._workers[worker_id].baseline

    # event intake

    def add(self, worker_id: str, t_ms: int, rri_ms: float, seq: int):
        st = self._workers[worker_id]
        if seq in st.seen:
            return
        st.seen.add(seq)
        late = False
        for metric, cfg in self.windows.items():
            start = assign_window(t_ms, cfg)
            if start in st.closed[metric]:
                self.late_by_metric[metric] += 1
                late = True
                continue
            st.windows[metric][start][seq] = (t_ms, rri_ms)
        self.late_events += late

    def add_envelope(self, env: Envelope) -> list[AnalysisResult]:
        """Run ticks due strictly before the envelope's time, then take its events."""
        out = self.advance_to(env.ingested_at, inclusive=False)
        batch = wire.decode_binary(env.payload)
        for e in batch.rri:
            self.add(batch.worker_id, e.t, e.rri_ms, e.seq)
        return out

    # ticking

    def advance_to(self, now: int, inclusive: bool = True) -> list[AnalysisResult]:
        """Run every per-metric tick scheduled at or before ``now``."""
        due = []
        for metric, cfg in self.windows.items():
            nxt = self._next_tick[metric]
            if nxt is None:
                nxt = self._next_tick[metric] = 0
            while nxt < now or (inclusive and nxt == now):
                due.append((nxt, metric))
                nxt += cfg.tick_ms
            self._next_tick[metric] = nxt
        out = []
        for t, metric in sorted(due):
            out += self.tick(t, metrics=[metric])
        return out

    def tick(self, now: float, metrics=None) -> list[AnalysisResult]:
        """Close every window whose end plus allowed lateness is <= ``now``."""
        fresh = []
        for worker_id in sorted(self._workers):
            st = self._workers[worker_id]
            for metric in sorted(metrics or self.windows):
                cfg = self.windows[metric]
                ready = sorted(s for s in st.windows[metric] if s + cfg.window_ms + cfg.lateness_ms <= now)
                for start in ready:
                    events = st.windows[metric].pop(start)
                    st.closed[metric].add(start)
                    rri = [r for _, (t, r) in sorted(events.items(), key=lambda kv: (kv[1][0], kv[0]))]
                    fresh.append(self._compute(worker_id, metric, start, rri))
        return self._emit(self._pending + fresh)

    def flush(self) -> list[AnalysisResult]:
        return self.tick(math.inf)

    def _compute(self, worker_id, metric, start, rri) -> AnalysisResult:
        cfg = self.windows[metric]
        if metric == RELAXATION:
            return compute_cvi(rri, cfg, worker_id, start)
        st = self._workers[worker_id]
        if st.baseline is None and len(rri) >= cfg.min_events:
            stats = window_stats(rri)
            if stats.rmssd_ms > 0:
                st.baseline_windows.append(stats)
                st.baseline = establish_baseline(worker_id, st.baseline_windows, self.baseline_k)
        return compute_fatigue(rri, st.baseline, cfg, worker_id, start, self.weights)

    def _emit(self, results) -> list[AnalysisResult]:
        out, retry = [], []
        for res in results:
            key = (res.worker_id, res.window_start, res.metric)
            if key in self._emitted_keys:
                continue
            if self.store is not None:
                try:
                    self.store.put(Row(res.worker_id, _STORE_METRIC[res.metric], res.window_start, 0, res.to_bytes()))
                except OSError as exc:
                    log.warning("store write failed for %s, retrying next tick: %s", key, exc)
                    retry.append(res)
                    continue
            if self.broker is not None:
                self.broker.publish(Topics.ANALYZED, res.worker_id, res.to_bytes())
            self._emitted_keys.add(key)
            self.emitted.append(res)
            out.append(res)
        self._pending = retry
        return out

    # broker-driven operation

    def attach(self, from_seq: int = 1, name: str | None = SUBSCRIPTION):
        self.sub = self.broker.subscribe(Topics.CLEANSED, from_seq=from_seq, name=name)
        return self.sub

    def poll(self, max_messages: int = 10_000) -> list[AnalysisResult]:
        out = []
        for env in self.sub.poll(max_messages):
            out += self.add_envelope(env)
            self.sub.ack(env)
        return out


def replay_cleansed(envelopes, windows=None, baseline_windows: int = 5, weights: FatigueWeights = FatigueWeights()):
    """Re-run the analysis over a recorded CLEANSED log (no side effects)."""
    an = MicroBatchAnalyzer(windows, baseline_windows=baseline_windows, weights=weights)
    for env in envelopes:
        an.add_envelope(env)
    an.flush()
    return an.emitted
