"""Posture from torso acceleration, and the dangerous-posture monitor."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from vitalstream.events import Alert, Posture, PostureEvent


@dataclass(frozen=True)
class PostureParams:
    window_ms: int = 1000
    upright_max_deg: float = 20.0
    lying_min_deg: float = 75.0
    motion_threshold_g: float = 0.08
    min_gravity_g: float = 0.5
    hysteresis_windows: int = 2
    hold_s: float = 10.0
    rearm_s: float = 5.0


@dataclass
class PostureState:
    """Per-worker classifier state: confirmed label plus a pending candidate."""

    worker_id: str
    next_seq: int = 1
    label: Posture | None = None
    candidate: Posture | None = None
    candidate_count: int = 0


def tilt_deg(g) -> float:
    """Angle between a gravity estimate and the torso cranial (z) axis."""
    gx, gy, gz = (float(c) for c in g)
    norm = math.sqrt(gx * gx + gy * gy + gz * gz)
    if norm == 0.0:
        return 0.0
    return math.degrees(math.acos(max(-1.0, min(1.0, gz / norm))))


def instantaneous_posture(xyz: np.ndarray, params: PostureParams = PostureParams()):
    """Label one window without hysteresis. Returns (label, tilt_deg, quality)."""
    xyz = np.asarray(xyz, dtype=float).reshape(-1, 3)
    if xyz.shape[0] == 0:
        raise ValueError("empty accelerometer window")
    g = xyz.mean(axis=0)
    tilt = tilt_deg(g)
    if float(np.linalg.norm(g)) < params.min_gravity_g:
        return Posture.DYNAMIC, tilt, "low_gravity"
    energy = float(np.linalg.norm(np.diff(xyz, axis=0), axis=1).mean()) if xyz.shape[0] > 1 else 0.0
    if energy > params.motion_threshold_g:
        return Posture.DYNAMIC, tilt, "ok"
    if tilt < params.upright_max_deg:
        return Posture.UPRIGHT, tilt, "ok"
    if tilt >= params.lying_min_deg:
        return Posture.LYING, tilt, "ok"
    # 20-75 deg: forward lean is BENT; a backward recline is grouped with LYING
    return (Posture.BENT if g[0] > 0 else Posture.LYING), tilt, "ok"


def classify_posture(t_ms: int, xyz, state: PostureState, params: PostureParams = PostureParams()) -> PostureEvent:
    """Classify the window starting at ``t_ms`` and advance ``state``.

    The confirmed label only changes once a new label has been seen in
    ``hysteresis_windows`` consecutive windows; the very first window is
    adopted as-is.
    """
    raw, tilt, quality = instantaneous_posture(xyz, params)
    if state.label is None or params.hysteresis_windows <= 1:
        state.label = raw
        state.candidate, state.candidate_count = None, 0
    elif raw == state.label:
        state.candidate, state.candidate_count = None, 0
    else:
        if raw == state.candidate:
            state.candidate_count += 1
        else:
            state.candidate, state.candidate_count = raw, 1
        if state.candidate_count >= params.hysteresis_windows:
            state.label = raw
            state.candidate, state.candidate_count = None, 0
    event = PostureEvent(state.worker_id, int(t_ms), state.label, tilt, state.next_seq, quality)
    state.next_seq += 1
    return event


class PostureTracker:
    """Cuts an accelerometer stream into epoch-aligned windows and classifies each."""

    def __init__(self, worker_id: str, params: PostureParams = PostureParams()):
        self.params = params
        self.state = PostureState(worker_id)
        self._window = None
        self._t: list[np.ndarray] = []
        self._xyz: list[np.ndarray] = []

    def feed(self, t_ms, xyz) -> list[PostureEvent]:
        t_ms = np.asarray(t_ms, dtype=np.int64)
        xyz = np.asarray(xyz, dtype=float).reshape(-1, 3)
        w = self.params.window_ms
        out = []
        starts = (t_ms // w) * w
        i = 0
        while i < len(t_ms):
            j = int(np.searchsorted(starts, starts[i], side="right"))
            if self._window is not None and starts[i] != self._window:
                out += self.flush()
            self._window = int(starts[i])
            self._t.append(t_ms[i:j])
            self._xyz.append(xyz[i:j])
            i = j
        return out

    def flush(self) -> list[PostureEvent]:
        if self._window is None or not self._xyz:
            return []
        event = classify_posture(self._window, np.concatenate(self._xyz), self.state, self.params)
        self._window, self._t, self._xyz = None, [], []
        return [event]


class DangerMonitor:
    """Raises one alert per sustained BENT episode.

    An alert fires when BENT windows have covered ``hold_s``; the monitor
    re-arms only after ``rearm_s`` of UPRIGHT. Alerts go straight to the local
    ``on_alert`` callback and never touch the network path.
    """

    def __init__(self, worker_id: str, params: PostureParams = PostureParams(), on_alert=None):
        self.worker_id = worker_id
        self.hold_ms = int(params.hold_s * 1000)
        self.rearm_ms = int(params.rearm_s * 1000)
        self.window_ms = params.window_ms
        self.on_alert = on_alert
        self.armed = True
        self.alerts: list[Alert] = []
        self._bent_since = None
        self._upright_since = None

    def update(self, event: PostureEvent) -> Alert | None:
        end = event.t + self.window_ms
        if event.label is Posture.BENT:
            self._upright_since = None
            if self._bent_since is None:
                self._bent_since = event.t
            held = end - self._bent_since
            if self.armed and held >= self.hold_ms:
                self.armed = False
                alert = Alert(self.worker_id, end, held)
                self.alerts.append(alert)
                if self.on_alert is not None:
                    self.on_alert(alert)
                return alert
            return None
        self._bent_since = None
        if event.label is Posture.UPRIGHT:
            if self._upright_since is None:
                self._upright_since = event.t
            if not self.armed and end - self._upright_since >= self.rearm_ms:
                self.armed = True
        else:
            self._upright_since = None
        return None


def danger_monitor(events, params: PostureParams = PostureParams(), on_alert=None) -> list[Alert]:
    """Run a fresh :class:`DangerMonitor` over one worker's posture events."""
    events = list(events)
    if not events:
        return []
    mon = DangerMonitor(events[0].worker_id, params, on_alert)
    for e in events:
        mon.update(e)
    return mon.alerts
