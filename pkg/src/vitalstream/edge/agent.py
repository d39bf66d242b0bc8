"""The per-worker edge agent (the phone)."""

from __future__ import annotations

import json
import sys
import threading
from dataclasses import dataclass, field

import numpy as np

from vitalstream import wire
from vitalstream.edge.detect import DetectorParams, StreamingPeakDetector
from vitalstream.edge.posture import DangerMonitor, PostureParams, PostureTracker
from vitalstream.edge.uplink import CostLedger, Uploader
from vitalstream.events import Alert, Batch, PostureEvent, RriEvent

MAX_EVENTS_PER_STREAM = 65535


@dataclass(frozen=True)
class EdgeConfig:
    detector: DetectorParams = field(default_factory=DetectorParams)
    posture: PostureParams = field(default_factory=PostureParams)
    upload_interval_s: float = 10.0
    detector_chunk_s: float = 5.0
    buffer_events: int = 24 * 3600 * 5


def peaks_to_rri(peaks, worker_id: str, first_seq: int = 1) -> list[RriEvent]:
    """One event per consecutive peak pair, stamped at the later peak."""
    peaks = list(peaks)
    for a, b in zip(peaks, peaks[1:]):
        if not b > a:
            raise ValueError(f"peaks must be strictly increasing ({a} then {b})")
    return [
        RriEvent(worker_id, b, wire.quantize_rri(b - a), first_seq + i)
        for i, (a, b) in enumerate(zip(peaks, peaks[1:]))
    ]


class AlertSink:
    """Writes one JSON line per alert to a text stream (stderr by default)."""

    def __init__(self, stream=None):
        self.stream = stream if stream is not None else sys.stderr
        self._lock = threading.Lock()

    def __call__(self, alert: Alert):
        with self._lock:
            self.stream.write(json.dumps(alert.to_json()) + "\n")
            self.stream.flush()


class EdgeAgent:
    """Extracts RRI and posture from raw streams and uploads them in batches.

    Dangerous-posture alerts are delivered through ``on_alert`` as soon as
    they are detected, independent of the upload link.
    """

    def __init__(
        self,
        worker_id: str,
        uploader: Uploader,
        ecg_fs: float = 250.0,
        device_id: str = "",
        config: EdgeConfig = EdgeConfig(),
        on_alert=None,
    ):
        self.worker_id = worker_id
        self.device_id = device_id
        self.config = config
        self.uploader = uploader
        self.ledger: CostLedger = uploader.ledger
        self.detector = StreamingPeakDetector(ecg_fs, config.detector, chunk_s=config.detector_chunk_s)
        self.tracker = PostureTracker(worker_id, config.posture)
        self.monitor = DangerMonitor(worker_id, config.posture, on_alert)
        self.produced_rri: list[RriEvent] = []
        self.produced_posture: list[PostureEvent] = []
        self._pending_rri: list[RriEvent] = []
        self._pending_posture: list[PostureEvent] = []
        self._last_peak = None
        self._rri_seq = 1
        self._interval_ms = int(config.upload_interval_s * 1000)
        self._next_upload = None

    @property
    def alerts(self) -> list[Alert]:
        return self.monitor.alerts

    def on_ecg(self, t_ms, v_mv):
        self.ledger.observe_raw("ecg", len(t_ms))
        self._take_peaks(self.detector.feed(t_ms, v_mv))

    def on_accel(self, t_ms, xyz):
        self.ledger.observe_raw("accel", len(t_ms))
        self._take_posture(self.tracker.feed(t_ms, xyz))

    def _take_peaks(self, peaks):
        if not peaks:
            return
        chain = ([self._last_peak] if self._last_peak is not None else []) + list(peaks)
        events = peaks_to_rri(chain, self.worker_id, self._rri_seq)
        self._rri_seq += len(events)
        self._last_peak = chain[-1]
        self.produced_rri += events
        self._pending_rri += events

    def _take_posture(self, events):
        for e in events:
            self.monitor.update(e)
            q = PostureEvent(e.worker_id, e.t, e.label, wire.quantize_tilt(e.tilt_deg), e.seq, e.quality)
            self.produced_posture.append(q)
            self._pending_posture.append(q)

    def tick(self, now: int):
        """Upload pending events once per upload interval; retry buffered ones."""
        if self._next_upload is None:
            self._next_upload = (now // self._interval_ms + 1) * self._interval_ms
        if now >= self._next_upload:
            self._next_upload = (now // self._interval_ms + 1) * self._interval_ms
            self._upload_pending()
        self.uploader.pump()

    def finish(self, now: int):
        """Flush detectors and the last posture window, then upload everything."""
        self._take_peaks(self.detector.flush())
        self._take_posture(self.tracker.flush())
        self._upload_pending()
        self.uploader.pump()

    def _upload_pending(self):
        rri, post = self._pending_rri, self._pending_posture
        self._pending_rri, self._pending_posture = [], []
        while rri or post:
            chunk_r, rri = rri[:MAX_EVENTS_PER_STREAM], rri[MAX_EVENTS_PER_STREAM:]
            chunk_p, post = post[:MAX_EVENTS_PER_STREAM], post[MAX_EVENTS_PER_STREAM:]
            self.uploader.upload(Batch(self.worker_id, self.device_id, tuple(chunk_r), tuple(chunk_p)))

    def feed_streams(self, ecg, accel, t0: int, t1: int):
        """Convenience: feed the ``[t0, t1)`` slice of whole recorded streams."""
        e = ecg.between(t0, t1)
        a = accel.between(t0, t1)
        if len(e):
            self.on_ecg(e.t_ms, e.v_mv)
        if len(a):
            self.on_accel(a.t_ms, np.asarray(a.xyz))
