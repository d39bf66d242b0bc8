"""Upload path from the edge to the ingestion endpoint.

At-least-once: a batch that cannot be sent goes into a durable FIFO and is
retried with exponential backoff; the receiver deduplicates by
``(worker_id, stream, seq)``.
"""

from __future__ import annotations

import json
import logging
import os
import struct
import threading
import urllib.error
import urllib.request
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path

from vitalstream import wire
from vitalstream.events import Batch

log = logging.getLogger(__name__)

# Declared accounting model for shipping raw samples: 16-bit values.
RAW_SAMPLE_BYTES = {"ecg": 2, "accel": 6}


class LinkDown(ConnectionError):
    pass


class ServerBusy(Exception):
    """Retryable server-side failure (5xx)."""


class BatchRejected(Exception):
    """Non-retryable validation failure (4xx)."""


class CostLedger:
    """Raw-vs-sent byte counters; safe to update from several threads."""

    def __init__(self):
        self._lock = threading.Lock()
        self.raw_by_stream = {"ecg": 0, "accel": 0}
        self.sent_by_stream = {"rri": 0, "posture": 0, "overhead": 0}

    def observe_raw(self, stream: str, n_samples: int):
        with self._lock:
            self.raw_by_stream[stream] += RAW_SAMPLE_BYTES[stream] * int(n_samples)

    def record_upload(self, payload: bytes, batch: Batch):
        rri = len(batch.rri) * wire.RRI_RECORD_BYTES
        post = len(batch.posture) * wire.POSTURE_RECORD_BYTES
        with self._lock:
            self.sent_by_stream["rri"] += rri
            self.sent_by_stream["posture"] += post
            self.sent_by_stream["overhead"] += len(payload) - rri - post

    @property
    def raw_bytes(self) -> int:
        return sum(self.raw_by_stream.values())

    @property
    def sent_bytes(self) -> int:
        return sum(self.sent_by_stream.values())

    def to_dict(self) -> dict:
        with self._lock:
            return {
                "raw_bytes": self.raw_bytes,
                "sent_bytes": self.sent_bytes,
                "raw_by_stream": dict(self.raw_by_stream),
                "sent_by_stream": dict(self.sent_by_stream),
            }

    @classmethod
    def from_dict(cls, d: dict) -> CostLedger:
        led = cls()
        led.raw_by_stream.update(d.get("raw_by_stream") or {"ecg": d.get("raw_bytes", 0)})
        led.sent_by_stream.update(d.get("sent_by_stream") or {"overhead": d.get("sent_bytes", 0)})
        return led


def cost_report(ledger: CostLedger) -> dict:
    raw, sent = ledger.raw_bytes, ledger.sent_bytes
    return {
        "raw_bytes": raw,
        "sent_bytes": sent,
        "reduction_ratio": None if raw == 0 else 1.0 - sent / raw,
    }


_LEN = struct.Struct("<I")
_HEAD = struct.Struct("<Q")


class OfflineBuffer:
    """FIFO of encoded batches, optionally persisted.

    On disk: an append-only file of ``[u32 length][batch]`` records plus a
    ``.head`` file holding the byte offset of the first undelivered record.
    Capacity is counted in events; overflow evicts the oldest batches.
    """

    def __init__(self, path=None, capacity_events: int = 24 * 3600 * 5):
        self.capacity_events = capacity_events
        self.lost_events = 0
        self._q: deque[tuple[bytes, int]] = deque()
        self._events = 0
        self.path = Path(path) if path else None
        self._offsets: deque[int] = deque()
        if self.path is not None:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self._head_path = self.path.with_suffix(self.path.suffix + ".head")
            self._load()

    def _load(self):
        if not self.path.exists():
            self.path.touch()
        head = _HEAD.unpack(self._head_path.read_bytes())[0] if self._head_path.exists() else 0
        data = self.path.read_bytes()
        pos = head
        while pos + _LEN.size <= len(data):
            n = _LEN.unpack_from(data, pos)[0]
            if pos + _LEN.size + n > len(data):
                break  # torn tail
            payload = data[pos + _LEN.size : pos + _LEN.size + n]
            count = len(wire.decode_binary(payload))
            self._q.append((payload, count))
            self._offsets.append(pos)
            self._events += count
            pos += _LEN.size + n
        if pos != len(data):
            with open(self.path, "r+b") as fh:
                fh.truncate(pos)

    def __len__(self):
        return len(self._q)

    @property
    def events(self) -> int:
        return self._events

    def push(self, payload: bytes, n_events: int):
        while self._q and self._events + n_events > self.capacity_events:
            _, lost = self.pop()
            self.lost_events += lost
            log.warning("offline buffer full: evicted oldest batch (%d events, %d lost so far)", lost, self.lost_events)
        self._q.append((payload, n_events))
        self._events += n_events
        if self.path is not None:
            with open(self.path, "ab") as fh:
                self._offsets.append(fh.tell())
                fh.write(_LEN.pack(len(payload)) + payload)
                fh.flush()
                os.fsync(fh.fileno())

    def peek(self) -> bytes:
        return self._q[0][0]

    def pop(self) -> tuple[bytes, int]:
        payload, n = self._q.popleft()
        self._events -= n
        if self.path is not None:
            self._offsets.popleft()
            if self._q:
                head = self._offsets[0]
                tmp = self._head_path.with_suffix(".tmp")
                tmp.write_bytes(_HEAD.pack(head))
                os.replace(tmp, self._head_path)
            else:
                with open(self.path, "r+b") as fh:
                    fh.truncate(0)
                self._head_path.unlink(missing_ok=True)
        return payload, n


@dataclass
class OutageSchedule:
    """Link-down intervals ``[start_ms, end_ms)`` on the pipeline clock."""

    intervals: list[tuple[int, int]] = field(default_factory=list)

    def is_down(self, t_ms: int) -> bool:
        return any(a <= t_ms < b for a, b in self.intervals)


class InProcessLink:
    """Calls an ingestion handler directly; fails while the schedule says down."""

    def __init__(self, handler, clock, schedule: OutageSchedule | None = None):
        self.handler = handler
        self.clock = clock
        self.schedule = schedule or OutageSchedule()
        self.transmitted: list[bytes] = []

    def send(self, payload: bytes, content_type: str = "application/octet-stream") -> dict:
        if self.schedule.is_down(self.clock()):
            raise LinkDown("scheduled outage")
        self.transmitted.append(payload)
        status, body = self.handler(payload, content_type)
        return _interpret(status, body)


class HttpLink:
    """POSTs batches to a ``/v1/vitals`` endpoint."""

    def __init__(self, url: str, timeout: float = 5.0):
        self.url = url
        self.timeout = timeout

    def send(self, payload: bytes, content_type: str = "application/octet-stream") -> dict:
        req = urllib.request.Request(self.url, data=payload, method="POST", headers={"Content-Type": content_type})
        try:
            with urllib.request.urlopen(req, timeout=self.timeout) as resp:
                return _interpret(resp.status, json.loads(resp.read()))
        except urllib.error.HTTPError as exc:
            return _interpret(exc.code, json.loads(exc.read() or b"{}"))
        except (urllib.error.URLError, OSError) as exc:
            raise LinkDown(str(exc)) from exc


def _interpret(status: int, body: dict) -> dict:
    if status == 200:
        return body
    if status >= 500:
        raise ServerBusy(body.get("error", status))
    raise BatchRejected(body.get("error", status))


class Uploader:
    def __init__(
        self,
        link,
        clock,
        ledger: CostLedger | None = None,
        buffer: OfflineBuffer | None = None,
        base_backoff_ms: int = 1000,
        max_backoff_ms: int = 30_000,
    ):
        self.link = link
        self.clock = clock
        self.ledger = ledger or CostLedger()
        self.buffer = buffer if buffer is not None else OfflineBuffer()
        self.base_backoff_ms = base_backoff_ms
        self.max_backoff_ms = max_backoff_ms
        self.failures = 0
        self.next_attempt = 0
        self.acks: list[dict] = []
        self.rejected_batches = 0

    def _attempt(self, payload: bytes) -> bool:
        batch = wire.decode_binary(payload)
        try:
            ack = self.link.send(payload)
        except LinkDown:
            return self._backoff()
        except ServerBusy:
            self.ledger.record_upload(payload, batch)
            return self._backoff()
        except BatchRejected as exc:
            self.ledger.record_upload(payload, batch)
            self.rejected_batches += 1
            log.error("batch from %s rejected by server: %s", batch.worker_id, exc)
            return True
        self.ledger.record_upload(payload, batch)
        self.acks.append(ack)
        self.failures = 0
        return True

    def _backoff(self) -> bool:
        self.failures += 1
        delay = min(self.max_backoff_ms, self.base_backoff_ms * 2 ** (self.failures - 1))
        self.next_attempt = self.clock() + delay
        return False

    def upload(self, batch: Batch) -> dict | None:
        """Send ``batch`` now if possible; otherwise buffer it. Returns the ack."""
        payload = wire.encode_binary(batch)
        if not self.buffer and self.clock() >= self.next_attempt:
            n_acks = len(self.acks)
            if self._attempt(payload):
                return self.acks[-1] if len(self.acks) > n_acks else None
        self.buffer.push(payload, len(batch))
        self.pump()
        return None

    def pump(self) -> int:
        """Drain buffered batches in order while the link allows; return count sent."""
        sent = 0
        while self.buffer and self.clock() >= self.next_attempt:
            if not self._attempt(self.buffer.peek()):
                break
            self.buffer.pop()
            sent += 1
        return sent

    @property
    def idle(self) -> bool:
        return not self.buffer
