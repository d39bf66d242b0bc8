"""Embedded ordered time-series store (write-ahead log + in-memory index)."""

from __future__ import annotations

import bisect
import enum
import struct
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path

from vitalstream.records import RecordLog, Truncation


class Metric(str, enum.Enum):
    ALERT = "ALERT"
    FATIGUE = "FATIGUE"
    RAW_POSTURE = "RAW_POSTURE"
    RAW_RRI = "RAW_RRI"
    RELAXATION = "RELAXATION"
    REPORT = "REPORT"


_METRIC_CODES = {m: i for i, m in enumerate(Metric)}
_CODE_METRICS = {i: m for m, i in _METRIC_CODES.items()}
_ROW_TAIL = struct.Struct("<BQQq")
ROW_VERSION = 1


class IntegrityError(Exception):
    """A key was written twice with different values."""


@dataclass(frozen=True, slots=True)
class Row:
    worker_id: str
    metric: Metric
    t_ms: int
    seq: int
    value: bytes
    written_at: int = field(default=0, compare=False)

    @property
    def key(self):
        return (self.worker_id, self.metric.value, self.t_ms, self.seq)


def encode_row(row: Row) -> bytes:
    w = row.worker_id.encode("utf-8")
    if not 0 < len(w) <= 255:
        raise ValueError("worker_id must be 1..255 utf-8 bytes")
    return (
        bytes([ROW_VERSION, len(w)])
        + w
        + _ROW_TAIL.pack(_METRIC_CODES[row.metric], row.t_ms, row.seq, row.written_at)
        + row.value
    )


def decode_row(data: bytes) -> Row:
    if data[0] != ROW_VERSION:
        raise ValueError(f"unknown row version {data[0]}")
    n = data[1]
    worker = data[2 : 2 + n].decode("utf-8")
    code, t_ms, seq, written_at = _ROW_TAIL.unpack_from(data, 2 + n)
    value = data[2 + n + _ROW_TAIL.size :]
    return Row(worker, _CODE_METRICS[code], t_ms, seq, bytes(value), written_at)


class TimeSeriesStore:
    """Durable rows keyed by ``(worker_id, metric, t_ms, seq)``.

    Every acknowledged put is on disk (fsynced per batch) before ``put`` or
    ``put_many`` returns. Opening an existing directory replays the log.
    """

    def __init__(self, directory, fsync: bool = True, clock=None, segment_bytes: int = 64 * 2**20):
        self.directory = Path(directory)
        self._log = RecordLog(self.directory, segment_bytes=segment_bytes, fsync=fsync)
        self._clock = clock or (lambda: int(time.time() * 1000))
        self._lock = threading.Lock()
        self._keys: list[tuple] = []
        self._rows: dict[tuple, Row] = {}
        self.recover()

    @property
    def truncation(self) -> Truncation | None:
        return self._log.truncation

    def recover(self):
        self._log.close()
        self._keys.clear()
        self._rows.clear()
        for _, payload in self._log.recover():
            row = decode_row(payload)
            if row.key not in self._rows:
                self._rows[row.key] = row
        self._keys = sorted(self._rows)
        return self

    def _check(self, row: Row, pending: dict) -> str:
        if not isinstance(row.metric, Metric):
            raise ValueError(f"unknown metric {row.metric!r}")
        if row.t_ms < 0 or row.seq < 0:
            raise ValueError("t_ms and seq must be non-negative")
        existing = pending.get(row.key) or self._rows.get(row.key)
        if existing is None:
            return "ok"
        if existing.value == row.value:
            return "duplicate"
        raise IntegrityError(f"key {row.key} already stored with a different value")

    def put(self, row: Row) -> str:
        return self.put_many([row])[0]

    def put_many(self, rows) -> list[str]:
        """Write rows as one durable batch. Conflicts abort the whole batch."""
        with self._lock:
            now = self._clock()
            pending: dict[tuple, Row] = {}
            results = []
            for row in rows:
                status = self._check(row, pending)
                results.append(status)
                if status == "ok":
                    pending[row.key] = Row(row.worker_id, row.metric, row.t_ms, row.seq, row.value, now)
            if pending:
                self._log.append([encode_row(r) for r in pending.values()])
                self._rows.update(pending)
                if len(pending) > 64:
                    self._keys = sorted(self._keys + list(pending))
                else:
                    for key in pending:
                        bisect.insort(self._keys, key)
            return results

    def scan(self, worker_id: str, metric, t_from: int, t_to: int) -> list[Row]:
        """Rows with ``t_from <= t_ms < t_to`` in ascending key order."""
        if t_from > t_to:
            raise ValueError(f"t_from ({t_from}) > t_to ({t_to})")
        metric = Metric(metric)
        with self._lock:
            lo = bisect.bisect_left(self._keys, (worker_id, metric.value, t_from))
            hi = bisect.bisect_left(self._keys, (worker_id, metric.value, t_to))
            return [self._rows[k] for k in self._keys[lo:hi]]

    def get(self, worker_id, metric, t_ms, seq) -> Row | None:
        return self._rows.get((worker_id, Metric(metric).value, t_ms, seq))

    def rows(self, metric=None) -> list[Row]:
        with self._lock:
            keys = list(self._keys)
        out = [self._rows[k] for k in keys]
        if metric is not None:
            metric = Metric(metric)
            out = [r for r in out if r.metric is metric]
        return out

    def workers(self) -> list[str]:
        return sorted({k[0] for k in self._keys})

    def __len__(self):
        return len(self._keys)

    def close(self):
        self._log.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
