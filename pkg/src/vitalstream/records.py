"""Segmented append-only record log shared by the store and the broker.

Each record is ``[u32 length][u32 crc32][payload]`` (little-endian). Segment
files are named ``segment-%06d.log`` and are rolled once they exceed
``segment_bytes``.
"""

from __future__ import annotations

import logging
import os
import re
import struct
import threading
import zlib
from dataclasses import dataclass
from pathlib import Path

log = logging.getLogger(__name__)

_FRAME = struct.Struct("<II")
FRAME_OVERHEAD = _FRAME.size
_SEGMENT_RE = re.compile(r"^segment-(\d{6})\.log$")


def frame(payload: bytes) -> bytes:
    return _FRAME.pack(len(payload), zlib.crc32(payload)) + payload


@dataclass(frozen=True)
class Truncation:
    segment: int
    offset: int
    reason: str


def read_frames(data: bytes):
    """Yield ``(offset, payload)`` for valid frames; stop at the first bad one.

    Returns (via StopIteration value) the offset where reading stopped and why,
    or ``None`` when ``data`` was consumed exactly.
    """
    pos = 0
    n = len(data)
    while pos < n:
        if pos + FRAME_OVERHEAD > n:
            return pos, "torn header"
        length, crc = _FRAME.unpack_from(data, pos)
        end = pos + FRAME_OVERHEAD + length
        if end > n:
            return pos, "torn payload"
        payload = data[pos + FRAME_OVERHEAD : end]
        if zlib.crc32(payload) != crc:
            return pos, "checksum mismatch"
        yield pos, payload
        pos = end
    return None


class RecordLog:
    def __init__(self, directory, segment_bytes: int = 64 * 2**20, fsync: bool = True):
        self.directory = Path(directory)
        self.directory.mkdir(parents=True, exist_ok=True)
        self.segment_bytes = segment_bytes
        self.fsync = fsync
        self.truncation: Truncation | None = None
        self._lock = threading.Lock()
        self._fh = None
        self._sizes: dict[int, int] = {}

    def _path(self, index: int) -> Path:
        return self.directory / f"segment-{index:06d}.log"

    def segment_indices(self) -> list[int]:
        out = []
        for p in self.directory.iterdir():
            m = _SEGMENT_RE.match(p.name)
            if m:
                out.append(int(m.group(1)))
        return sorted(out)

    def recover(self):
        """Scan every segment; return list of ``(segment, payload)``.

        A bad frame ends recovery: its segment is truncated at the frame start
        and any later segments are set aside as ``*.corrupt``.
        """
        records = []
        self.truncation = None
        indices = self.segment_indices()
        for pos_i, index in enumerate(indices):
            path = self._path(index)
            data = path.read_bytes()
            gen = read_frames(data)
            while True:
                try:
                    _, payload = next(gen)
                except StopIteration as stop:
                    result = stop.value
                    break
                records.append((index, payload))
            if result is None:
                self._sizes[index] = len(data)
                continue
            offset, reason = result
            self.truncation = Truncation(index, offset, reason)
            log.warning("log %s truncated at %s:%d (%s)", self.directory, path.name, offset, reason)
            with open(path, "r+b") as fh:
                fh.truncate(offset)
                os.fsync(fh.fileno())
            self._sizes[index] = offset
            for later in indices[pos_i + 1 :]:
                self._path(later).rename(self._path(later).with_suffix(".corrupt"))
                self._sizes.pop(later, None)
            break
        return records

    def _active(self):
        if self._fh is None:
            indices = sorted(self._sizes) or self.segment_indices()
            index = indices[-1] if indices else 0
            self._sizes.setdefault(index, self._path(index).stat().st_size if self._path(index).exists() else 0)
            self._fh = open(self._path(index), "ab")
            self._active_index = index
        if self._sizes[self._active_index] >= self.segment_bytes:
            self._fh.close()
            self._active_index += 1
            self._sizes[self._active_index] = 0
            self._fh = open(self._path(self._active_index), "ab")
        return self._fh

    def append(self, payloads) -> int:
        """Durably append payloads as one batch; return the segment written."""
        blob = b"".join(frame(p) for p in payloads)
        with self._lock:
            fh = self._active()
            fh.write(blob)
            fh.flush()
            if self.fsync:
                os.fsync(fh.fileno())
            self._sizes[self._active_index] += len(blob)
            return self._active_index

    def total_bytes(self) -> int:
        return sum(self._sizes.values())

    def drop_oldest(self) -> int | None:
        """Delete the oldest non-active segment; return its index."""
        with self._lock:
            indices = sorted(self._sizes)
            active = getattr(self, "_active_index", indices[-1] if indices else None)
            if len(indices) < 2 or indices[0] == active:
                return None
            index = indices[0]
            self._path(index).unlink()
            del self._sizes[index]
            return index

    def close(self):
        with self._lock:
            if self._fh is not None:
                self._fh.close()
                self._fh = None
