"""Upload wire formats.

Two interconvertible encodings of the same batch schema:

JSON (the ``/v1/vitals`` request body)::

    {"worker_id": "w1", "device_id": "d1",
     "streams": {"rri": [{"t_ms": N, "rri_ms": R, "seq": S}],
                 "posture": [{"t_ms": N, "label": "UPRIGHT", "tilt_deg": T, "seq": S}]}}

Binary (cost accounting, offline buffer, store payloads), little-endian::

    u8 version | u8 len + worker_id utf-8 | u8 len + device_id utf-8
    u16 n_rri | u16 n_posture
    n_rri     x (u32 seq, u32 t_ms, u32 rri_us)          12 bytes each
    n_posture x (u32 seq, u32 t_ms, u8 label, u16 tilt_cdeg)  11 bytes each

The binary form quantizes ``rri_ms`` to 1 microsecond and ``tilt_deg`` to
0.01 degree. Producers emit values already on that grid, so the two forms
round-trip losslessly.
"""

from __future__ import annotations

import json
import math
import struct

from vitalstream.events import Batch, Posture, PostureEvent, RriEvent

VERSION = 1
_HEADER_COUNTS = struct.Struct("<HH")
_RRI = struct.Struct("<III")
_POSTURE = struct.Struct("<IIBH")
_LABEL_CODES = {p: i for i, p in enumerate(Posture)}
_CODE_LABELS = {i: p for p, i in _LABEL_CODES.items()}
_U32_MAX = 2**32 - 1

RRI_RECORD_BYTES = _RRI.size
POSTURE_RECORD_BYTES = _POSTURE.size


class WireError(ValueError):
    """Malformed batch. ``problems`` lists (field path, message) pairs."""

    def __init__(self, problems):
        self.problems = list(problems)
        super().__init__("; ".join(f"{f}: {m}" for f, m in self.problems))


def quantize_tilt(tilt_deg: float) -> float:
    return round(tilt_deg * 100) / 100


def quantize_rri(rri_ms: float) -> float:
    return round(rri_ms * 1000) / 1000


# -- binary -----------------------------------------------------------------


def _put_str(out: bytearray, s: str, name: str):
    raw = s.encode("utf-8")
    if len(raw) > 255:
        raise WireError([(name, "longer than 255 bytes")])
    out.append(len(raw))
    out += raw


def _check_u32(value, name):
    if not 0 <= value <= _U32_MAX:
        raise WireError([(name, f"{value} does not fit in u32")])


def encode_binary(batch: Batch) -> bytes:
    out = bytearray([VERSION])
    _put_str(out, batch.worker_id, "worker_id")
    _put_str(out, batch.device_id, "device_id")
    out += _HEADER_COUNTS.pack(len(batch.rri), len(batch.posture))
    for e in batch.rri:
        _check_u32(e.seq, "rri.seq")
        _check_u32(e.t, "rri.t_ms")
        rri_us = round(e.rri_ms * 1000)
        _check_u32(rri_us, "rri.rri_ms")
        out += _RRI.pack(e.seq, e.t, rri_us)
    for e in batch.posture:
        _check_u32(e.seq, "posture.seq")
        _check_u32(e.t, "posture.t_ms")
        out += _POSTURE.pack(e.seq, e.t, _LABEL_CODES[e.label], round(e.tilt_deg * 100))
    return bytes(out)


def _take_str(buf: memoryview, pos: int, name: str) -> tuple[str, int]:
    if pos >= len(buf):
        raise WireError([(name, "truncated")])
    n = buf[pos]
    end = pos + 1 + n
    if end > len(buf):
        raise WireError([(name, "truncated")])
    try:
        return bytes(buf[pos + 1 : end]).decode("utf-8"), end
    except UnicodeDecodeError as exc:
        raise WireError([(name, f"invalid utf-8: {exc}")]) from None


def decode_binary(data: bytes) -> Batch:
    buf = memoryview(data)
    if len(buf) < 1 or buf[0] != VERSION:
        raise WireError([("version", "unsupported or missing version byte")])
    worker_id, pos = _take_str(buf, 1, "worker_id")
    device_id, pos = _take_str(buf, pos, "device_id")
    if not worker_id:
        raise WireError([("worker_id", "missing")])
    if pos + _HEADER_COUNTS.size > len(buf):
        raise WireError([("streams", "truncated header")])
    n_rri, n_post = _HEADER_COUNTS.unpack_from(buf, pos)
    pos += _HEADER_COUNTS.size
    expected = pos + n_rri * _RRI.size + n_post * _POSTURE.size
    if expected != len(buf):
        raise WireError([("streams", f"expected {expected} bytes, got {len(buf)}")])
    rri, posture = [], []
    try:
        for _ in range(n_rri):
            seq, t, rri_us = _RRI.unpack_from(buf, pos)
            pos += _RRI.size
            rri.append(RriEvent(worker_id, t, rri_us / 1000, seq))
        for _ in range(n_post):
            seq, t, code, cdeg = _POSTURE.unpack_from(buf, pos)
            pos += _POSTURE.size
            if code not in _CODE_LABELS:
                raise WireError([("posture.label", f"unknown code {code}")])
            posture.append(PostureEvent(worker_id, t, _CODE_LABELS[code], cdeg / 100, seq))
    except ValueError as exc:
        if isinstance(exc, WireError):
            raise
        raise WireError([("streams", str(exc))]) from None
    return Batch(worker_id, device_id, tuple(rri), tuple(posture))


# -- JSON -------------------------------------------------------------------


def batch_to_dict(batch: Batch) -> dict:
    return {
        "worker_id": batch.worker_id,
        "device_id": batch.device_id,
        "streams": {
            "rri": [{"t_ms": e.t, "rri_ms": e.rri_ms, "seq": e.seq} for e in batch.rri],
            "posture": [
                {"t_ms": e.t, "label": e.label.value, "tilt_deg": e.tilt_deg, "seq": e.seq}
                for e in batch.posture
            ],
        },
    }


def encode_json(batch: Batch) -> bytes:
    return json.dumps(batch_to_dict(batch), separators=(",", ":")).encode("utf-8")


def _is_int(v):
    return isinstance(v, int) and not isinstance(v, bool)


def _is_num(v):
    return (isinstance(v, (int, float)) and not isinstance(v, bool)) and math.isfinite(v)


def batch_from_dict(obj) -> Batch:
    problems = []
    if not isinstance(obj, dict):
        raise WireError([("$", "body must be a JSON object")])
    worker_id = obj.get("worker_id")
    if not isinstance(worker_id, str) or not worker_id:
        problems.append(("worker_id", "missing or not a non-empty string"))
    device_id = obj.get("device_id", "")
    if not isinstance(device_id, str):
        problems.append(("device_id", "must be a string"))
    streams = obj.get("streams")
    if not isinstance(streams, dict):
        problems.append(("streams", "missing or not an object"))
        streams = {}
    unknown = set(streams) - {"rri", "posture"}
    if unknown:
        problems.append(("streams", f"unknown streams {sorted(unknown)}"))

    rri_raw = streams.get("rri", [])
    post_raw = streams.get("posture", [])
    for name, items in (("rri", rri_raw), ("posture", post_raw)):
        if not isinstance(items, list):
            problems.append((f"streams.{name}", "must be a list"))
    if problems:
        raise WireError(problems)

    rri, posture = [], []
    for i, item in enumerate(rri_raw):
        path = f"streams.rri[{i}]"
        if not isinstance(item, dict):
            problems.append((path, "must be an object"))
            continue
        t, r, s = item.get("t_ms"), item.get("rri_ms"), item.get("seq")
        if not _is_int(t) or t < 0:
            problems.append((f"{path}.t_ms", "must be a non-negative integer"))
        if not _is_num(r) or r <= 0:
            problems.append((f"{path}.rri_ms", "must be a positive number"))
        if not _is_int(s) or s < 0:
            problems.append((f"{path}.seq", "must be a non-negative integer"))
        if not problems:
            rri.append(RriEvent(worker_id, t, float(r), s))
    for i, item in enumerate(post_raw):
        path = f"streams.posture[{i}]"
        if not isinstance(item, dict):
            problems.append((path, "must be an object"))
            continue
        t, lab, tilt, s = item.get("t_ms"), item.get("label"), item.get("tilt_deg"), item.get("seq")
        if not _is_int(t) or t < 0:
            problems.append((f"{path}.t_ms", "must be a non-negative integer"))
        if lab not in Posture.__members__:
            problems.append((f"{path}.label", f"must be one of {list(Posture.__members__)}"))
        if not _is_num(tilt) or not 0 <= tilt <= 180:
            problems.append((f"{path}.tilt_deg", "must be a number in [0, 180]"))
        if not _is_int(s) or s < 0:
            problems.append((f"{path}.seq", "must be a non-negative integer"))
        if not problems:
            posture.append(PostureEvent(worker_id, t, Posture(lab), float(tilt), s))
    if problems:
        raise WireError(problems)
    return Batch(worker_id, device_id, tuple(rri), tuple(posture))


def decode_json(data: bytes | str) -> Batch:
    try:
        obj = json.loads(data)
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise WireError([("$", f"invalid JSON: {exc}")]) from None
    return batch_from_dict(obj)


def decode(data: bytes, content_type: str = "application/json") -> Batch:
    if content_type.startswith("application/octet-stream"):
        return decode_binary(data)
    return decode_json(data)
