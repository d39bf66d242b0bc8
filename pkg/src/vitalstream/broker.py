"""Embedded topic-based publish/subscribe broker.

Each topic is a persisted append-only log. Sequence numbers are assigned per
``(topic, key)``. Subscriptions are fan-out cursors over a topic: every
subscription sees every message, at least once, in per-key publish order.
Unacknowledged deliveries are redelivered after ``ack_timeout_ms``. Named
subscriptions persist their acknowledged position so a restarted consumer
resumes where the previous one stopped acknowledging.
"""

from __future__ import annotations

import json
import logging
import os
import struct
import threading
import time
from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path

from vitalstream.records import RecordLog

log = logging.getLogger(__name__)


class Topics:
    RAW = "vital.raw"
    CLEANSED = "vital.cleansed"
    ANALYZED = "vital.analyzed"
    ALL = (RAW, CLEANSED, ANALYZED)


class BrokerError(Exception):
    pass


class UnknownTopic(BrokerError):
    pass


class BrokerFull(BrokerError):
    """Backpressure timeout: a subscriber lags by more than ``queue_bound``."""


class OffsetOutOfRange(BrokerError):
    def __init__(self, topic, key, earliest):
        self.earliest = earliest
        super().__init__(f"{topic}/{key}: requested seq precedes retention; earliest available is {earliest}")


@dataclass(frozen=True, slots=True)
class Envelope:
    topic: str
    key: str
    seq: int
    payload: bytes
    ingested_at: int


_ENV_HEAD = struct.Struct("<QqB")


def _encode_envelope(env: Envelope) -> bytes:
    k = env.key.encode("utf-8")
    return _ENV_HEAD.pack(env.seq, env.ingested_at, len(k)) + k + env.payload


def _decode_envelope(topic: str, data: bytes) -> Envelope:
    seq, ingested_at, n = _ENV_HEAD.unpack_from(data, 0)
    off = _ENV_HEAD.size
    key = data[off : off + n].decode("utf-8")
    return Envelope(topic, key, seq, bytes(data[off + n :]), ingested_at)


class _TopicLog:
    def __init__(self, name, directory, retention_bytes, fsync, segment_bytes):
        self.name = name
        self.log = RecordLog(directory, segment_bytes=segment_bytes, fsync=fsync)
        self.retention_bytes = retention_bytes
        # global position -> envelope; positions are dense from `base`
        self.base = 0
        self.messages: list[Envelope] = []
        self.segment_of: list[int] = []
        self.last_seq: dict[str, int] = defaultdict(int)
        self.earliest_seq: dict[str, int] = {}
        for segment, payload in self.log.recover():
            env = _decode_envelope(name, payload)
            self._index(env, segment)

    def _index(self, env, segment):
        self.messages.append(env)
        self.segment_of.append(segment)
        self.last_seq[env.key] = env.seq
        self.earliest_seq.setdefault(env.key, env.seq)

    @property
    def end(self) -> int:
        return self.base + len(self.messages)

    def append(self, key, payload, ingested_at) -> Envelope:
        env = Envelope(self.name, key, self.last_seq[key] + 1, payload, ingested_at)
        segment = self.log.append([_encode_envelope(env)])
        self._index(env, segment)
        self._enforce_retention()
        return env

    def _enforce_retention(self):
        while self.log.total_bytes() > self.retention_bytes:
            dropped = self.log.drop_oldest()
            if dropped is None:
                return
            n = 0
            while n < len(self.segment_of) and self.segment_of[n] == dropped:
                n += 1
            for env in self.messages[:n]:
                self.earliest_seq[env.key] = env.seq + 1
            del self.messages[:n]
            del self.segment_of[:n]
            self.base += n
            log.info("topic %s: retention dropped segment %d (%d messages)", self.name, dropped, n)

    def get(self, position) -> Envelope:
        return self.messages[position - self.base]


class Broker:
    def __init__(
        self,
        directory,
        retention_bytes: int = 2**30,
        queue_bound: int = 100_000,
        ack_timeout_ms: int = 30_000,
        fsync: bool = True,
        clock=None,
        segment_bytes: int = 16 * 2**20,
    ):
        self.directory = Path(directory)
        self.directory.mkdir(parents=True, exist_ok=True)
        self.queue_bound = queue_bound
        self.ack_timeout_ms = ack_timeout_ms
        self.clock = clock or (lambda: int(time.time() * 1000))
        self._cond = threading.Condition()
        self._topics = {
            name: _TopicLog(name, self.directory / name, retention_bytes, fsync, segment_bytes)
            for name in Topics.ALL
        }
        self._subs: list[Subscription] = []
        self._offsets_path = self.directory / "subscriptions.json"
        self._committed = json.loads(self._offsets_path.read_text()) if self._offsets_path.exists() else {}

    def _topic(self, topic) -> _TopicLog:
        try:
            return self._topics[topic]
        except KeyError:
            raise UnknownTopic(topic) from None

    def last_seq(self, topic, key) -> int:
        return self._topic(topic).last_seq.get(key, 0)

    def keys(self, topic) -> list[str]:
        return sorted(self._topic(topic).last_seq)

    def publish(self, topic, key: str, payload: bytes, timeout: float | None = None) -> int:
        """Append ``payload`` under ``(topic, key)``; return its seq.

        Blocks while any active subscription lags by ``queue_bound`` or more;
        raises :class:`BrokerFull` if that persists past ``timeout`` seconds.
        """
        if not payload:
            raise ValueError("payload must be non-empty")
        tlog = self._topic(topic)
        with self._cond:
            ok = self._cond.wait_for(lambda: self._has_room(tlog), timeout=timeout)
            if not ok:
                raise BrokerFull(f"{topic}: subscriber backlog reached {self.queue_bound}")
            env = tlog.append(key, payload, self.clock())
            self._cond.notify_all()
            return env.seq

    def _has_room(self, tlog) -> bool:
        return all(s.lag() < self.queue_bound for s in self._subs if s.topic == tlog.name and not s.closed)

    def subscribe(self, topic, from_seq: int = 1, name: str | None = None) -> Subscription:
        """Subscribe to ``topic``.

        Replays retained messages with per-key seq >= ``from_seq`` and then
        live ones. A ``name`` makes the subscription durable: a later
        subscription with the same name resumes after the acknowledged prefix.
        """
        if from_seq < 1:
            raise ValueError("from_seq starts at 1")
        tlog = self._topic(topic)
        with self._cond:
            resume = {}
            if name is not None and name in self._committed:
                resume = {k: v + 1 for k, v in self._committed[name]["acked"].items()}
            newest = max(tlog.last_seq.values(), default=0)
            if from_seq > newest + 1:
                raise BrokerError(f"{topic}: from_seq {from_seq} beyond current seq {newest}")
            for key, earliest in tlog.earliest_seq.items():
                if resume.get(key, from_seq) < earliest:
                    raise OffsetOutOfRange(topic, key, earliest)
            sub = Subscription(self, tlog, from_seq, name, resume)
            self._subs.append(sub)
            return sub

    def _commit(self, sub: Subscription):
        if sub.name is None:
            return
        self._committed[sub.name] = {"topic": sub.topic, "acked": dict(sub.acked_prefix)}
        tmp = self._offsets_path.with_suffix(".tmp")
        tmp.write_text(json.dumps(self._committed, sort_keys=True))
        os.replace(tmp, self._offsets_path)

    def _release(self, sub):
        with self._cond:
            if sub in self._subs:
                self._subs.remove(sub)
            self._cond.notify_all()

    def messages(self, topic) -> list[Envelope]:
        """Retained messages of ``topic`` in publish order (for inspection)."""
        return list(self._topic(topic).messages)

    def close(self):
        for sub in list(self._subs):
            sub.close()
        for t in self._topics.values():
            t.log.close()


class Subscription:
    """Delivery cursor over one topic. Not shared between consumer threads."""

    def __init__(self, broker: Broker, tlog: _TopicLog, from_seq, name, resume):
        self.broker = broker
        self.topic = tlog.name
        self.name = name
        self.closed = False
        self._tlog = tlog
        self._from_seq = from_seq
        self._resume = resume
        self._position = tlog.base
        # (key, seq) -> (envelope, delivered_at)
        self._inflight: dict[tuple[str, int], tuple[Envelope, int]] = {}
        self.acked_prefix: dict[str, int] = {k: v - 1 for k, v in resume.items()}
        self._acked_above: dict[str, set[int]] = defaultdict(set)

    def _wanted(self, env: Envelope) -> bool:
        start = self._resume.get(env.key, self._from_seq)
        return env.seq >= start

    def lag(self) -> int:
        return self._tlog.end - self._position + len(self._inflight)

    def poll(self, max_messages: int = 1000, timeout: float = 0.0) -> list[Envelope]:
        """Return up to ``max_messages`` deliveries (redeliveries first)."""
        cond = self.broker._cond
        with cond:
            out = self._collect(max_messages)
            if not out and timeout:
                cond.wait_for(lambda: self._position < self._tlog.end or self.closed, timeout=timeout)
                out = self._collect(max_messages)
            cond.notify_all()
            return out

    def _collect(self, max_messages):
        now = self.broker.clock()
        out = []
        for k, (env, at) in sorted(self._inflight.items(), key=lambda kv: kv[1][1]):
            if len(out) >= max_messages:
                break
            if now - at >= self.broker.ack_timeout_ms:
                self._inflight[k] = (env, now)
                out.append(env)
        while len(out) < max_messages and self._position < self._tlog.end:
            if self._position < self._tlog.base:
                self._position = self._tlog.base
                continue
            env = self._tlog.get(self._position)
            self._position += 1
            if self._wanted(env):
                self._inflight[(env.key, env.seq)] = (env, now)
                out.append(env)
        return out

    def ack(self, env: Envelope):
        with self.broker._cond:
            self._inflight.pop((env.key, env.seq), None)
            prefix = self.acked_prefix.get(env.key, self._resume.get(env.key, self._from_seq) - 1)
            if env.seq <= prefix:
                return
            above = self._acked_above[env.key]
            above.add(env.seq)
            while prefix + 1 in above:
                prefix += 1
                above.discard(prefix)
            self.acked_prefix[env.key] = prefix
            self.broker._commit(self)
            self.broker._cond.notify_all()

    def pending(self) -> int:
        return len(self._inflight)

    def close(self):
        self.closed = True
        self.broker._release(self)

    def __iter__(self):
        while not self.closed:
            for env in self.poll(timeout=0.1):
                yield env
