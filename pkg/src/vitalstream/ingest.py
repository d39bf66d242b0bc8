"""Cloud front half: REST-style ingestion and the Dispatcher.

``IngestService`` deduplicates uploads by ``(worker_id, stream, seq)`` and
publishes fresh events to ``vital.raw``. The dedup watermark is rebuilt from
the persisted RAW log on start, so it survives restarts without a second
source of truth.

``Dispatcher`` consumes RAW, stores every decoded event, applies the
cleansing rules and publishes the survivors to ``vital.cleansed``. Its
progress is recorded as REPORT rows in the store, which is also what it
rebuilds its state from after a restart.
"""

from __future__ import annotations

import json
import logging
import threading
import time
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

from vitalstream import wire
from vitalstream.broker import Broker, BrokerFull, Envelope, Topics
from vitalstream.events import Batch, Stream
from vitalstream.records import RecordLog
from vitalstream.store import Metric, Row, TimeSeriesStore

log = logging.getLogger(__name__)

VITALS_PATH = "/v1/vitals"


class RejectReason:
    RRI_TOO_SHORT = "RRI_TOO_SHORT"
    RRI_TOO_LONG = "RRI_TOO_LONG"
    RRI_JUMP = "RRI_JUMP"
    DUPLICATE_SEQ = "DUPLICATE_SEQ"
    STALE_TIMESTAMP = "STALE_TIMESTAMP"
    ALL = (RRI_TOO_SHORT, RRI_TOO_LONG, RRI_JUMP, DUPLICATE_SEQ, STALE_TIMESTAMP)


class IngestService:
    def __init__(self, broker: Broker, publish_timeout: float | None = 1.0):
        self.broker = broker
        self.publish_timeout = publish_timeout
        self._lock = threading.Lock()
        self._seen: dict[tuple[str, str], set[int]] = defaultdict(set)
        self.events_ingested = 0
        self.duplicates = 0
        for env in broker.messages(Topics.RAW):
            try:
                batch = wire.decode_binary(env.payload)
            except wire.WireError:
                continue
            for stream, e in batch.events():
                self._seen[(batch.worker_id, stream.value)].add(e.seq)

    def ingest(self, batch: Batch) -> dict:
        """Publish the not-yet-seen events of ``batch`` to RAW as one envelope."""
        with self._lock:
            fresh = {Stream.RRI: [], Stream.POSTURE: []}
            batch_seen = defaultdict(set)
            dups = 0
            for stream, e in batch.events():
                key = (batch.worker_id, stream.value)
                if e.seq in self._seen[key] or e.seq in batch_seen[key]:
                    dups += 1
                    continue
                batch_seen[key].add(e.seq)
                fresh[stream].append(e)
            n = len(fresh[Stream.RRI]) + len(fresh[Stream.POSTURE])
            if n:
                out = Batch(batch.worker_id, batch.device_id, tuple(fresh[Stream.RRI]), tuple(fresh[Stream.POSTURE]))
                self.broker.publish(Topics.RAW, batch.worker_id, wire.encode_binary(out), timeout=self.publish_timeout)
                for key, seqs in batch_seen.items():
                    self._seen[key] |= seqs
            self.events_ingested += n
            self.duplicates += dups
            return {"accepted": n, "duplicates": dups}

    def handle(self, body: bytes, content_type: str = "application/json") -> tuple[int, dict]:
        """HTTP-shaped entry point: returns ``(status, json_body)``."""
        try:
            batch = wire.decode(body, content_type)
        except wire.WireError as exc:
            return 400, {"error": str(exc), "fields": [{"field": f, "message": m} for f, m in exc.problems]}
        try:
            return 200, self.ingest(batch)
        except BrokerFull as exc:
            return 503, {"error": str(exc), "retryable": True}


class _VitalsHandler(BaseHTTPRequestHandler):
    service: IngestService

    def do_POST(self):
        if self.path != VITALS_PATH:
            self._reply(404, {"error": f"no route for {self.path}"})
            return
        length = int(self.headers.get("Content-Length") or 0)
        body = self.rfile.read(length)
        status, payload = self.service.handle(body, self.headers.get("Content-Type", "application/json"))
        self._reply(status, payload)

    def _reply(self, status, payload):
        data = json.dumps(payload).encode("utf-8")
        self.send_response(status)
        self.send_header("Content-Type", "application/json; charset=utf-8")
        self.send_header("Content-Length", str(len(data)))
        self.end_headers()
        self.wfile.write(data)

    def log_message(self, fmt, *args):
        log.debug("ingest http: " + fmt, *args)


def make_http_server(service: IngestService, host: str = "127.0.0.1", port: int = 0) -> ThreadingHTTPServer:
    handler = type("VitalsHandler", (_VitalsHandler,), {"service": service})
    return ThreadingHTTPServer((host, port), handler)


# -- Dispatcher ---------------------------------------------------------------


@dataclass(frozen=True)
class CleansingParams:
    min_rri_ms: float = 300.0
    max_rri_ms: float = 2000.0
    max_jump_fraction: float = 0.3
    max_future_ms: int = 60_000


@dataclass
class CleansingReport:
    worker_id: str
    raw_seq: int
    ingested_at: int
    accepted: list = field(default_factory=list)  # [stream, t_ms, seq]
    rejected: list = field(default_factory=list)  # [stream, t_ms, seq, reason]

    @property
    def input_count(self) -> int:
        return len(self.accepted) + len(self.rejected)

    def to_bytes(self) -> bytes:
        return json.dumps(
            {"raw_seq": self.raw_seq, "ingested_at": self.ingested_at, "accepted": self.accepted, "rejected": self.rejected},
            separators=(",", ":"),
        ).encode("utf-8")

    @classmethod
    def from_row(cls, row: Row) -> CleansingReport:
        d = json.loads(row.value)
        return cls(row.worker_id, d["raw_seq"], d["ingested_at"], d["accepted"], d["rejected"])


class DeadLetterStore:
    """Append-only log of envelopes that could not be decoded."""

    def __init__(self, directory, fsync: bool = True):
        self._log = RecordLog(directory, fsync=fsync)
        self.entries: list[tuple[str, int, bytes]] = []
        for _, payload in self._log.recover():
            d = json.loads(payload)
            self.entries.append((d["key"], d["seq"], bytes.fromhex(d["payload"])))

    def put(self, env: Envelope):
        rec = {"topic": env.topic, "key": env.key, "seq": env.seq, "payload": env.payload.hex()}
        self._log.append([json.dumps(rec).encode("utf-8")])
        self.entries.append((env.key, env.seq, env.payload))

    def __contains__(self, key_seq):
        return any((k, s) == key_seq for k, s, _ in self.entries)

    def __len__(self):
        return len(self.entries)

    def close(self):
        self._log.close()


def _raw_metric(stream: Stream) -> Metric:
    return Metric.RAW_RRI if stream is Stream.RRI else Metric.RAW_POSTURE


def event_row(batch: Batch, stream: Stream, event) -> Row:
    """Store row for one raw event; the value is a one-event binary batch."""
    single = Batch(batch.worker_id, batch.device_id, (event,) if stream is Stream.RRI else (), (event,) if stream is Stream.POSTURE else ())
    return Row(batch.worker_id, _raw_metric(stream), event.t, event.seq, wire.encode_binary(single))


class Dispatcher:
    """Single logical consumer of RAW: store, cleanse, republish."""

    SUBSCRIPTION = "dispatcher"

    def __init__(
        self,
        broker: Broker,
        store: TimeSeriesStore,
        dead_letters: DeadLetterStore,
        params: CleansingParams = CleansingParams(),
    ):
        self.broker = broker
        self.store = store
        self.dead_letters = dead_letters
        self.params = params
        self.accepted = 0
        self.rejected: Counter = Counter()
        self.dead_lettered = 0
        self._last_rri: dict[str, float] = {}
        self._seen: dict[tuple[str, str], set[int]] = defaultdict(set)
        self._done: dict[str, int] = defaultdict(int)  # key -> highest dispatched RAW seq
        self._rebuild()
        self.sub = broker.subscribe(Topics.RAW, name=self.SUBSCRIPTION)

    def _rebuild(self):
        reports = []
        for worker in self.store.workers():
            reports += [CleansingReport.from_row(r) for r in self.store.scan(worker, Metric.REPORT, 0, 2**63)]
        reports.sort(key=lambda r: (r.worker_id, r.raw_seq))
        latest = {}
        for rep in reports:
            self._apply_report_state(rep)
            latest[rep.worker_id] = rep
        for key, seq, _ in self.dead_letters.entries:
            self._done[key] = max(self._done[key], seq)
        self.dead_lettered = len(self.dead_letters)
        # the newest report may have been persisted without its CLEANSED publish
        for rep in latest.values():
            self._repair_cleansed(rep)

    def _apply_report_state(self, rep: CleansingReport):
        self._done[rep.worker_id] = max(self._done[rep.worker_id], rep.raw_seq)
        for stream, t, seq in rep.accepted:
            self._seen[(rep.worker_id, stream)].add(seq)
            if stream == Stream.RRI.value:
                row = self.store.get(rep.worker_id, Metric.RAW_RRI, t, seq)
                self._last_rri[rep.worker_id] = wire.decode_binary(row.value).rri[0].rri_ms
        for stream, _, seq, _ in rep.rejected:
            self._seen[(rep.worker_id, stream)].add(seq)
        self.accepted += len(rep.accepted)
        self.rejected.update(r[3] for r in rep.rejected)

    def _repair_cleansed(self, rep: CleansingReport):
        if not rep.accepted:
            return
        published = set()
        for env in self.broker.messages(Topics.CLEANSED):
            if env.key == rep.worker_id:
                for stream, e in wire.decode_binary(env.payload).events():
                    published.add((stream.value, e.seq))
        if all((s, q) in published for s, _, q in rep.accepted):
            return
        rri, post, device = [], [], ""
        for stream, t, seq in rep.accepted:
            row = self.store.get(rep.worker_id, _raw_metric(Stream(stream)), t, seq)
            b = wire.decode_binary(row.value)
            device = b.device_id
            (rri if stream == Stream.RRI.value else post).extend(b.rri or b.posture)
        log.warning("re-publishing cleansed events of %s RAW seq %d after restart", rep.worker_id, rep.raw_seq)
        batch = Batch(rep.worker_id, device, tuple(rri), tuple(post))
        self.broker.publish(Topics.CLEANSED, rep.worker_id, wire.encode_binary(batch))

    def cleanse(self, batch: Batch, ingested_at: int, raw_seq: int) -> tuple[CleansingReport, Batch]:
        """Apply the cleansing rules, updating per-worker state."""
        p = self.params
        rep = CleansingReport(batch.worker_id, raw_seq, ingested_at)
        keep = {Stream.RRI: [], Stream.POSTURE: []}
        for stream, e in batch.events():
            seen = self._seen[(batch.worker_id, stream.value)]
            if e.seq in seen:
                reason = RejectReason.DUPLICATE_SEQ
            elif e.t > ingested_at + p.max_future_ms:
                reason = RejectReason.STALE_TIMESTAMP
            elif stream is Stream.RRI and e.rri_ms < p.min_rri_ms:
                reason = RejectReason.RRI_TOO_SHORT
            elif stream is Stream.RRI and e.rri_ms > p.max_rri_ms:
                reason = RejectReason.RRI_TOO_LONG
            elif (
                stream is Stream.RRI
                and batch.worker_id in self._last_rri
                and abs(e.rri_ms - self._last_rri[batch.worker_id]) > p.max_jump_fraction * self._last_rri[batch.worker_id]
            ):
                reason = RejectReason.RRI_JUMP
            else:
                reason = None
            seen.add(e.seq)
            if reason is None:
                keep[stream].append(e)
                rep.accepted.append([stream.value, e.t, e.seq])
                if stream is Stream.RRI:
                    self._last_rri[batch.worker_id] = e.rri_ms
            else:
                rep.rejected.append([stream.value, e.t, e.seq, reason])
        out = Batch(batch.worker_id, batch.device_id, tuple(keep[Stream.RRI]), tuple(keep[Stream.POSTURE]))
        return rep, out

    def dispatch(self, env: Envelope) -> CleansingReport | None:
        """Process one RAW envelope. Returns None for redeliveries and dead letters."""
        if env.seq <= self._done[env.key]:
            self.sub.ack(env)
            return None
        try:
            batch = wire.decode_binary(env.payload)
        except wire.WireError as exc:
            log.error("dead-lettering %s/%s seq %d: %s", env.topic, env.key, env.seq, exc)
            self.dead_letters.put(env)
            self.dead_lettered += 1
            self._done[env.key] = env.seq
            self.sub.ack(env)
            return None
        rep, cleansed = self.cleanse(batch, env.ingested_at, env.seq)
        rows = [event_row(batch, s, e) for s, e in batch.events()]
        rows.append(Row(env.key, Metric.REPORT, env.ingested_at, env.seq, rep.to_bytes()))
        self.store.put_many(rows)
        if len(cleansed):
            self.broker.publish(Topics.CLEANSED, env.key, wire.encode_binary(cleansed))
        self.accepted += len(rep.accepted)
        self.rejected.update(r[3] for r in rep.rejected)
        self._done[env.key] = env.seq
        self.sub.ack(env)
        return rep

    def run_once(self, max_messages: int = 1000) -> list[CleansingReport]:
        out = []
        for env in self.sub.poll(max_messages):
            rep = self.dispatch(env)
            if rep is not None:
                out.append(rep)
        return out

    def close(self):
        self.sub.close()


def serve_forever_in_thread(server: ThreadingHTTPServer) -> threading.Thread:
    th = threading.Thread(target=server.serve_forever, name="ingest-http", daemon=True)
    th.start()
    while not th.is_alive():
        time.sleep(0.001)
    return th
