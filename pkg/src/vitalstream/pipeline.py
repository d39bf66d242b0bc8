"""End-to-end orchestration: simulators -> edge agents -> ingest -> dispatcher -> analyzer.

The run is single-threaded and driven by a replay clock in scenario
milliseconds, so two runs of the same config produce identical outputs.
Each step feeds one slice of every worker's streams to its agent, lets the
agents upload, then drains the cloud side.
"""

from __future__ import annotations

import json
import logging
import math
import sys
import time
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from vitalstream import analysis
from vitalstream.analysis import FatigueWeights, MicroBatchAnalyzer, WindowConfig
from vitalstream.broker import Broker, Topics
from vitalstream.edge.agent import AlertSink, EdgeAgent, EdgeConfig
from vitalstream.edge.detect import DetectorParams
from vitalstream.edge.posture import PostureParams
from vitalstream.edge.uplink import (
    CostLedger,
    HttpLink,
    InProcessLink,
    LinkDown,
    OfflineBuffer,
    OutageSchedule,
    Uploader,
    cost_report,
)
from vitalstream.events import Alert
from vitalstream.ingest import VITALS_PATH, CleansingParams, DeadLetterStore, Dispatcher, IngestService
from vitalstream.sensors import ScenarioError, ScenarioScript, generate_accel, generate_ecg
from vitalstream.store import Metric, Row, TimeSeriesStore

log = logging.getLogger(__name__)


class ConfigError(ValueError):
    def __init__(self, field_name: str, message: str):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name


@dataclass(frozen=True)
class BrokerConfig:
    retention_bytes: int = 2**30
    queue_bound: int = 100_000
    ack_timeout_ms: int = 30_000


@dataclass(frozen=True)
class FaultConfig:
    outages: dict = field(default_factory=dict)  # worker_id -> [(start_ms, end_ms), ...]
    duplicate_delivery: bool = False


@dataclass(frozen=True)
class AnalysisConfig:
    windows: dict = field(default_factory=analysis.default_windows)
    baseline_windows: int = 5
    weights: FatigueWeights = FatigueWeights()


@dataclass(frozen=True)
class PipelineConfig:
    scenarios: tuple  # ScenarioScript objects once loaded
    store_dir: Path
    edge: EdgeConfig = EdgeConfig()
    broker: BrokerConfig = BrokerConfig()
    cleansing: CleansingParams = CleansingParams()
    analysis: AnalysisConfig = AnalysisConfig()
    faults: FaultConfig = FaultConfig()
    alerts_sink: str | None = "stderr"
    speed_factor: float = math.inf
    step_ms: int = 1000
    transport: str = "inprocess"
    fsync: bool = True

    def validate(self) -> PipelineConfig:
        if not self.scenarios:
            raise ConfigError("scenarios", "at least one scenario is required")
        ids = [s.worker_id for s in self.scenarios]
        if len(set(ids)) != len(ids):
            raise ConfigError("scenarios", f"duplicate worker_id in {ids}")
        if not self.speed_factor > 0:
            raise ConfigError("speed_factor", "must be > 0")
        if self.step_ms <= 0:
            raise ConfigError("step_ms", "must be > 0")
        if self.transport not in ("inprocess", "http"):
            raise ConfigError("transport", "must be 'inprocess' or 'http'")
        e = self.edge
        if not e.upload_interval_s > 0:
            raise ConfigError("edge.upload_interval_s", "must be > 0")
        if e.buffer_events <= 0:
            raise ConfigError("edge.buffer_events", "must be > 0")
        if not (e.posture.hold_s > 0 and e.posture.rearm_s >= 0 and e.posture.window_ms > 0):
            raise ConfigError("edge.posture", "hold_s > 0, rearm_s >= 0 and window_ms > 0 required")
        if not 0 <= e.posture.upright_max_deg < e.posture.lying_min_deg <= 180:
            raise ConfigError("edge.posture", "need 0 <= upright_max_deg < lying_min_deg <= 180")
        if e.detector.refractory_ms <= 0 or e.detector.integration_ms <= 0:
            raise ConfigError("edge.detector", "refractory_ms and integration_ms must be > 0")
        b = self.broker
        if b.retention_bytes <= 0 or b.queue_bound <= 0 or b.ack_timeout_ms <= 0:
            raise ConfigError("broker", "retention_bytes, queue_bound and ack_timeout_ms must be > 0")
        c = self.cleansing
        if not 0 < c.min_rri_ms < c.max_rri_ms or c.max_jump_fraction <= 0:
            raise ConfigError("cleansing", "need 0 < min_rri_ms < max_rri_ms and max_jump_fraction > 0")
        if self.analysis.baseline_windows < 1:
            raise ConfigError("analysis.baseline_windows", "must be >= 1")
        for w, spans in self.faults.outages.items():
            if w not in ids:
                raise ConfigError(f"faults.outages.{w}", "unknown worker")
            for a, z in spans:
                if not 0 <= a < z:
                    raise ConfigError(f"faults.outages.{w}", f"bad interval [{a}, {z})")
        return self


def _build(cls, obj, where: str):
    if obj is None:
        return cls()
    if not isinstance(obj, dict):
        raise ConfigError(where, "must be an object")
    known = {f.name for f in fields(cls)}
    unknown = set(obj) - known
    if unknown:
        raise ConfigError(where, f"unknown keys {sorted(unknown)}")
    try:
        return cls(**obj)
    except (TypeError, ValueError) as exc:
        raise ConfigError(where, str(exc)) from None


def _window(metric: str, obj) -> WindowConfig:
    obj = dict(obj or {})
    obj.setdefault("metric", metric)
    if obj["metric"] != metric:
        raise ConfigError(f"analysis.windows.{metric.lower()}.metric", f"must be {metric}")
    return _build(WindowConfig, obj, f"analysis.windows.{metric.lower()}")


def config_from_dict(obj: dict, base_dir=".") -> PipelineConfig:
    """Parse and validate the JSON config; relative paths resolve under ``base_dir``."""
    if not isinstance(obj, dict):
        raise ConfigError("config", "must be a JSON object")
    base = Path(base_dir)
    known = {f.name for f in fields(PipelineConfig)}
    unknown = set(obj) - known
    if unknown:
        raise ConfigError("config", f"unknown keys {sorted(unknown)}")
    scenarios = []
    for i, sc in enumerate(obj.get("scenarios") or []):
        try:
            if isinstance(sc, dict):
                scenarios.append(ScenarioScript.from_dict(sc))
            else:
                path = base / sc
                if not path.is_file():
                    raise ConfigError(f"scenarios[{i}]", f"no such file {path}")
                scenarios.append(ScenarioScript.load(path))
        except ScenarioError as exc:
            raise ConfigError(f"scenarios[{i}].{exc.field}", str(exc)) from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"scenarios[{i}]", f"invalid JSON: {exc}") from None
    if "store_dir" not in obj:
        raise ConfigError("store_dir", "missing")

    edge = dict(obj.get("edge") or {})
    detector = _build(DetectorParams, edge.pop("detector", None), "edge.detector")
    posture = _build(PostureParams, edge.pop("posture", None), "edge.posture")
    edge_cfg = replace(_build(EdgeConfig, edge, "edge"), detector=detector, posture=posture)

    an = dict(obj.get("analysis") or {})
    wins = an.pop("windows", None) or {}
    bad = set(wins) - {"fatigue", "relaxation"}
    if bad:
        raise ConfigError("analysis.windows", f"unknown metrics {sorted(bad)}")
    windows = {
        analysis.FATIGUE: _window(analysis.FATIGUE, wins.get("fatigue")),
        analysis.RELAXATION: _window(analysis.RELAXATION, wins.get("relaxation")),
    }
    weights = _build(FatigueWeights, an.pop("weights", None), "analysis.weights")
    an_cfg = replace(_build(AnalysisConfig, an, "analysis"), windows=windows, weights=weights)

    faults = _build(FaultConfig, obj.get("faults"), "faults")
    faults = replace(faults, outages={w: [tuple(x) for x in v] for w, v in faults.outages.items()})

    speed = obj.get("speed_factor")
    cfg = PipelineConfig(
        scenarios=tuple(scenarios),
        store_dir=base / obj["store_dir"],
        edge=edge_cfg,
        broker=_build(BrokerConfig, obj.get("broker"), "broker"),
        cleansing=_build(CleansingParams, obj.get("cleansing"), "cleansing"),
        analysis=an_cfg,
        faults=faults,
        alerts_sink=obj.get("alerts_sink", "stderr"),
        speed_factor=math.inf if speed in (None, "inf") else float(speed),
        step_ms=int(obj.get("step_ms", 1000)),
        transport=obj.get("transport", "inprocess"),
        fsync=bool(obj.get("fsync", True)),
    )
    return cfg.validate()


def load_config(path) -> PipelineConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError("config", f"no such file {path}")
    try:
        obj = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError("config", f"invalid JSON: {exc}") from None
    return config_from_dict(obj, path.parent)


def config_to_dict(cfg: PipelineConfig) -> dict:
    """JSON-able snapshot of a config (scenarios inlined)."""
    from dataclasses import asdict

    return {
        "scenarios": [s.to_dict() for s in cfg.scenarios],
        "store_dir": str(cfg.store_dir),
        "edge": asdict(cfg.edge),
        "broker": asdict(cfg.broker),
        "cleansing": asdict(cfg.cleansing),
        "analysis": {
            "windows": {m.lower(): asdict(w) for m, w in cfg.analysis.windows.items()},
            "baseline_windows": cfg.analysis.baseline_windows,
            "weights": asdict(cfg.analysis.weights),
        },
        "faults": {"outages": {w: [list(x) for x in v] for w, v in cfg.faults.outages.items()},
                   "duplicate_delivery": cfg.faults.duplicate_delivery},
        "alerts_sink": cfg.alerts_sink,
        "speed_factor": None if math.isinf(cfg.speed_factor) else cfg.speed_factor,
        "step_ms": cfg.step_ms,
        "transport": cfg.transport,
        "fsync": cfg.fsync,
    }


# -- run ----------------------------------------------------------------------


class ReplayClock:
    def __init__(self, now: int = 0):
        self.now = now

    def __call__(self) -> int:
        return self.now


class FaultyLink:
    """Wraps a link with scheduled outages, optional double delivery and a capture log."""

    def __init__(self, inner, clock, schedule: OutageSchedule, duplicate: bool = False):
        self.inner = inner
        self.clock = clock
        self.schedule = schedule
        self.duplicate = duplicate
        self.transmitted: list[bytes] = []

    def send(self, payload: bytes, content_type: str = "application/octet-stream") -> dict:
        if self.schedule.is_down(self.clock()):
            raise LinkDown("scheduled outage")
        self.transmitted.append(payload)
        ack = self.inner.send(payload, content_type)
        if self.duplicate:
            self.inner.send(payload, content_type)
        return ack


@dataclass
class RunResult:
    status: int
    summary: dict
    agents: dict = field(default_factory=dict)
    links: dict = field(default_factory=dict)
    ground_truth: dict = field(default_factory=dict)
    analyzer: MicroBatchAnalyzer | None = None


def _alert_writer(target):
    if target is None:
        return None, None
    if target == "stderr":
        return AlertSink(sys.stderr), None
    fh = open(target, "a", encoding="utf-8")
    return AlertSink(fh), fh


class Pipeline:
    def __init__(self, cfg: PipelineConfig):
        self.cfg = cfg
        self.clock = ReplayClock()
        root = Path(cfg.store_dir)
        if root.exists() and any(root.iterdir()):
            raise ConfigError("store_dir", f"{root} is not empty")
        root.mkdir(parents=True, exist_ok=True)
        self.root = root
        (root / "config.json").write_text(json.dumps(config_to_dict(cfg), indent=2), encoding="utf-8")
        b = cfg.broker
        self.broker = Broker(root / "broker", b.retention_bytes, b.queue_bound, b.ack_timeout_ms, cfg.fsync, self.clock)
        self.store = TimeSeriesStore(root / "store", fsync=cfg.fsync, clock=self.clock)
        self.dead_letters = DeadLetterStore(root / "deadletter", fsync=cfg.fsync)
        self.ingest = IngestService(self.broker)
        self.dispatcher = Dispatcher(self.broker, self.store, self.dead_letters, cfg.cleansing)
        an = cfg.analysis
        self.analyzer = MicroBatchAnalyzer(an.windows, self.store, self.broker, an.baseline_windows, an.weights)
        self.analyzer.attach()
        self.http = None
        if cfg.transport == "http":
            from vitalstream.ingest import make_http_server, serve_forever_in_thread

            self.http = make_http_server(self.ingest)
            serve_forever_in_thread(self.http)
        self._sink, self._sink_fh = _alert_writer(cfg.alerts_sink)
        self.agents: dict[str, EdgeAgent] = {}
        self.links: dict[str, FaultyLink] = {}
        self.streams = {}
        self.truth = {}
        for script in cfg.scenarios:
            w = script.worker_id
            ecg, gt = generate_ecg(script)
            accel, _ = generate_accel(script)
            self.streams[w] = (ecg, accel)
            self.truth[w] = gt
            if self.http is not None:
                inner = HttpLink(f"http://127.0.0.1:{self.http.server_port}{VITALS_PATH}")
            else:
                inner = InProcessLink(self.ingest.handle, self.clock)
            link = FaultyLink(inner, self.clock, OutageSchedule(list(cfg.faults.outages.get(w, []))),
                              cfg.faults.duplicate_delivery)
            buf = OfflineBuffer(root / "buffers" / f"{w}.buf", cfg.edge.buffer_events)
            up = Uploader(link, self.clock, CostLedger(), buf)
            self.links[w] = link
            self.agents[w] = EdgeAgent(w, up, script.ecg_fs, script.device_id, cfg.edge, self._on_alert)

    def _on_alert(self, alert: Alert):
        if self._sink is not None:
            self._sink(alert)
        value = json.dumps(alert.to_json(), sort_keys=True).encode("utf-8")
        self.store.put(Row(alert.worker_id, Metric.ALERT, alert.t_raised, 0, value))

    def _cloud(self, now: int):
        while self.dispatcher.run_once():
            pass
        self.analyzer.poll()
        self.analyzer.advance_to(now)

    def _pace(self, t_ms: int, wall0: float):
        if math.isinf(self.cfg.speed_factor):
            return
        delay = wall0 + t_ms / 1000.0 / self.cfg.speed_factor - time.monotonic()
        if delay > 0:
            time.sleep(delay)

    def run(self, max_drain_steps: int = 100_000) -> dict:
        step = self.cfg.step_ms
        end = int(math.ceil(max(s.duration_ms for s in self.cfg.scenarios) / step) * step)
        wall0 = time.monotonic()
        t = 0
        while t < end:
            t1 = t + step
            self.clock.now = t1
            for w, agent in self.agents.items():
                ecg, accel = self.streams[w]
                agent.feed_streams(ecg, accel, t, t1)
                agent.tick(t1)
            self._cloud(t1)
            self._pace(t1, wall0)
            t = t1
        for agent in self.agents.values():
            agent.finish(self.clock.now)
        self._cloud(self.clock.now)
        drained = 0
        while not all(a.uploader.idle for a in self.agents.values()):
            drained += 1
            if drained > max_drain_steps:
                raise RuntimeError("upload buffers did not drain")
            self.clock.now += step
            for agent in self.agents.values():
                agent.tick(self.clock.now)
            self._cloud(self.clock.now)
        self._cloud(self.clock.now)
        self.analyzer.flush()
        return self.summary()

    def summary(self) -> dict:
        total = CostLedger()
        per_worker = {}
        for w, agent in self.agents.items():
            led = agent.ledger
            for k, v in led.raw_by_stream.items():
                total.raw_by_stream[k] += v
            for k, v in led.sent_by_stream.items():
                total.sent_by_stream[k] += v
            per_worker[w] = {
                **cost_report(led),
                "alerts": len(agent.alerts),
                "events_produced": len(agent.produced_rri) + len(agent.produced_posture),
                "lost_events": agent.uploader.buffer.lost_events,
            }
        cost = cost_report(total)
        d = self.dispatcher
        return {
            "events_ingested": self.ingest.events_ingested,
            "accepted": d.accepted,
            "rejected": sum(d.rejected.values()),
            "rejected_by_reason": dict(sorted(d.rejected.items())),
            "dead_lettered": d.dead_lettered,
            "duplicates": self.ingest.duplicates,
            "windows_emitted": len(self.analyzer.emitted),
            "late_events": self.analyzer.late_events,
            "alerts": sum(len(a.alerts) for a in self.agents.values()),
            "raw_bytes": cost["raw_bytes"],
            "sent_bytes": cost["sent_bytes"],
            "reduction_ratio": cost["reduction_ratio"],
            "per_worker": per_worker,
        }

    def write_outputs(self, summary: dict):
        ledger = {"workers": {w: a.ledger.to_dict() for w, a in self.agents.items()}}
        (self.root / "ledger.json").write_text(json.dumps(ledger, indent=2, sort_keys=True), encoding="utf-8")
        (self.root / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True), encoding="utf-8")

    def close(self):
        if self.http is not None:
            self.http.shutdown()
            self.http.server_close()
        self.dispatcher.close()
        self.broker.close()
        self.store.close()
        self.dead_letters.close()
        if self._sink_fh is not None:
            self._sink_fh.close()


def run(cfg: PipelineConfig) -> RunResult:
    """Run a whole config; status 0 on success, 2 on a runtime failure (partial summary)."""
    pipe = Pipeline(cfg)
    status = 0
    try:
        summary = pipe.run()
    except Exception as exc:  # component crash: report what we have
        log.exception("pipeline failed")
        status = 2
        summary = pipe.summary()
        summary["error"] = f"{type(exc).__name__}: {exc}"
    pipe.write_outputs(summary)
    result = RunResult(status, summary, pipe.agents, pipe.links, pipe.truth, pipe.analyzer)
    pipe.close()
    return result


def replay(store_dir) -> dict:
    """Re-run the analysis over a finished run's CLEANSED log and compare with what was stored."""
    root = Path(store_dir)
    cfg_path = root / "config.json"
    if not cfg_path.is_file():
        raise ConfigError("store_dir", f"{root} holds no finished run (config.json missing)")
    cfg = config_from_dict({**json.loads(cfg_path.read_text(encoding="utf-8")), "store_dir": str(root)})
    broker = Broker(root / "broker", fsync=False)
    try:
        envs = broker.messages(Topics.CLEANSED)
    finally:
        broker.close()
    an = cfg.analysis
    results = analysis.replay_cleansed(envs, an.windows, an.baseline_windows, an.weights)
    with TimeSeriesStore(root / "store", fsync=False) as store:
        stored = {}
        for metric in (Metric.FATIGUE, Metric.RELAXATION):
            for row in store.rows(metric):
                stored[(row.worker_id, metric.value, row.t_ms)] = row.value
    replayed = {(r.worker_id, r.metric, r.window_start): r.to_bytes() for r in results}
    return {"windows": len(results), "stored": len(stored), "identical": replayed == stored}
