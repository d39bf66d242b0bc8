import math

import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st

from oracles import cvi_two_pass, fatigue_direct, poincare_two_pass, rmssd_direct
from vitalstream import wire
from vitalstream.analysis import (
    FATIGUE,
    RELAXATION,
    AnalysisResult,
    Baseline,
    FatigueWeights,
    MicroBatchAnalyzer,
    PoincareAccumulator,
    Quality,
    WindowConfig,
    WindowStats,
    assign_window,
    compute_cvi,
    compute_fatigue,
    establish_baseline,
    fatigue_index,
    poincare_sd,
    replay_cleansed,
    rmssd,
)
from vitalstream.broker import Topics
from vitalstream.events import Batch, RriEvent
from vitalstream.store import Metric

CVI5 = WindowConfig(RELAXATION, min_events=5)
FAT5 = WindowConfig(FATIGUE, min_events=5)

rri_lists = st.lists(st.floats(300, 2000, allow_nan=False), min_size=5, max_size=300)


def test_cvi_worked_example():
    sd1, sd2 = poincare_sd([800, 820, 790, 810, 805])
    assert sd1 == pytest.approx(14.658, abs=1e-3)
    assert sd2 == pytest.approx(5.229, abs=1e-3)
    res = compute_cvi([800, 820, 790, 810, 805], CVI5)
    assert res.quality == Quality.OK and res.value == pytest.approx(3.089, abs=1e-3)
    assert res.value == pytest.approx(math.log10(16 * sd1 * sd2), rel=1e-12)


def test_constant_window_degenerate():
    res = compute_cvi([800.0] * 30, WindowConfig(RELAXATION))
    assert res.quality == Quality.DEGENERATE and res.value is None


def test_too_few_events():
    res = compute_cvi([800, 810, 790], WindowConfig(RELAXATION))
    assert res.quality == Quality.INSUFFICIENT_DATA and res.reason == "TOO_FEW_EVENTS"


def test_scale_by_ten_adds_two():
    base = compute_cvi([800, 820, 790, 810, 805], CVI5).value
    scaled = compute_cvi([8000, 8200, 7900, 8100, 8050], CVI5).value
    assert abs(scaled - base - 2.0) <= 1e-9


def non_degenerate(rri):
    sd1, sd2 = poincare_two_pass(rri)
    return sd1 > 1e-3 and sd2 > 1e-3


@settings(max_examples=200)
@given(rri_lists, st.floats(0.01, 100))
def test_cvi_scale_law(rri, k):
    assume(non_degenerate(rri))
    a = compute_cvi(rri, CVI5).value
    b = compute_cvi([k * r for r in rri], CVI5).value
    assert abs(b - a - 2 * math.log10(k)) <= 1e-9


@settings(max_examples=200)
@given(rri_lists)
def test_cvi_reversal_invariance(rri):
    assume(non_degenerate(rri))
    f, r = poincare_sd(rri), poincare_sd(rri[::-1])
    assert abs(f[0] - r[0]) <= 1e-12 * max(1.0, f[0]) and abs(f[1] - r[1]) <= 1e-12 * max(1.0, f[1])
    assert abs(compute_cvi(rri, CVI5).value - compute_cvi(rri[::-1], CVI5).value) <= 1e-12


@settings(max_examples=200)
@given(st.lists(st.floats(300, 2000, allow_nan=False), min_size=2, max_size=1000))
def test_streaming_matches_two_pass(rri):
    acc = PoincareAccumulator()
    for r in rri:
        acc.push(r)
    o1, o2 = poincare_two_pass(rri)
    assert acc.sd1 == pytest.approx(o1, rel=1e-9, abs=1e-9)
    assert acc.sd2 == pytest.approx(o2, rel=1e-9, abs=1e-9)
    if non_degenerate(rri) and len(rri) >= 5:
        assert compute_cvi(rri, CVI5).value == pytest.approx(cvi_two_pass(rri), rel=1e-9)


@given(st.lists(st.floats(300, 2000, allow_nan=False), min_size=2, max_size=200))
def test_rmssd_matches_direct(rri):
    assert rmssd(rri) == pytest.approx(rmssd_direct(rri), rel=1e-9, abs=1e-9)


def test_fatigue_worked_example():
    b = Baseline("w", 850.0, 40.0, 5)
    assert fatigue_index(800.0, 30.0, b) == pytest.approx(100 * (0.5 * 50 / 850 + 0.5 * 10 / 40))
    assert fatigue_index(800.0, 30.0, b) == pytest.approx(15.44, abs=0.01)


def test_fatigue_zero_when_identical_and_when_dominating():
    b = Baseline("w", 850.0, 40.0, 5)
    assert fatigue_index(850.0, 40.0, b) == 0.0
    assert fatigue_index(900.0, 55.0, b) == 0.0


def test_fatigue_on_window_identical_to_baseline():
    rri = [800.0, 820.0, 790.0, 810.0, 805.0] * 5
    s = WindowStats(float(np.mean(rri)), rmssd(rri), len(rri))
    b = establish_baseline("w", [s], k=1)
    res = compute_fatigue(rri, b, FAT5)
    assert res.quality == Quality.OK and res.value == pytest.approx(0.0, abs=1e-9)


def test_fatigue_without_baseline():
    res = compute_fatigue([800.0] * 30, None, WindowConfig(FATIGUE))
    assert res.quality == Quality.INSUFFICIENT_DATA and res.reason == "NO_BASELINE" and res.value is None


def test_fatigue_weights_configurable():
    b = Baseline("w", 1000.0, 40.0, 5)
    assert fatigue_index(900.0, 40.0, b, FatigueWeights(1.0, 0.0)) == pytest.approx(10.0)


@settings(max_examples=300)
@given(
    st.floats(300, 2000), st.floats(0.1, 300), st.floats(300, 2000), st.floats(1, 300),
    st.floats(0, 1), st.floats(0, 1),
)
def test_fatigue_bounds_and_oracle(mean_w, rmssd_w, mean_b, rmssd_b, wa, wb):
    b = Baseline("w", mean_b, rmssd_b, 5)
    f = fatigue_index(mean_w, rmssd_w, b)
    assert 0.0 <= f <= 100.0
    assert f == pytest.approx(fatigue_direct(mean_w, rmssd_w, mean_b, rmssd_b), abs=1e-9)
    assert 0.0 <= fatigue_index(mean_w, rmssd_w, b, FatigueWeights(wa, wb)) <= 100.0
    if mean_w >= mean_b and rmssd_w >= rmssd_b:
        assert f == 0.0


@given(st.floats(500, 1500), st.floats(5, 100), st.floats(0, 0.5), st.floats(0, 0.5), st.floats(1, 100))
def test_fatigue_monotone_in_mean_drop(mean_b, rmssd_b, d1, d2, rmssd_w):
    b = Baseline("w", mean_b, rmssd_b, 5)
    lo, hi = sorted([d1, d2])
    assert fatigue_index(mean_b * (1 - lo), rmssd_w, b) <= fatigue_index(mean_b * (1 - hi), rmssd_w, b)


def test_baseline_from_equal_windows():
    ws = [WindowStats(812.0, 33.0, 70)] * 5
    b = establish_baseline("w", ws)
    assert (b.mean_rri_ms, b.rmssd_ms, b.established_over) == (812.0, 33.0, 5)


def test_baseline_weighted_average():
    b = establish_baseline("w", [WindowStats(800.0, 30.0, 50), WindowStats(900.0, 50.0, 50)], k=2)
    assert b.mean_rri_ms == 850.0 and b.rmssd_ms == 40.0
    b = establish_baseline("w", [WindowStats(800.0, 30.0, 30), WindowStats(900.0, 50.0, 10)], k=2)
    assert b.mean_rri_ms == 825.0


def test_baseline_needs_k_windows():
    assert establish_baseline("w", [WindowStats(800.0, 30.0, 50)] * 4, k=5) is None


@pytest.mark.parametrize("t,start", [(0, 0), (59_999, 0), (60_000, 60_000), (125_000, 120_000)])
def test_assign_window(t, start):
    assert assign_window(t, WindowConfig(FATIGUE)) == start


@pytest.mark.parametrize(
    "kw",
    [dict(window_s=0), dict(tick_s=-1), dict(allowed_lateness_s=-1), dict(min_events=1), dict(metric="HEART")],
)
def test_window_config_validation(kw):
    args = dict(metric=FATIGUE) | kw
    with pytest.raises(ValueError):
        WindowConfig(**args)


def test_result_roundtrip():
    r = AnalysisResult("w", FATIGUE, 0, 60_000, 12.5, 70, Quality.OK)
    assert AnalysisResult.from_bytes(r.to_bytes()) == r
    assert r.to_bytes() == AnalysisResult.from_bytes(r.to_bytes()).to_bytes()


# micro-batch job


def jittered(n, t0=0, seed=0, mean=800.0):
    rng = np.random.default_rng(seed)
    t, out = t0, []
    for i in range(n):
        r = float(mean + rng.normal(0, 20))
        t += int(round(r))
        out.append((t, r, i + 1))
    return out


def feed(an, events, worker="w1"):
    for t, r, s in events:
        an.add(worker, t, r, s)


def test_three_windows_six_results(store, broker):
    an = MicroBatchAnalyzer(store=store, broker=broker, baseline_windows=1)
    events = [e for e in jittered(300) if e[0] < 180_000]
    feed(an, events)
    out = an.tick(180_000 + 30_000)
    assert len(out) == 6
    assert sorted((r.metric, r.window_start) for r in out) == sorted(
        (m, s) for m in (FATIGUE, RELAXATION) for s in (0, 60_000, 120_000)
    )
    assert len(store.rows(Metric.FATIGUE)) == 3 and len(store.rows(Metric.RELAXATION)) == 3
    assert len(broker.messages(Topics.ANALYZED)) == 6
    assert an.tick(10**9) == []


def test_window_waits_for_lateness():
    an = MicroBatchAnalyzer()
    feed(an, [e for e in jittered(100) if e[0] < 60_000])
    assert an.tick(60_000) == [] and an.tick(89_999) == []
    assert len(an.tick(90_000)) == 2


def test_late_event_counted_not_reemitted():
    an = MicroBatchAnalyzer()
    feed(an, [e for e in jittered(100) if e[0] < 60_000])
    assert len(an.tick(90_000)) == 2
    an.add("w1", 59_000, 800.0, 999)
    assert an.late_events == 1 and an.late_by_metric[FATIGUE] == 1
    assert an.flush() == []
    assert len(an.emitted) == 2


def test_duplicate_seq_ignored():
    an = MicroBatchAnalyzer()
    ev = [e for e in jittered(100) if e[0] < 60_000]
    feed(an, ev)
    feed(an, ev)
    res = an.flush()
    assert {r.n_events for r in res} == {len(ev)}


def test_baseline_first_k_ok_windows():
    an = MicroBatchAnalyzer(baseline_windows=2)
    feed(an, jittered(400))
    res = {(r.metric, r.window_start): r for r in an.flush()}
    assert res[(FATIGUE, 0)].reason == "NO_BASELINE"
    assert res[(FATIGUE, 60_000)].quality == Quality.OK
    assert an.baseline("w1").established_over == 2


def test_per_metric_window_sizes():
    an = MicroBatchAnalyzer({FATIGUE: WindowConfig(FATIGUE, 60), RELAXATION: WindowConfig(RELAXATION, 30)})
    feed(an, [e for e in jittered(200) if e[0] < 120_000])
    res = an.flush()
    assert sum(r.metric == FATIGUE for r in res) == 2 and sum(r.metric == RELAXATION for r in res) == 4


def test_advance_to_runs_ticks_on_schedule():
    an = MicroBatchAnalyzer()
    feed(an, [e for e in jittered(100) if e[0] < 60_000])
    assert an.advance_to(85_000) == []
    assert len(an.advance_to(95_000)) == 2  # tick at 90 s


class FlakyStore:
    def __init__(self, real, failures):
        self.real, self.failures = real, failures

    def put(self, row):
        if self.failures:
            self.failures -= 1
            raise OSError("disk full")
        return self.real.put(row)


def test_store_failure_retried_next_tick(store):
    an = MicroBatchAnalyzer(store=FlakyStore(store, 1))
    feed(an, [e for e in jittered(100) if e[0] < 60_000])
    first = an.tick(90_000)
    assert len(first) == 1
    second = an.tick(100_000)
    assert len(second) == 1 and len(store.rows()) == 2
    assert {r.metric for r in first + second} == {FATIGUE, RELAXATION}


def envelopes_for(broker, events, worker="w1", per=7):
    for i in range(0, len(events), per):
        chunk = events[i : i + per]
        b = Batch(worker, "d", tuple(RriEvent(worker, t, r, s) for t, r, s in chunk))
        broker.clock = lambda t=chunk[-1][0]: t
        broker.publish(Topics.CLEANSED, worker, wire.encode_binary(b))


def test_broker_driven_exactly_once_with_redelivery(tmp_path, store):
    from vitalstream.broker import Broker

    b = Broker(tmp_path / "b", fsync=False, clock=lambda: 0)
    b2 = Broker(tmp_path / "b2", fsync=False, clock=lambda: 0)
    events = jittered(500)
    envelopes_for(b, events)
    an = MicroBatchAnalyzer(store=store, broker=b2, baseline_windows=2)
    an.attach(name=None)
    an.poll()
    # redeliver everything again to the same analyzer
    for env in b.messages(Topics.CLEANSED):
        an.add_envelope(env)
    an.flush()
    keys = [(r.worker_id, r.metric, r.window_start) for r in an.emitted]
    assert len(keys) == len(set(keys))
    assert len(store.rows(Metric.FATIGUE)) == len({k for k in keys if k[1] == FATIGUE})
    replayed = replay_cleansed(b.messages(Topics.CLEANSED), baseline_windows=2)
    assert [r.to_bytes() for r in replayed] == [r.to_bytes() for r in an.emitted]
    b.close(), b2.close()


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.permutations(list(range(12))))
def test_result_independent_of_arrival_order_within_lateness(seed, order):
    # shuffle 12 chunks of one-minute data; all arrive before any window closes
    events = jittered(600, seed=seed)
    chunks = [events[i::12] for i in range(12)]
    a1, a2 = MicroBatchAnalyzer(baseline_windows=2), MicroBatchAnalyzer(baseline_windows=2)
    feed(a1, events)
    for i in order:
        feed(a2, chunks[i])
    assert [r.to_bytes() for r in a1.flush()] == [r.to_bytes() for r in a2.flush()]
