"""Export stored fatigue/relaxation series as CSV or a static SVG chart."""

from __future__ import annotations

import csv
import io
import math

from vitalstream.analysis import AnalysisResult, Quality
from vitalstream.store import Metric, TimeSeriesStore

CSV_HEADER = ["window_start_ms", "value", "quality", "n_events"]


def load_results(store: TimeSeriesStore, worker_id: str, metric: str, t_from: int, t_to: int) -> list[AnalysisResult]:
    metric = Metric(metric.upper())
    if metric not in (Metric.FATIGUE, Metric.RELAXATION):
        raise ValueError(f"reportable metrics are FATIGUE and RELAXATION, got {metric.value}")
    return [AnalysisResult.from_bytes(r.value) for r in store.scan(worker_id, metric, t_from, t_to)]


def to_csv(results) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_HEADER)
    for r in results:
        w.writerow([r.window_start, "" if r.value is None else repr(float(r.value)), r.quality, r.n_events])
    return buf.getvalue()


def to_svg(results, title: str = "") -> str:
    """Line chart of value over window start; non-OK windows appear as gaps."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    matplotlib.rcParams["svg.hashsalt"] = "vitalstream"
    xs = [r.window_start / 60000.0 for r in results]
    ys = [r.value if r.quality == Quality.OK else math.nan for r in results]
    fig, ax = plt.subplots(figsize=(7, 3))
    ax.plot(xs, ys, marker="o", lw=1.5)
    ax.set_xlabel("window start (min)")
    ax.set_ylabel(results[0].metric.lower() if results else "value")
    ax.set_title(title)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    buf = io.StringIO()
    fig.savefig(buf, format="svg", metadata={"Date": None})
    plt.close(fig)
    return buf.getvalue()
