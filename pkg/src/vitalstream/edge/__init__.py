"""Edge (phone-side) processing: R-peaks, posture, alerts, uploads."""

from vitalstream.edge.agent import AlertSink, EdgeAgent, EdgeConfig, peaks_to_rri
from vitalstream.edge.detect import DetectorParams, StreamingPeakDetector, detect_r_peaks
from vitalstream.edge.posture import (
    DangerMonitor,
    PostureParams,
    PostureState,
    PostureTracker,
    classify_posture,
    danger_monitor,
)
from vitalstream.edge.uplink import CostLedger, InProcessLink, OfflineBuffer, OutageSchedule, Uploader, cost_report

__all__ = [
    "AlertSink", "CostLedger", "DangerMonitor", "DetectorParams", "EdgeAgent", "EdgeConfig",
    "InProcessLink", "OfflineBuffer", "OutageSchedule", "PostureParams", "PostureState",
    "PostureTracker", "StreamingPeakDetector", "Uploader", "classify_posture", "cost_report",
    "danger_monitor", "detect_r_peaks", "peaks_to_rri",
]
