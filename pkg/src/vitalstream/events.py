"""Primary processed data exchanged between the edge and the cloud side."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field


class Posture(str, enum.Enum):
    UPRIGHT = "UPRIGHT"
    BENT = "BENT"
    LYING = "LYING"
    DYNAMIC = "DYNAMIC"


class Stream(str, enum.Enum):
    RRI = "rri"
    POSTURE = "posture"


@dataclass(frozen=True, slots=True)
class RriEvent:
    """One R-R interval, stamped with the time of the later R-peak."""

    worker_id: str
    t: int
    rri_ms: float
    seq: int

    def __post_init__(self):
        if not self.rri_ms > 0:
            raise ValueError(f"rri_ms must be positive, got {self.rri_ms!r}")


@dataclass(frozen=True, slots=True)
class PostureEvent:
    worker_id: str
    t: int
    label: Posture
    tilt_deg: float
    seq: int
    # "ok" or "low_gravity"; local only, never on the wire
    quality: str = field(default="ok", compare=False)

    def __post_init__(self):
        if not 0.0 <= self.tilt_deg <= 180.0:
            raise ValueError(f"tilt_deg out of [0, 180]: {self.tilt_deg!r}")


@dataclass(frozen=True, slots=True)
class Batch:
    """An upload unit: events of one worker, grouped by stream."""

    worker_id: str
    device_id: str = ""
    rri: tuple[RriEvent, ...] = ()
    posture: tuple[PostureEvent, ...] = ()

    def __len__(self):
        return len(self.rri) + len(self.posture)

    def events(self):
        yield from ((Stream.RRI, e) for e in self.rri)
        yield from ((Stream.POSTURE, e) for e in self.posture)


@dataclass(frozen=True, slots=True)
class Alert:
    worker_id: str
    t_raised: int
    duration_ms: int
    label: Posture = Posture.BENT
    kind: str = "DANGEROUS_POSTURE"

    def to_json(self) -> dict:
        return {
            "worker_id": self.worker_id,
            "t_raised_ms": self.t_raised,
            "kind": self.kind,
            "duration_ms": self.duration_ms,
        }
