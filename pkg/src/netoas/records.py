"""Session recording data model shared by the fsm, detectors and assessment.

An ActivityLog is the time-ordered record of one session: state intervals,
tool track samples, detected events and completed placements.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field


class Status(enum.Enum):
    STATIONARY = "stationary"
    PICKING = "picking"
    MOVING = "moving"


class EventKind(enum.Enum):
    HIT = "hit"
    TUG = "tug"
    DROP = "drop"
    JERK = "jerk"
    SMOOTHNESS_WARN = "smoothness_warn"


@dataclass(frozen=True)
class EventRecord:
    """One detected skill error; intensity is kind-specific magnitude."""

    kind: EventKind
    frame_seq: int
    intensity: float
    # secondary magnitude, e.g. mean cell delta for hits; 0 when unused
    aux: float = 0.0

    def __post_init__(self):
        if self.intensity < 0:
            raise ValueError("event intensity must be >= 0")


@dataclass
class StateInterval:
    status: Status
    start_seq: int
    end_seq: int | None = None  # half-open; None while the interval is live

    def frames(self) -> int:
        if self.end_seq is None:
            raise ValueError("interval still open")
        return self.end_seq - self.start_seq


@dataclass(frozen=True)
class TrackSample:
    seq: int
    x: float
    y: float
    valid: bool


@dataclass(frozen=True)
class Placement:
    source: int
    target: int
    start_seq: int  # first frame of the Moving interval that ended here
    end_seq: int    # frame of the Moving->Stationary transition


@dataclass
class ActivityLog:
    fps: float
    intervals: list[StateInterval] = field(default_factory=list)
    track: list[TrackSample] = field(default_factory=list)
    events: list[EventRecord] = field(default_factory=list)
    placements: list[Placement] = field(default_factory=list)
    closed: bool = False

    def open_interval(self, status: Status, seq: int) -> None:
        if self.intervals and self.intervals[-1].end_seq is None:
            self.intervals[-1].end_seq = seq
        self.intervals.append(StateInterval(status, seq))

    def close(self, end_seq: int) -> None:
        if self.intervals and self.intervals[-1].end_seq is None:
            self.intervals[-1].end_seq = end_seq
        self.closed = True

    def frames_to_ms(self, frames: int) -> float:
        return frames * 1000.0 / self.fps

    def completed_intervals(self, status: Status) -> list[StateInterval]:
        return [iv for iv in self.intervals
                if iv.status is status and iv.end_seq is not None]

    def events_of(self, kind: EventKind) -> list[EventRecord]:
        return [e for e in self.events if e.kind is kind]
