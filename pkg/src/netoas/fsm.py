"""Frame-level sub-activity classification over ring-segmentation masks.

The cycle is strictly Stationary -> Picking -> Moving -> Stationary. A peg
holds the ring; leaving its small box starts a pick, leaving its big box
starts a move, and arriving in the lit target peg's small box completes a
placement and lights a fresh target.

Transitions are debounced: a state change requires its condition to hold
on two consecutive frames, which suppresses single-frame segmentation
flicker.
"""

from __future__ import annotations

import random
from dataclasses import dataclass
from typing import Protocol

from .calibration import CalibrationProfile
from .imaging import BinaryMask, mask_sum_in_rect
from .records import ActivityLog, Status

DEBOUNCE_FRAMES = 2

PEG_IDS = tuple(range(1, 13))


class AmbiguousStart(ValueError):
    """Zero or multiple pegs qualify as the ring holder on the first frame."""


@dataclass(frozen=True)
class ActivityState:
    status: Status
    ring_id: int | None
    led_id: int | None
    since_frame: int

    def __post_init__(self):
        if self.status is not Status.STATIONARY and self.ring_id is None:
            raise ValueError("non-stationary state must carry a ring peg")
        if self.led_id is not None and self.led_id == self.ring_id:
            raise ValueError("target peg equals ring peg")


@dataclass(frozen=True)
class PlacementEvent:
    source: int
    target: int
    frame_seq: int


class TargetPort(Protocol):
    """Sink accepting lit-peg commands; at most one peg lit at a time."""

    def lit(self, peg_id: int) -> None: ...


class SimulatedPort:
    """Records every lit command; drives the synthetic scene and the UI."""

    def __init__(self):
        self.commands: list[int] = []

    def lit(self, peg_id: int) -> None:
        self.commands.append(peg_id)

    @property
    def current(self) -> int | None:
        return self.commands[-1] if self.commands else None


class SerialStubPort:
    """Emits the single peg byte 0x01..0x0C to a binary sink.

    The physical LED controller is replaced by whatever sink is wired in.
    """

    def __init__(self, sink):
        self._sink = sink

    def lit(self, peg_id: int) -> None:
        if not 1 <= peg_id <= 12:
            raise ValueError(f"peg id {peg_id} out of range")
        self._sink.write(bytes([peg_id]))


def draw_target(rng: random.Random, exclude: int) -> int:
    """Uniform target peg draw over 1..12 excluding the current ring peg.

    Shared with the scene scripter so an identically seeded generator
    reproduces the exact target sequence.
    """
    return rng.choice([k for k in PEG_IDS if k != exclude])


class ActivityMachine:
    """Single-writer state machine; one instance per session."""

    def __init__(self, calib: CalibrationProfile, rng_seed: int,
                 port: TargetPort | None = None,
                 debounce: int = DEBOUNCE_FRAMES):
        self._calib = calib
        self._rng = random.Random(rng_seed)
        self._port = port if port is not None else SimulatedPort()
        self._debounce = max(1, debounce)
        self._pending = 0
        self._state: ActivityState | None = None

    @property
    def state(self) -> ActivityState:
        if self._state is None:
            raise ValueError("state machine not started")
        return self._state

    @property
    def started(self) -> bool:
        return self._state is not None

    def start(self, first_mask: BinaryMask, frame_seq: int = 1) -> ActivityState:
        """Locate the ring, enter Stationary and light the first target."""
        calib = self._calib
        holders = [k for k in PEG_IDS
                   if mask_sum_in_rect(first_mask, calib.small(k))
                   >= calib.thresh_stationary]
        if len(holders) != 1:
            raise AmbiguousStart(
                f"{len(holders)} pegs hold enough ring pixels, expected exactly 1")
        ring_id = holders[0]
        led_id = draw_target(self._rng, ring_id)
        self._port.lit(led_id)
        self._state = ActivityState(Status.STATIONARY, ring_id, led_id, frame_seq)
        self._pending = 0
        return self._state

    def step(self, mask: BinaryMask,
             frame_seq: int) -> tuple[ActivityState, list[PlacementEvent]]:
        state = self.state
        calib = self._calib
        events: list[PlacementEvent] = []

        if state.status is Status.STATIONARY:
            leave = (mask_sum_in_rect(mask, calib.small(state.ring_id))
                     < calib.thresh_stationary)
            if self._hold(leave):
                self._state = ActivityState(Status.PICKING, state.ring_id,
                                            state.led_id, frame_seq)
        elif state.status is Status.PICKING:
            leave = (mask_sum_in_rect(mask, calib.big(state.ring_id))
                     < calib.thresh_picking)
            if self._hold(leave):
                self._state = ActivityState(Status.MOVING, state.ring_id,
                                            state.led_id, frame_seq)
        else:  # MOVING
            arrived = (mask_sum_in_rect(mask, calib.small(state.led_id))
                       >= calib.thresh_moving)
            if self._hold(arrived):
                events.append(PlacementEvent(source=state.ring_id,
                                             target=state.led_id,
                                             frame_seq=frame_seq))
                new_ring = state.led_id
                new_led = draw_target(self._rng, new_ring)
                self._port.lit(new_led)
                self._state = ActivityState(Status.STATIONARY, new_ring,
                                            new_led, frame_seq)
        return self._state, events

    def _hold(self, condition: bool) -> bool:
        """Debounce: true once the condition held ``debounce`` frames running."""
        self._pending = self._pending + 1 if condition else 0
        if self._pending >= self._debounce:
            self._pending = 0
            return True
        return False


@dataclass(frozen=True)
class DwellTimes:
    grasp_mean_ms: float
    grasp_count: int
    move_mean_ms: float
    move_count: int


def dwell_times(log: ActivityLog) -> DwellTimes:
    """Mean grasp (Picking) and move (Moving) interval durations in ms."""
    if not log.closed:
        raise ValueError("log must be closed")

    def stats(status: Status) -> tuple[float, int]:
        ivs = log.completed_intervals(status)
        if not ivs:
            return 0.0, 0
        mean_frames = sum(iv.frames() for iv in ivs) / len(ivs)
        return log.frames_to_ms(mean_frames), len(ivs)

    g_mean, g_count = stats(Status.PICKING)
    m_mean, m_count = stats(Status.MOVING)
    return DwellTimes(g_mean, g_count, m_mean, m_count)
