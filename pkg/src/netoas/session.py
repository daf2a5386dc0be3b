"""Session orchestration: timed runs over a frame source with live feedback.

Per frame the engine segments the ring, advances the activity machine,
tracks the tool tip, runs the error detectors and evaluates the feedback
policy. Live sources hand frames over through a bounded drop-oldest queue
so analysis always works on the present; file sources never drop.
"""

from __future__ import annotations

import threading
from collections import deque
from dataclasses import dataclass, field
from typing import Iterable, Iterator

from .assessment import (FeatureVector, SessionSynopsis, extract_features,
                         load_model, predict, render_synopsis)
from .calibration import CalibrationProfile, load_profile
from .detectors import DropDetector, HitDetector, TugDetector
from .fsm import ActivityMachine, ActivityState, AmbiguousStart, TargetPort
from .imaging import Frame, segment_by_hue
from .metrics import InsufficientData, TrackSegment, smoothness
from .records import (ActivityLog, EventKind, EventRecord, Placement, Status,
                      TrackSample)
from .tracker import ToolTracker

SCOPE_ANGLES = (0, 30, 45)
TILTS = ("straight", "left", "right")
SUPPORTED_FPS = (25.0, 50.0)

QUEUE_MAXLEN = 4
STALL_TIMEOUT_S = 2.0


class SourceStall(RuntimeError):
    """Live source produced no frame within the stall timeout."""


@dataclass(frozen=True)
class SessionConfig:
    calibration_path: str
    duration_s: float = 180.0
    fps: float = 25.0
    level: tuple[int, str] = (0, "straight")
    model_path: str | None = None
    seed: int = 0
    user: str | None = None

    def __post_init__(self):
        if self.duration_s <= 0:
            raise ValueError("duration must be positive")
        if float(self.fps) not in SUPPORTED_FPS:
            raise ValueError(f"fps must be one of {SUPPORTED_FPS}")
        angle, tilt = self.level
        if angle not in SCOPE_ANGLES or tilt not in TILTS:
            raise ValueError(f"level must be one of {SCOPE_ANGLES} x {TILTS}")

    @property
    def max_frames(self) -> int:
        return int(round(self.duration_s * float(self.fps)))


@dataclass(frozen=True)
class FeedbackMessage:
    """On-screen warning; must trail its trigger by at most 2 frames."""

    kind: EventKind
    frame_seq: int
    text: str
    intensity: float = 0.0


_EVENT_TEXT = {
    EventKind.HIT: "board hit: {0:.0f} cells moved",
    EventKind.TUG: "ring tugged: deformation {0:.1f}",
    EventKind.DROP: "ring dropped: {0:.0f} px from the tool",
}


@dataclass(frozen=True)
class FeedbackWindow:
    """Inputs to the per-frame feedback decision."""

    seq: int
    status: Status | None
    new_events: tuple[EventRecord, ...]
    track: tuple[TrackSample, ...]   # trailing one second of samples
    fps: float
    smoothness_thresh: float
    last_warn_seq: int | None = None


def feedback_policy(window: FeedbackWindow) -> list[FeedbackMessage]:
    """One message per new error event, plus a rate-limited smoothness
    warning while moving rough over the trailing one-second window."""
    messages = [
        FeedbackMessage(kind=e.kind, frame_seq=e.frame_seq,
                        text=_EVENT_TEXT[e.kind].format(e.intensity),
                        intensity=e.intensity)
        for e in window.new_events if e.kind in _EVENT_TEXT
    ]
    if window.status is Status.MOVING:
        throttled = (window.last_warn_seq is not None
                     and window.seq - window.last_warn_seq < window.fps)
        pts = [(s.seq, s.x, s.y) for s in window.track if s.valid]
        if not throttled and len(pts) >= 3:
            try:
                value = smoothness(TrackSegment(tuple(pts)))
            except (InsufficientData, ValueError):
                value = 0.0
            if value >= window.smoothness_thresh:
                messages.append(FeedbackMessage(
                    kind=EventKind.SMOOTHNESS_WARN, frame_seq=window.seq,
                    text=f"move smoothly: speed varies by {value:.1f} px/frame",
                    intensity=value))
    return messages


class SessionEngine:
    """Wires segmentation, the state machine, the tracker and the detectors
    over one frame stream. Sequential; one instance per session."""

    def __init__(self, profile: CalibrationProfile, fps: float, seed: int,
                 port: TargetPort | None = None):
        self.profile = profile
        self.log = ActivityLog(fps=float(fps))
        self.machine = ActivityMachine(profile, rng_seed=seed, port=port)
        # tracker needs the frame size, so it is built on the first frame
        self.tracker: ToolTracker | None = None
        self.hit = HitDetector(profile)
        self.tug = TugDetector(profile)
        self.drop = DropDetector(profile)
        self.feedback: list[FeedbackMessage] = []
        self._prev_frame: Frame | None = None
        self._window: deque[TrackSample] = deque(maxlen=max(3, int(round(fps))))
        self._last_warn: int | None = None
        self._last_status: Status | None = None
        self._moving_start: int | None = None
        self._last_seq: int | None = None
        self._closed = False

    @property
    def state(self) -> ActivityState | None:
        return self.machine.state if self.machine.started else None

    def step(self, frame: Frame) -> tuple[ActivityState | None,
                                          list[FeedbackMessage]]:
        """Process one frame; returns the post-frame state and new feedback."""
        if self._closed:
            raise ValueError("session already finished")
        if self.tracker is None:
            self.tracker = ToolTracker.from_template(
                self.profile.tool_template, frame.width, frame.height)
        seq = frame.seq
        self._last_seq = seq
        mask = segment_by_hue(frame, (self.profile.ring_hue.lo,
                                      self.profile.ring_hue.hi),
                              self.profile.ring_hue.min_sat,
                              self.profile.ring_hue.min_val)

        placements = []
        if not self.machine.started:
            try:
                state = self.machine.start(mask, frame_seq=seq)
            except AmbiguousStart:
                state = None
        else:
            state, placements = self.machine.step(mask, frame_seq=seq)

        if state is not None and state.status is not self._last_status:
            self.log.open_interval(state.status, seq)
            if state.status is Status.MOVING:
                self._moving_start = seq
            self._last_status = state.status
        for ev in placements:
            self.log.placements.append(Placement(
                source=ev.source, target=ev.target,
                start_seq=self._moving_start or ev.frame_seq,
                end_seq=ev.frame_seq))

        estimate = self.tracker.step(frame)
        sample = TrackSample(seq, estimate.center[0], estimate.center[1],
                             estimate.valid)
        self.log.track.append(sample)
        self._window.append(sample)

        new_events: list[EventRecord] = []
        if self._prev_frame is not None:
            ev = self.hit.step(self._prev_frame, frame)
            if ev:
                new_events.append(ev)
        if state is not None:
            ev = self.tug.step(state, mask, seq)
            if ev:
                new_events.append(ev)
            ev = self.drop.step(state, estimate, mask, seq)
            if ev:
                new_events.append(ev)
        self.log.events.extend(new_events)

        messages = feedback_policy(FeedbackWindow(
            seq=seq, status=state.status if state else None,
            new_events=tuple(new_events), track=tuple(self._window),
            fps=self.log.fps,
            smoothness_thresh=self.profile.smoothness_warn_thresh,
            last_warn_seq=self._last_warn))
        for m in messages:
            if m.kind is EventKind.SMOOTHNESS_WARN:
                self._last_warn = m.frame_seq
                self.log.events.append(EventRecord(
                    EventKind.SMOOTHNESS_WARN, m.frame_seq,
                    intensity=m.intensity))
        self.feedback.extend(messages)

        self._prev_frame = frame
        return state, messages

    def finish(self) -> tuple[ActivityLog, FeatureVector]:
        """Close the log and featurize it. Idempotent."""
        if not self._closed:
            end = (self._last_seq + 1) if self._last_seq is not None else 1
            self.log.close(end)
            self._closed = True
        features = extract_features(
            self.log, jerk_thresh=self.profile.jerk_curvature_thresh)
        return self.log, features


def run_session(cfg: SessionConfig, source: Iterable[Frame],
                store: "UserStore | None" = None
                ) -> tuple[ActivityLog, SessionSynopsis,
                           list[FeedbackMessage]]:
    """Run a full timed session over a frame source.

    The calibration is loaded before any frame is read; an empty source
    still yields a (zero-activity) synopsis. The session ends at the
    configured duration or when the source runs out, whichever is first.
    """
    profile = load_profile(cfg.calibration_path)
    model = load_model(cfg.model_path) if cfg.model_path else None
    engine = SessionEngine(profile, fps=float(cfg.fps), seed=cfg.seed)
    done = 0
    for frame in source:
        engine.step(frame)
        done += 1
        if done >= cfg.max_frames:
            break
    log, features = engine.finish()
    verdict = margin = None
    if model is not None:
        verdict, margin = predict(model, features)
    synopsis = render_synopsis(log, features, verdict=verdict, margin=margin,
                               user=cfg.user)
    if store is not None and cfg.user:
        store.append_synopsis(cfg.user, synopsis.to_dict())
    return log, synopsis, engine.feedback


class FrameQueue:
    """Bounded acquisition-to-analysis handoff.

    put() never blocks: beyond maxlen the oldest frame is dropped, so the
    analysis lane always sees the most recent video. frames(live=True)
    raises SourceStall after the stall timeout; offline iteration waits
    indefinitely and ends cleanly once close() is called and the queue
    drains.
    """

    def __init__(self, maxlen: int = QUEUE_MAXLEN,
                 stall_timeout_s: float = STALL_TIMEOUT_S):
        self._frames: deque[Frame] = deque()
        self._cond = threading.Condition()
        self._closed = False
        self.maxlen = maxlen
        self.stall_timeout_s = stall_timeout_s
        self.dropped = 0

    def put(self, frame: Frame) -> None:
        with self._cond:
            if self._closed:
                return
            if len(self._frames) >= self.maxlen:
                self._frames.popleft()
                self.dropped += 1
            self._frames.append(frame)
            self._cond.notify()

    def close(self) -> None:
        with self._cond:
            self._closed = True
            self._cond.notify_all()

    def get(self, timeout: float | None = None) -> Frame | None:
        """Next frame; None once closed and drained; SourceStall on timeout."""
        with self._cond:
            while not self._frames:
                if self._closed:
                    return None
                if not self._cond.wait(timeout):
                    raise SourceStall(
                        f"no frame for {timeout:.1f} s")
            return self._frames.popleft()

    def frames(self, live: bool = True) -> Iterator[Frame]:
        timeout = self.stall_timeout_s if live else None
        while True:
            frame = self.get(timeout)
            if frame is None:
                return
            yield frame


class Conflict(ValueError):
    """User id already exists."""


class UnknownUser(KeyError):
    """No such user id."""


@dataclass
class UserRecord:
    user_id: str
    name: str
    synopses: list[dict] = field(default_factory=list)


class UserStore:
    """Append-only JSON-lines user database, replayed on open."""

    def __init__(self, path: str):
        self.path = path
        self._users: dict[str, UserRecord] = {}
        self._lock = threading.Lock()
        self._replay()

    def _replay(self) -> None:
        import json
        import os
        if not os.path.exists(self.path):
            return
        with open(self.path, encoding="utf-8") as fh:
            for line in fh:
                line = line.strip()
                if not line:
                    continue
                rec = json.loads(line)
                if rec["op"] == "user":
                    self._users[rec["id"]] = UserRecord(rec["id"], rec["name"])
                elif rec["op"] == "synopsis":
                    self._users[rec["id"]].synopses.append(rec["synopsis"])

    def _append(self, rec: dict) -> None:
        import json
        import os
        with open(self.path, "a", encoding="utf-8") as fh:
            fh.write(json.dumps(rec, sort_keys=True))
            fh.write("\n")
            fh.flush()
            os.fsync(fh.fileno())

    def store_user(self, user_id: str, name: str | None = None) -> UserRecord:
        with self._lock:
            if user_id in self._users:
                raise Conflict(f"user {user_id!r} already exists")
            record = UserRecord(user_id, name or user_id)
            self._append({"op": "user", "id": user_id, "name": record.name})
            self._users[user_id] = record
            return record

    def list_users(self) -> list[UserRecord]:
        with self._lock:
            return sorted(self._users.values(), key=lambda u: u.user_id)

    def get(self, user_id: str) -> UserRecord:
        with self._lock:
            if user_id not in self._users:
                raise UnknownUser(user_id)
            return self._users[user_id]

    def append_synopsis(self, user_id: str, synopsis: dict) -> None:
        with self._lock:
            if user_id not in self._users:
                raise UnknownUser(user_id)
            self._append({"op": "synopsis", "id": user_id,
                          "synopsis": synopsis})
            self._users[user_id].synopses.append(synopsis)
