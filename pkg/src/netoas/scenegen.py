"""Synthetic pegboard scenes with exact per-frame ground truth.

A scripted session is built in two layers. The script layer lays out ring
and tool kinematics per frame, schedules skill errors (board hits, ring
tugs, ring drops) and draws the target sequence from the shared generator
so an identically seeded engine sees the same LED order. The raster layer
renders RGB frames from the script and steps a reference activity machine
on the exact ring raster, which yields the authoritative per-frame status,
per-box ring pixel counts and placement ground truth.

Personas differ in speed, wobble, dwell lengths and error rates; they are
the corpus source for the score classifier.
"""

from __future__ import annotations

import math
import random
from dataclasses import dataclass
from typing import Iterator

import cv2
import numpy as np

from .calibration import (DEFAULT_HIT_CELL_INTENSITY, DEFAULT_HIT_CELL_MIN,
                          DEFAULT_JERK_CURVATURE, DEFAULT_MIN_SAT,
                          DEFAULT_MIN_VAL, DEFAULT_SMOOTHNESS_WARN,
                          DEFAULT_TUG_ECC, STATIONARY_FRACTION,
                          PICKING_FRACTION, MOVING_FRACTION,
                          CalibrationProfile, RingHueBand, ToolTemplate)
from .fsm import ActivityMachine, PlacementEvent, draw_target
from .imaging import BinaryMask, Frame, Rect, rgb_to_gray
from .records import (ActivityLog, EventKind, EventRecord, Placement, Status,
                      TrackSample)

PEG_COLS = (0.2, 0.4, 0.6, 0.8)
PEG_ROWS = (0.25, 0.5, 0.75)

RING_RGB = (50, 200, 50)  # hue 120, saturated and bright
RING_HUE_LO = 105.0
RING_HUE_HI = 135.0
INNER_RADIUS_FACTOR = 0.55

BOARD_LO, BOARD_HI = 78, 103
PEG_VALUE = 58
LIT_VALUE = 228
ROD_VALUE = 45
TIP_VALUE = 235
TIP_DOT_VALUE = 70
FLASH_DELTA = 18.0

# pick pose: ring center this many radii above the peg, tool tip this many
# radii above the carried ring center (tip overlaps the upper ring arc)
LIFT_FACTOR = 1.6
GRIP_FACTOR = 0.9

TUG_PEAK_RATIO = 2.8
TUG_RAMP_FRAMES = 4
TUG_HOLD_FRAMES = 2
FLASH_FRAMES = 2

# drop excursion: tool wanders to this many ring radii from the fallen
# ring, over this many frames, then returns the same way
DROP_PEAK_RADII = 5.5
DROP_AWAY_FRAMES = 8

OCCLUDE_FRAMES = 20

ROD_DIR = (0.5547, 0.8321)  # unit vector, tip to handle


def ring_radius(width: int) -> int:
    return max(6, int(round(20 * width / 640)))


def tip_radius(width: int) -> int:
    return max(3, int(round(9 * width / 640)))


def peg_radius(width: int) -> int:
    return max(2, int(round(6 * width / 640)))


def peg_centers(width: int, height: int) -> list[tuple[int, int]]:
    """Peg grid in id order: 4 columns by 3 rows, row major, id = index + 1."""
    return [(int(round(c * width)), int(round(r * height)))
            for r in PEG_ROWS for c in PEG_COLS]


def level_layout(width: int, height: int, angle: int = 0,
                 tilt: str = "straight") -> list[tuple[int, int]]:
    """Peg layout under a difficulty level: the scope angle foreshortens
    the rows, the plate tilt shears the columns. Identity at (0, straight).
    """
    if tilt not in ("straight", "left", "right"):
        raise ValueError(f"unknown tilt {tilt!r}")
    a = math.radians(angle)
    sy = 1.0 - 0.25 * math.sin(a)
    shear = {"straight": 0.0, "left": -0.10, "right": 0.10}[tilt]
    cx, cy = width / 2.0, height / 2.0
    out = []
    for x, y in peg_centers(width, height):
        yy = cy + sy * (y - cy)
        xx = x + shear * (yy - cy)
        out.append((int(round(xx)), int(round(yy))))
    return out


_BOARDS: dict[tuple[int, int, int], np.ndarray] = {}


def board_texture(width: int, height: int, seed: int) -> np.ndarray:
    """Smoothed mid-gray noise board, cached per (size, seed)."""
    key = (width, height, seed)
    cached = _BOARDS.get(key)
    if cached is None:
        rng = np.random.default_rng(seed ^ 0xB0A7D)
        coarse = rng.integers(BOARD_LO, BOARD_HI,
                              (height // 8 + 2, width // 8 + 2))
        tex = cv2.resize(coarse.astype(np.float32), (width, height),
                         interpolation=cv2.INTER_LINEAR)
        cached = np.clip(np.rint(tex), 0, 255).astype(np.uint8)
        cached.setflags(write=False)
        if len(_BOARDS) > 16:
            _BOARDS.clear()
        _BOARDS[key] = cached
    return cached


@dataclass(frozen=True)
class SceneState:
    """Full geometric description of one pegboard scene."""

    pegs: tuple[tuple[int, int], ...]   # 12 centers, row-major ids 1..12
    ring_center: tuple[float, float]
    ring_outer_r: float
    ring_inner_r: float
    ring_ratio: float = 1.0             # horizontal stretch; 1 = undeformed
    ring_holder: int | None = None      # seated peg id; None while carried
    tool_tip: tuple[float, float] = (0.0, 0.0)
    tool_dir: tuple[float, float] = ROD_DIR
    tool_visible: bool = True
    lit_peg: int | None = None
    noise_sigma: float = 2.0            # gray levels
    texture_seed: int = 0
    flash: float = 0.0                  # transient global brightening

    def __post_init__(self):
        if len(self.pegs) != 12:
            raise ValueError("expected 12 peg centers")
        if self.ring_ratio < 1.0:
            raise ValueError("deformation ratio must be >= 1")
        if not 0 < self.ring_inner_r < self.ring_outer_r:
            raise ValueError("need 0 < inner radius < outer radius")
        for peg in (self.ring_holder, self.lit_peg):
            if peg is not None and not 1 <= peg <= 12:
                raise ValueError("peg id outside 1..12")


def _annulus(center: tuple[float, float], outer: float, inner: float,
             ratio: float, width: int, height: int) -> np.ndarray:
    """Exact ring raster: elliptical band stretched along x by ratio."""
    a = outer * ratio
    ys, xs = np.ogrid[:height, :width]
    ex = (xs - center[0]) / a
    ey = (ys - center[1]) / outer
    e = ex * ex + ey * ey
    lo = inner / outer
    return (e <= 1.0) & (e >= lo * lo)


def _tool_geometry(width: int, height: int) -> tuple[int, int, int]:
    """(tip radius, rod length, rod width) at this frame size."""
    rod_len = max(10, int(round(0.11 * height + 0.06 * width)))
    rod_w = max(2, int(round(3 * width / 640)))
    return tip_radius(width), rod_len, rod_w


def _tool_raster(tip: tuple[float, float], direction: tuple[float, float],
                 width: int, height: int) -> np.ndarray:
    tip_r, rod_len, rod_w = _tool_geometry(width, height)
    canvas = np.zeros((height, width), dtype=np.uint8)
    tx, ty = int(round(tip[0])), int(round(tip[1]))
    ex = int(round(tip[0] + direction[0] * rod_len))
    ey = int(round(tip[1] + direction[1] * rod_len))
    cv2.line(canvas, (tx, ty), (ex, ey), 1, rod_w)
    cv2.circle(canvas, (tx, ty), tip_r, 1, -1)
    return canvas > 0


def _compose(board: np.ndarray, s: SceneState, width: int, height: int,
             rng: np.random.Generator, seq: int, timestamp_ms: float) -> Frame:
    g = board.copy()
    for px, py in s.pegs:
        cv2.circle(g, (px, py), peg_radius(width), PEG_VALUE, -1)
    if s.lit_peg is not None:
        px, py = s.pegs[s.lit_peg - 1]
        cv2.circle(g, (px, py), peg_radius(width) + 1, LIT_VALUE, -1)
    rgb = np.stack([g, g, g], axis=2)

    ring = _annulus(s.ring_center, s.ring_outer_r, s.ring_inner_r,
                    s.ring_ratio, width, height)
    rgb[ring] = RING_RGB

    if s.tool_visible:
        tip_r, rod_len, rod_w = _tool_geometry(width, height)
        tx, ty = int(round(s.tool_tip[0])), int(round(s.tool_tip[1]))
        ex = int(round(s.tool_tip[0] + s.tool_dir[0] * rod_len))
        ey = int(round(s.tool_tip[1] + s.tool_dir[1] * rod_len))
        cv2.line(rgb, (tx, ty), (ex, ey), (ROD_VALUE,) * 3, rod_w)
        cv2.circle(rgb, (tx, ty), tip_r, (TIP_VALUE,) * 3, -1)
        dot_off = max(1, int(round(tip_r * 0.35)))
        dot_r = max(1, int(round(tip_r * 0.45)))
        cv2.circle(rgb, (tx + dot_off, ty + dot_off), dot_r,
                   (TIP_DOT_VALUE,) * 3, -1)

    out = rgb.astype(np.float32)
    if s.flash:
        out += s.flash
    if s.noise_sigma > 0:
        # single-channel noise keeps grays achromatic and ring hue stable
        out += rng.normal(0.0, s.noise_sigma, (height, width, 1))
    pixels = np.clip(np.rint(out), 0, 255).astype(np.uint8)
    return Frame(pixels, seq=seq, timestamp_ms=timestamp_ms)


def render(s: SceneState, width: int, height: int,
           rng: np.random.Generator) -> Frame:
    """Draw one scene: textured board, pegs, lit peg, ring annulus, tool."""
    return _compose(board_texture(width, height, s.texture_seed), s,
                    width, height, rng, seq=0, timestamp_ms=0.0)


@dataclass(frozen=True)
class Persona:
    """Behavior parameters for a scripted operator."""

    name: str
    speed: float              # base carry speed, px/frame at 640 width
    jitter: float             # lateral wobble amplitude, px at 640 width
    overshoot_prob: float     # chance per approach of sailing past the target
    hit_rate_per_min: float   # board strikes per minute of session time
    tug_prob: float           # per grasp
    drop_prob: float          # per move
    pick_frames: int = 4
    dwell_stationary: int = 6
    dwell_picking: int = 4
    hesitation_prob: float = 0.0
    hesitation_frames: int = 0
    noise_sigma: float = 2.5

    def __post_init__(self):
        for p in (self.overshoot_prob, self.tug_prob, self.drop_prob,
                  self.hesitation_prob):
            if not 0.0 <= p <= 1.0:
                raise ValueError("probabilities must lie in [0, 1]")
        if self.speed <= 0 or self.hit_rate_per_min < 0:
            raise ValueError("speed must be positive, rates nonnegative")


NOVICE = Persona("novice", speed=11.0, jitter=8.0, overshoot_prob=0.5,
                 hit_rate_per_min=9.0, tug_prob=0.45, drop_prob=0.20,
                 pick_frames=5, dwell_stationary=8, dwell_picking=6,
                 hesitation_prob=0.6, hesitation_frames=5, noise_sigma=2.5)

IMPROVED = Persona("improved", speed=18.0, jitter=1.2, overshoot_prob=0.05,
                   hit_rate_per_min=0.6, tug_prob=0.05, drop_prob=0.03,
                   pick_frames=3, dwell_stationary=5, dwell_picking=3,
                   hesitation_prob=0.05, hesitation_frames=3, noise_sigma=2.5)

# event-free, wobble-free mover for tracking benchmarks
CLEAN = Persona("clean", speed=9.0, jitter=0.0, overshoot_prob=0.0,
                hit_rate_per_min=0.0, tug_prob=0.0, drop_prob=0.0,
                pick_frames=4, dwell_stationary=6, dwell_picking=4,
                noise_sigma=4.0)

PERSONAS = {p.name: p for p in (NOVICE, IMPROVED, CLEAN)}


@dataclass(frozen=True)
class FramePlan:
    """Scene geometry for one frame plus the scheduled (pre-debounce) status."""

    ring: tuple[float, float]
    ratio: float                 # horizontal stretch; 1.0 when undeformed
    carried: bool
    tool: tuple[float, float]    # tip center
    tool_visible: bool
    flash: bool
    status: Status


@dataclass
class SceneScript:
    width: int
    height: int
    fps: float
    seed: int
    persona: Persona
    start_peg: int
    pegs: list[tuple[int, int]]
    plans: list[FramePlan]
    targets: list[int]
    # (source, target, scheduled completion frame)
    placements: list[tuple[int, int, int]]
    events: list[EventRecord]

    @property
    def n_frames(self) -> int:
        return len(self.plans)


def _lerp(a: tuple[float, float], b: tuple[float, float],
          t: float) -> tuple[float, float]:
    return (a[0] + (b[0] - a[0]) * t, a[1] + (b[1] - a[1]) * t)


def _route(p0: tuple[float, float], p1: tuple[float, float], speed: float,
           jitter: float, persona: Persona,
           rng: np.random.Generator) -> list[tuple[float, float]]:
    """Carry path p0 -> p1: constant pace, optional zigzag and one pause."""
    dx, dy = p1[0] - p0[0], p1[1] - p0[1]
    dist = math.hypot(dx, dy)
    n = max(2, int(math.ceil(dist / speed)))
    ts = np.arange(1, n + 1) / n
    xs = p0[0] + dx * ts
    ys = p0[1] + dy * ts
    if jitter > 0 and dist > 1e-9:
        perp = (-dy / dist, dx / dist)
        zig = (((np.arange(n) // 3) % 2) * 2 - 1).astype(np.float64)
        offs = jitter * (0.7 * zig + rng.normal(0.0, 0.35, n)) * np.sin(np.pi * ts)
        xs = xs + perp[0] * offs
        ys = ys + perp[1] * offs
    pts = list(zip(xs.tolist(), ys.tolist()))
    if persona.hesitation_prob > 0 and rng.random() < persona.hesitation_prob \
            and n >= 6:
        at = int(n // 3 + rng.integers(0, max(1, n // 3)))
        pts[at:at] = [pts[at]] * persona.hesitation_frames
    return pts


def build_script(seed: int, persona: Persona, placements: int = 4,
                 width: int = 640, height: int = 480, fps: float = 25.0,
                 start_peg: int = 1, level: tuple[int, str] = (0, "straight"),
                 occlude_cycle: int | None = None) -> SceneScript:
    """Lay out the whole session frame by frame.

    occlude_cycle hides the tool for 20 frames during that cycle's carry;
    the cycle runs slowed and with no scripted errors so tracker recovery
    can be measured in isolation.
    """
    if placements < 1:
        raise ValueError("need at least one placement")
    pegs = level_layout(width, height, *level)
    radius = ring_radius(width)
    scale = width / 640.0
    speed = max(2.0, persona.speed * scale)
    jitter = persona.jitter * scale
    grip_dy = GRIP_FACTOR * radius
    lift_dy = LIFT_FACTOR * radius

    rng_targets = random.Random(seed)
    rng_motion = np.random.default_rng(seed ^ 0x5CE9E5)

    plans: list[FramePlan] = []
    targets: list[int] = []
    events: list[EventRecord] = []
    placed: list[tuple[int, int, int]] = []

    def add(ring, ratio, carried, tool, visible, flash, status):
        plans.append(FramePlan(ring=(float(ring[0]), float(ring[1])),
                               ratio=float(ratio), carried=carried,
                               tool=(float(tool[0]), float(tool[1])),
                               tool_visible=visible, flash=flash,
                               status=status))

    def grip(ring_pos):
        return (ring_pos[0], ring_pos[1] - grip_dy)

    park = (0.9 * width, 0.1 * height)
    tool_prev = park
    cur = start_peg
    led = draw_target(rng_targets, cur)
    targets.append(led)
    last_flash = -100

    for cycle in range(placements):
        src = pegs[cur - 1]
        dst = pegs[led - 1]
        lift_src = (src[0], src[1] - lift_dy)
        lift_dst = (dst[0], dst[1] - lift_dy)
        occluded = occlude_cycle == cycle
        # one rng draw per decision, in fixed order, so scripts stay
        # reproducible across parameter tweaks
        u_tug = rng_motion.random()
        u_drop = rng_motion.random()
        u_hit = rng_motion.random()
        u_over = rng_motion.random()
        do_tug = (not occluded) and u_tug < persona.tug_prob
        do_drop = (not occluded) and u_drop < persona.drop_prob
        do_over = (not occluded) and u_over < persona.overshoot_prob

        # rest phase: ring seated, tool glides in to the grip point
        grip_src = grip(src)
        n_dwell = max(3, persona.dwell_stationary)
        for k in range(n_dwell):
            tool = _lerp(tool_prev, grip_src, (k + 1) / n_dwell)
            add(src, 1.0, False, tool, True, False, Status.STATIONARY)

        # lift to the pick pose
        for k in range(persona.pick_frames):
            t = (k + 1) / persona.pick_frames
            ring = _lerp(src, lift_src, t)
            status = Status.STATIONARY if t < 0.5 else Status.PICKING
            add(ring, 1.0, True, grip(ring), True, False, status)

        # pick dwell, optionally with a tug excursion
        ratios = [1.0] * max(2, persona.dwell_picking)
        if do_tug:
            up = np.linspace(1.0, TUG_PEAK_RATIO, TUG_RAMP_FRAMES + 1)[1:]
            down = up[::-1][1:]
            ratios = [1.0] + list(up) + [TUG_PEAK_RATIO] * TUG_HOLD_FRAMES \
                + list(down) + [1.0, 1.0]
        tug_done = False
        for ratio in ratios:
            add(lift_src, ratio, True, grip(lift_src), True, False,
                Status.PICKING)
            if do_tug and not tug_done and ratio * ratio >= DEFAULT_TUG_ECC:
                events.append(EventRecord(EventKind.TUG, len(plans),
                                          intensity=float(ratio * ratio)))
                tug_done = True

        # carry to the target's pick pose
        route_speed = speed
        if occluded:
            dist = math.hypot(lift_dst[0] - lift_src[0],
                              lift_dst[1] - lift_src[1])
            route_speed = max(2.0, min(speed, dist / (OCCLUDE_FRAMES + 8)))
        path = _route(lift_src, lift_dst, route_speed, jitter, persona,
                      rng_motion)
        if do_over and not do_drop and len(path) >= 4:
            # sail past the target, then come back
            hx, hy = path[-1][0] - path[-2][0], path[-1][1] - path[-2][1]
            norm = math.hypot(hx, hy) or 1.0
            hx, hy = hx / norm, hy / norm
            reach = 2.5 * radius
            steps = max(2, int(math.ceil(reach / route_speed)))
            out = [(lift_dst[0] + hx * reach * (k + 1) / steps,
                    lift_dst[1] + hy * reach * (k + 1) / steps)
                   for k in range(steps)]
            path = path + out + out[::-1][1:] + [lift_dst]

        do_hit = (not occluded) and not do_drop and \
            u_hit < persona.hit_rate_per_min * (len(path) / fps) / 60.0
        flash_at = None
        if do_hit:
            flash_at = len(plans) + max(2, int(0.4 * len(path)))
            if flash_at - last_flash <= 12:
                flash_at = None

        occ_span = (0, -1)
        if occluded and len(path) >= OCCLUDE_FRAMES + 6:
            m = max(2, len(path) // 2 - OCCLUDE_FRAMES // 2)
            occ_span = (m, m + OCCLUDE_FRAMES - 1)

        detach_at = len(path) // 2 if (do_drop and len(path) >= 6) else None
        drop_seen = False
        for i, pt in enumerate(path):
            seq_here = len(plans) + 1
            flash = flash_at is not None and \
                0 <= (seq_here - flash_at) < FLASH_FRAMES
            if flash and seq_here == flash_at:
                events.append(EventRecord(EventKind.HIT, seq_here,
                                          intensity=100.0))
                last_flash = seq_here
            visible = not (occ_span[0] <= i <= occ_span[1])
            add(pt, 1.0, True, grip(pt), visible, flash, Status.MOVING)

            if detach_at is not None and i == detach_at:
                # ring falls here; tool wanders off, comes back, regrips
                drop_pt = pt
                heading = (lift_dst[0] - pt[0], lift_dst[1] - pt[1])
                norm = math.hypot(*heading) or 1.0
                heading = (heading[0] / norm, heading[1] / norm)
                peak = DROP_PEAK_RADII * radius
                away = [(pt[0] + heading[0] * peak * (k + 1) / DROP_AWAY_FRAMES,
                         pt[1] + heading[1] * peak * (k + 1) / DROP_AWAY_FRAMES)
                        for k in range(DROP_AWAY_FRAMES)]
                for wander in away + away[::-1][1:] + [drop_pt]:
                    tip = grip(wander)
                    add(drop_pt, 1.0, False, tip, True, False, Status.MOVING)
                    gap = math.hypot(tip[0] - drop_pt[0],
                                     tip[1] - drop_pt[1]) - radius
                    if not drop_seen and gap > 2 * radius:
                        events.append(EventRecord(EventKind.DROP, len(plans),
                                                  intensity=float(gap)))
                        drop_seen = True

        # settle onto the target peg
        for k in range(3):
            t = (k + 1) / 3
            ring = _lerp(lift_dst, dst, t)
            add(ring, 1.0, True, grip(ring), True, False, Status.MOVING)
        placed.append((cur, led, len(plans)))

        tool_prev = grip(dst)
        cur = led
        led = draw_target(rng_targets, cur)
        targets.append(led)

    # closing dwell so the last placement's debounce can complete
    for k in range(max(4, persona.dwell_stationary)):
        add(pegs[cur - 1], 1.0, False, tool_prev, True, False,
            Status.STATIONARY)

    return SceneScript(width=width, height=height, fps=fps, seed=seed,
                       persona=persona, start_peg=start_peg, pegs=pegs,
                       plans=plans, targets=targets, placements=placed,
                       events=events)


@dataclass(frozen=True)
class FrameTruth:
    """Authoritative per-frame labels for one rendered frame."""

    seq: int
    status: Status
    ring_id: int | None
    led_id: int | None
    tool: tuple[float, float]
    tool_visible: bool
    tool_bbox: Rect
    ring_small: tuple[int, ...]   # ring pixels inside each peg's small box
    ring_big: tuple[int, ...]
    placements: tuple[PlacementEvent, ...]


@dataclass
class GroundTruth:
    """Per-frame labels plus the session-level event and placement schedule."""

    width: int
    height: int
    fps: float
    frames: list[FrameTruth]
    targets: list[int]
    placements: list[PlacementEvent]
    events: list[EventRecord]

    @property
    def statuses(self) -> list[Status]:
        return [f.status for f in self.frames]

    def events_of(self, kind: EventKind) -> list[EventRecord]:
        return [e for e in self.events if e.kind is kind]


class ScriptedSession:
    """Renders a script to frames and produces the reference ground truth."""

    def __init__(self, script: SceneScript):
        self.script = script
        w, h = script.width, script.height
        self.radius = ring_radius(w)
        self.tip_r = tip_radius(w)
        self.pegs = script.pegs
        self._board = board_texture(w, h, script.seed)
        self._ring_area = int(_annulus((w / 2.0, h / 2.0), self.radius,
                                       INNER_RADIUS_FACTOR * self.radius,
                                       1.0, w, h).sum())
        prof = self.exact_profile()
        self._small_slices = [r.slices() for r in prof.small_bbox]
        self._big_slices = [r.slices() for r in prof.big_bbox]

    @property
    def width(self) -> int:
        return self.script.width

    @property
    def height(self) -> int:
        return self.script.height

    @property
    def fps(self) -> float:
        return self.script.fps

    def _scene(self, plan: FramePlan, lit: int | None) -> SceneState:
        holder = None
        if not plan.carried:
            for k, (px, py) in enumerate(self.pegs):
                if abs(plan.ring[0] - px) < 1.0 and abs(plan.ring[1] - py) < 1.0:
                    holder = k + 1
                    break
        return SceneState(
            pegs=tuple(self.pegs), ring_center=plan.ring,
            ring_outer_r=float(self.radius),
            ring_inner_r=INNER_RADIUS_FACTOR * self.radius,
            ring_ratio=plan.ratio, ring_holder=holder, tool_tip=plan.tool,
            tool_dir=ROD_DIR, tool_visible=plan.tool_visible, lit_peg=lit,
            noise_sigma=self.script.persona.noise_sigma,
            texture_seed=self.script.seed,
            flash=FLASH_DELTA if plan.flash else 0.0)

    def _render(self, plan: FramePlan, lit: int | None, seq: int) -> Frame:
        rng = np.random.default_rng(self.script.seed * 1_000_003 + seq)
        return _compose(self._board, self._scene(plan, lit),
                        self.script.width, self.script.height, rng, seq=seq,
                        timestamp_ms=(seq - 1) * 1000.0 / self.script.fps)

    def _ring_mask(self, plan: FramePlan) -> np.ndarray:
        """Visible ring pixels: exact annulus minus the tool footprint."""
        ring = _annulus(plan.ring, self.radius,
                        INNER_RADIUS_FACTOR * self.radius, plan.ratio,
                        self.script.width, self.script.height)
        if plan.tool_visible:
            ring &= ~_tool_raster(plan.tool, ROD_DIR, self.script.width,
                                  self.script.height)
        return ring

    def tool_bbox(self, tip: tuple[float, float]) -> Rect:
        side = 2 * self.tip_r + 7
        return Rect(int(round(tip[0] - side / 2)),
                    int(round(tip[1] - side / 2)), side,
                    side).clamped(self.script.width, self.script.height)

    def reference_frame(self) -> Frame:
        """Calibration view: ring seated on the start peg, tool parked."""
        park = (0.9 * self.script.width, 0.1 * self.script.height)
        start = self.pegs[self.script.start_peg - 1]
        plan = FramePlan(ring=(float(start[0]), float(start[1])), ratio=1.0,
                         carried=False, tool=park, tool_visible=True,
                         flash=False, status=Status.STATIONARY)
        return self._render(plan, lit=None, seq=0)

    def calibration_seeds(self) -> dict:
        start = self.pegs[self.script.start_peg - 1]
        r = self.radius
        park = (0.9 * self.script.width, 0.1 * self.script.height)
        side = 2 * self.tip_r + 7
        return {
            "peg_seeds": [(float(x), float(y)) for x, y in self.pegs],
            "ring_seed": Rect(start[0] - r, start[1] - r, 2 * r, 2 * r),
            "tool_seed": Rect(int(round(park[0] - side / 2)),
                              int(round(park[1] - side / 2)), side, side),
        }

    def exact_profile(self) -> CalibrationProfile:
        """Reference profile built from the scene geometry, not from pixels."""
        d = 2 * self.radius
        small_side = int(round(1.2 * d))
        big_side = int(round(2.0 * d))
        small = []
        big = []
        for px, py in self.pegs:
            small.append(Rect(px - small_side // 2, py - small_side // 2,
                              small_side, small_side))
            big.append(Rect(px - big_side // 2, py - big_side // 2,
                            big_side, big_side))
        ref = self.reference_frame()
        seeds = self.calibration_seeds()
        tys, txs = seeds["tool_seed"].slices()
        template = ToolTemplate(rect=seeds["tool_seed"],
                                patch=rgb_to_gray(ref.pixels[tys, txs]))
        area = self._ring_area
        return CalibrationProfile(
            small_bbox=tuple(small), big_bbox=tuple(big),
            ring_hue=RingHueBand(RING_HUE_LO, RING_HUE_HI,
                                 DEFAULT_MIN_SAT, DEFAULT_MIN_VAL),
            tool_template=template,
            thresh_stationary=max(1, int(round(STATIONARY_FRACTION * area))),
            thresh_picking=max(1, int(round(PICKING_FRACTION * area))),
            thresh_moving=max(1, int(round(MOVING_FRACTION * area))),
            drop_dist_thresh=float(d),
            hit_cell_thresh=DEFAULT_HIT_CELL_INTENSITY,
            hit_cell_min=DEFAULT_HIT_CELL_MIN,
            tug_ecc_thresh=DEFAULT_TUG_ECC,
            jerk_curvature_thresh=DEFAULT_JERK_CURVATURE,
            smoothness_warn_thresh=DEFAULT_SMOOTHNESS_WARN,
            ring_diameter=float(d),
        )

    def _truths(self, with_frames: bool) -> Iterator[tuple[Frame | None,
                                                           FrameTruth]]:
        """Step the reference machine over exact rasters; optionally render."""
        machine = ActivityMachine(self.exact_profile(),
                                  rng_seed=self.script.seed)
        lit: int | None = None
        for i, plan in enumerate(self.script.plans):
            seq = i + 1
            ring = self._ring_mask(plan)
            frame = self._render(plan, lit, seq) if with_frames else None
            mask = BinaryMask(ring)
            if seq == 1:
                state = machine.start(mask, frame_seq=1)
                fired: list[PlacementEvent] = []
            else:
                state, fired = machine.step(mask, frame_seq=seq)
            lit = state.led_id
            small = tuple(int(ring[ys, xs].sum())
                          for ys, xs in self._small_slices)
            big = tuple(int(ring[ys, xs].sum()) for ys, xs in self._big_slices)
            truth = FrameTruth(seq=seq, status=state.status,
                               ring_id=state.ring_id, led_id=state.led_id,
                               tool=plan.tool, tool_visible=plan.tool_visible,
                               tool_bbox=self.tool_bbox(plan.tool),
                               ring_small=small, ring_big=big,
                               placements=tuple(fired))
            yield frame, truth

    def play(self) -> Iterator[tuple[Frame, FrameTruth]]:
        """Render frames and label them in one pass."""
        for frame, truth in self._truths(with_frames=True):
            assert frame is not None
            yield frame, truth

    def frames(self) -> Iterator[Frame]:
        for frame, _ in self.play():
            yield frame

    def ground_truth(self) -> GroundTruth:
        """Labels only; skips rendering entirely."""
        frames = []
        placements: list[PlacementEvent] = []
        for _, truth in self._truths(with_frames=False):
            frames.append(truth)
            placements.extend(truth.placements)
        return GroundTruth(width=self.script.width, height=self.script.height,
                           fps=self.script.fps, frames=frames,
                           targets=list(self.script.targets),
                           placements=placements,
                           events=list(self.script.events))


def script_session(p: Persona, n_placements: int, fps: float,
                   seed: int, width: int = 640,
                   height: int = 480) -> tuple[Iterator[Frame], GroundTruth]:
    """Scripted session as (lazy frame stream, full ground truth)."""
    script = build_script(seed, p, placements=n_placements, width=width,
                          height=height, fps=fps)
    session = ScriptedSession(script)
    return session.frames(), session.ground_truth()


def synthesize_log(script: SceneScript) -> ActivityLog:
    """ActivityLog straight from the script, skipping rasterization.

    Statuses follow the scheduled phases, the track is the scripted tip
    path and events are the scripted ground truth. Used to mass-produce
    training corpora cheaply.
    """
    log = ActivityLog(fps=script.fps)
    prev: Status | None = None
    moving_starts: list[int] = []
    for i, plan in enumerate(script.plans):
        seq = i + 1
        if plan.status is not prev:
            log.open_interval(plan.status, seq)
            if plan.status is Status.MOVING:
                moving_starts.append(seq)
            prev = plan.status
        log.track.append(TrackSample(seq, plan.tool[0], plan.tool[1],
                                     plan.tool_visible))
    log.events.extend(script.events)
    for source, target, seq in script.placements:
        start = max((s for s in moving_starts if s <= seq), default=seq)
        log.placements.append(Placement(source=source, target=target,
                                        start_seq=start, end_seq=seq))
    log.close(script.n_frames + 1)
    return log
