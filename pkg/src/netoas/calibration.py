"""One-time setup: peg boxes, ring hue band, tool template and thresholds.

The profile is measured once from a reference frame plus user-provided
seeds (12 peg click-points, a rect around the fully visible ring, a rect
around the tool tip) and persisted to a versioned JSON file. It is
immutable afterwards and shared read-only by every pipeline stage.
"""

from __future__ import annotations

import base64
import json
import math
import os
from dataclasses import dataclass, field, replace

import numpy as np

from .imaging import Frame, Rect, hue_in_band, rgb_hsv, rgb_to_gray

PROFILE_VERSION = 1

# Box sides as multiples of the measured ring diameter. The small box must
# hold the seated ring with margin; the big box bounds the picking zone.
SMALL_BOX_FACTOR = 1.2
BIG_BOX_FACTOR = 2.0

# Hue half-width: tolerant to illumination shift without absorbing skin tones.
HUE_DELTA = 15.0

# Ring-presence thresholds as fractions of the calibrated ring area, which
# keeps them resolution independent.
STATIONARY_FRACTION = 0.60
PICKING_FRACTION = 0.30
MOVING_FRACTION = 0.50

DEFAULT_MIN_SAT = 0.2
DEFAULT_MIN_VAL = 0.15
DEFAULT_TUG_ECC = 2.5
DEFAULT_HIT_CELL_INTENSITY = 12.0
DEFAULT_HIT_CELL_MIN = 10
DEFAULT_JERK_CURVATURE = 0.2
DEFAULT_SMOOTHNESS_WARN = 3.0


class CalibrationError(Exception):
    pass


class CalibrationConflict(CalibrationError):
    """Two peg seeds so close their small boxes overlap."""


class BadRingSeed(CalibrationError):
    """Ring seed rect holds mostly unsaturated pixels."""


class NotCalibrated(CalibrationError):
    """No calibration file; the caller must run calibration first."""


class VersionError(CalibrationError):
    """Calibration file exists but its version does not match."""


@dataclass(frozen=True)
class RingHueBand:
    lo: float
    hi: float
    min_sat: float
    min_val: float

    def as_band(self) -> tuple[float, float]:
        return self.lo, self.hi


@dataclass(frozen=True)
class ToolTemplate:
    rect: Rect
    patch: np.ndarray  # grayscale uint8, rect.h x rect.w

    def __eq__(self, other):
        return (isinstance(other, ToolTemplate) and self.rect == other.rect
                and np.array_equal(self.patch, other.patch))


@dataclass(frozen=True)
class CalibrationProfile:
    small_bbox: tuple[Rect, ...]  # index 0 is peg 1
    big_bbox: tuple[Rect, ...]
    ring_hue: RingHueBand
    tool_template: ToolTemplate
    thresh_stationary: int
    thresh_picking: int
    thresh_moving: int
    drop_dist_thresh: float
    hit_cell_thresh: float
    hit_cell_min: int
    tug_ecc_thresh: float
    jerk_curvature_thresh: float
    smoothness_warn_thresh: float
    ring_diameter: float

    def __post_init__(self):
        if len(self.small_bbox) != 12 or len(self.big_bbox) != 12:
            raise ValueError("profile needs exactly 12 small and 12 big boxes")
        for k, (small, big) in enumerate(zip(self.small_bbox, self.big_bbox)):
            if not (big.contains_rect(small) and (big.w > small.w or big.h > small.h)):
                raise ValueError(f"big box {k + 1} must strictly contain its small box")
        for i in range(12):
            for j in range(i + 1, 12):
                if self.small_bbox[i].intersects(self.small_bbox[j]):
                    raise CalibrationConflict(
                        f"small boxes {i + 1} and {j + 1} overlap")
        for name in ("thresh_stationary", "thresh_picking", "thresh_moving",
                     "drop_dist_thresh", "hit_cell_thresh", "hit_cell_min",
                     "tug_ecc_thresh", "jerk_curvature_thresh",
                     "smoothness_warn_thresh", "ring_diameter"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")

    def small(self, peg_id: int) -> Rect:
        return self.small_bbox[peg_id - 1]

    def big(self, peg_id: int) -> Rect:
        return self.big_bbox[peg_id - 1]


def _median_hue(hues: np.ndarray) -> float:
    """Median hue that tolerates bands wrapping through 0/360.

    Hues are rotated so their circular mean sits at 180, the plain median
    is taken there, then rotated back.
    """
    rad = np.deg2rad(hues)
    mean_angle = math.degrees(math.atan2(np.sin(rad).mean(), np.cos(rad).mean())) % 360.0
    shifted = (hues - mean_angle + 180.0) % 360.0
    return (float(np.median(shifted)) + mean_angle - 180.0) % 360.0


def calibrate(reference_frame: Frame,
              peg_seeds: list[tuple[float, float]],
              ring_seed: Rect,
              tool_seed: Rect,
              min_sat: float = DEFAULT_MIN_SAT,
              min_val: float = DEFAULT_MIN_VAL) -> CalibrationProfile:
    """Build a profile from one reference frame and user seeds."""
    w, h = reference_frame.width, reference_frame.height
    if len(peg_seeds) != 12:
        raise ValueError(f"need 12 peg seeds, got {len(peg_seeds)}")
    for r, label in ((ring_seed, "ring"), (tool_seed, "tool")):
        if not r.inside(w, h):
            raise ValueError(f"{label} seed rect outside frame")

    ys, xs = ring_seed.slices()
    hue, sat, val = rgb_hsv(reference_frame.pixels[ys, xs])
    saturated = sat >= 0.2
    if saturated.mean() < 0.5:
        raise BadRingSeed(
            f"only {saturated.mean():.0%} of ring seed pixels are saturated")
    med = _median_hue(hue[saturated])
    band = RingHueBand(lo=(med - HUE_DELTA) % 360.0, hi=(med + HUE_DELTA) % 360.0,
                       min_sat=min_sat, min_val=min_val)

    ring_bits = (hue_in_band(hue, band.lo, band.hi)
                 & (sat >= min_sat) & (val >= min_val))
    ring_area = int(ring_bits.sum())
    if ring_area == 0:
        raise BadRingSeed("no ring pixels inside the derived hue band")
    rys, rxs = np.nonzero(ring_bits)
    diameter = float(max(rxs.max() - rxs.min() + 1, rys.max() - rys.min() + 1))

    small_side = max(2, int(round(SMALL_BOX_FACTOR * diameter)))
    big_side = max(small_side + 2, int(round(BIG_BOX_FACTOR * diameter)))
    small_boxes = []
    big_boxes = []
    for k, (px, py) in enumerate(peg_seeds):
        if not (0 <= px < w and 0 <= py < h):
            raise ValueError(f"peg seed {k + 1} outside frame")
        small_boxes.append(_centered_rect(px, py, small_side, w, h))
        big_boxes.append(_centered_rect(px, py, big_side, w, h))

    tys, txs = tool_seed.slices()
    patch = rgb_to_gray(reference_frame.pixels[tys, txs])

    return CalibrationProfile(
        small_bbox=tuple(small_boxes),
        big_bbox=tuple(big_boxes),
        ring_hue=band,
        tool_template=ToolTemplate(rect=tool_seed, patch=patch),
        thresh_stationary=max(1, int(round(STATIONARY_FRACTION * ring_area))),
        thresh_picking=max(1, int(round(PICKING_FRACTION * ring_area))),
        thresh_moving=max(1, int(round(MOVING_FRACTION * ring_area))),
        drop_dist_thresh=diameter,
        hit_cell_thresh=DEFAULT_HIT_CELL_INTENSITY,
        hit_cell_min=DEFAULT_HIT_CELL_MIN,
        tug_ecc_thresh=DEFAULT_TUG_ECC,
        jerk_curvature_thresh=DEFAULT_JERK_CURVATURE,
        smoothness_warn_thresh=DEFAULT_SMOOTHNESS_WARN,
        ring_diameter=diameter,
    )


def _centered_rect(cx: float, cy: float, side: int, w: int, h: int) -> Rect:
    x = int(round(cx - side / 2.0))
    y = int(round(cy - side / 2.0))
    x = min(max(x, 0), w - side)
    y = min(max(y, 0), h - side)
    return Rect(x, y, side, side)


def _rect_to_json(r: Rect) -> dict:
    return {"x": r.x, "y": r.y, "w": r.w, "h": r.h}


def _rect_from_json(obj: dict, where: str) -> Rect:
    _check_fields(obj, {"x", "y", "w", "h"}, where)
    return Rect(int(obj["x"]), int(obj["y"]), int(obj["w"]), int(obj["h"]))


def _check_fields(obj: dict, allowed: set[str], where: str) -> None:
    unknown = set(obj) - allowed
    if unknown:
        raise ValueError(f"unknown field(s) in {where}: {sorted(unknown)}")
    missing = allowed - set(obj)
    if missing:
        raise ValueError(f"missing field(s) in {where}: {sorted(missing)}")


_THRESHOLD_KEYS = {
    "stationary": "thresh_stationary",
    "picking": "thresh_picking",
    "moving": "thresh_moving",
    "drop_dist": "drop_dist_thresh",
    "hit_cell": "hit_cell_thresh",
    "hit_cell_min": "hit_cell_min",
    "tug_ecc": "tug_ecc_thresh",
    "jerk_curvature": "jerk_curvature_thresh",
    "smoothness_warn": "smoothness_warn_thresh",
    "ring_diameter": "ring_diameter",
}


def save_profile(profile: CalibrationProfile, path: str | os.PathLike) -> None:
    doc = {
        "version": PROFILE_VERSION,
        "small_bbox": [_rect_to_json(r) for r in profile.small_bbox],
        "big_bbox": [_rect_to_json(r) for r in profile.big_bbox],
        "ring_hue": {
            "lo": profile.ring_hue.lo,
            "hi": profile.ring_hue.hi,
            "min_sat": profile.ring_hue.min_sat,
            "min_val": profile.ring_hue.min_val,
        },
        "tool_template": {
            "rect": _rect_to_json(profile.tool_template.rect),
            "patch_b64": base64.b64encode(
                profile.tool_template.patch.tobytes()).decode("ascii"),
        },
        "thresholds": {
            key: getattr(profile, attr) for key, attr in _THRESHOLD_KEYS.items()
        },
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2)
        fh.write("\n")


def load_profile(path: str | os.PathLike) -> CalibrationProfile:
    if not os.path.exists(path):
        raise NotCalibrated(f"no calibration file at {path}")
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    if not isinstance(doc, dict) or doc.get("version") != PROFILE_VERSION:
        raise VersionError(
            f"calibration version {doc.get('version')!r}, expected {PROFILE_VERSION}")
    _check_fields(doc, {"version", "small_bbox", "big_bbox", "ring_hue",
                        "tool_template", "thresholds"}, "profile")
    _check_fields(doc["ring_hue"], {"lo", "hi", "min_sat", "min_val"}, "ring_hue")
    _check_fields(doc["tool_template"], {"rect", "patch_b64"}, "tool_template")
    _check_fields(doc["thresholds"], set(_THRESHOLD_KEYS), "thresholds")
    if len(doc["small_bbox"]) != 12 or len(doc["big_bbox"]) != 12:
        raise ValueError("profile must carry exactly 12 small and 12 big boxes")

    tmpl_rect = _rect_from_json(doc["tool_template"]["rect"], "tool_template.rect")
    raw = base64.b64decode(doc["tool_template"]["patch_b64"])
    if len(raw) != tmpl_rect.w * tmpl_rect.h:
        raise ValueError("tool template patch size does not match its rect")
    patch = np.frombuffer(bytearray(raw), dtype=np.uint8).reshape(
        tmpl_rect.h, tmpl_rect.w)

    th = doc["thresholds"]
    return CalibrationProfile(
        small_bbox=tuple(_rect_from_json(r, "small_bbox") for r in doc["small_bbox"]),
        big_bbox=tuple(_rect_from_json(r, "big_bbox") for r in doc["big_bbox"]),
        ring_hue=RingHueBand(float(doc["ring_hue"]["lo"]), float(doc["ring_hue"]["hi"]),
                             float(doc["ring_hue"]["min_sat"]),
                             float(doc["ring_hue"]["min_val"])),
        tool_template=ToolTemplate(rect=tmpl_rect, patch=patch),
        thresh_stationary=int(th["stationary"]),
        thresh_picking=int(th["picking"]),
        thresh_moving=int(th["moving"]),
        drop_dist_thresh=float(th["drop_dist"]),
        hit_cell_thresh=float(th["hit_cell"]),
        hit_cell_min=int(th["hit_cell_min"]),
        tug_ecc_thresh=float(th["tug_ecc"]),
        jerk_curvature_thresh=float(th["jerk_curvature"]),
        smoothness_warn_thresh=float(th["smoothness_warn"]),
        ring_diameter=float(th["ring_diameter"]),
    )
