"""Skill-error detectors gated by the activity state.

Hitting: grid frame differencing, any state, 10-frame refractory.
Tugging: eccentricity of the combined ring contour while Stationary/Picking.
Ring drop: tool-to-ring distance while Moving, 3-frame persistence.

Each detector keeps a small persistence latch so one physical mistake
yields one event; the session owns the instances and serializes calls.
"""

from __future__ import annotations

import numpy as np
from scipy.spatial import cKDTree

from .calibration import CalibrationProfile
from .imaging import (BinaryMask, DegenerateRegion, Frame, Region,
                      connected_regions, grid_diff, region_eccentricity)
from .fsm import ActivityState
from .records import EventKind, EventRecord, Status
from .tracker import TrackEstimate

HIT_REFRACTORY_FRAMES = 10
DROP_PERSIST_FRAMES = 3
# Fragments closer than this to the main ring contour merge with it before
# the eccentricity test; covers tool-width gaps across the ring band.
MERGE_GAP = 6.0
# Contours beyond this many ring diameters from the held peg are ignored.
TUG_SEARCH_FACTOR = 1.5


class HitDetector:
    """Board strikes show up as many grid cells changing at once."""

    def __init__(self, calib: CalibrationProfile):
        self._calib = calib
        self._last_emit: int | None = None

    def step(self, prev: Frame, curr: Frame) -> EventRecord | None:
        count, intensity = grid_diff(prev, curr, self._calib.hit_cell_thresh)
        if count < self._calib.hit_cell_min:
            return None
        if (self._last_emit is not None
                and curr.seq - self._last_emit <= HIT_REFRACTORY_FRAMES):
            return None
        self._last_emit = curr.seq
        return EventRecord(EventKind.HIT, curr.seq,
                           intensity=float(count), aux=intensity)


class TugDetector:
    """Ring deformation while grasping, measured on the merged ring contour.

    Emits on the rising edge of the eccentricity excursion so a sustained
    tug counts once.
    """

    def __init__(self, calib: CalibrationProfile):
        self._calib = calib
        self._above = False

    def step(self, state: ActivityState, mask: BinaryMask,
             frame_seq: int) -> EventRecord | None:
        if state.status not in (Status.STATIONARY, Status.PICKING) \
                or state.ring_id is None:
            self._above = False
            return None
        ecc = self._ring_eccentricity(mask, state.ring_id)
        if ecc is None:
            self._above = False
            return None
        if ecc >= self._calib.tug_ecc_thresh:
            if not self._above:
                self._above = True
                return EventRecord(EventKind.TUG, frame_seq, intensity=ecc)
        else:
            self._above = False
        return None

    def _ring_eccentricity(self, mask: BinaryMask, ring_id: int) -> float | None:
        calib = self._calib
        big = calib.big(ring_id)
        radius = TUG_SEARCH_FACTOR * calib.ring_diameter
        nearby = [r for r in connected_regions(mask)
                  if _dist((big.cx, big.cy), r.centroid()) <= radius]
        if not nearby:
            return None
        merged = _merge_regions(nearby[0], nearby[1:])
        try:
            return region_eccentricity(merged)
        except DegenerateRegion:
            return None


class DropDetector:
    """Ring separated from the tool during transit.

    Distance must exceed the threshold on DROP_PERSIST_FRAMES consecutive
    frames; the latch re-arms when the tool reconnects with the ring or
    the Moving interval ends.
    """

    def __init__(self, calib: CalibrationProfile):
        self._calib = calib
        self._streak = 0
        self._emitted = False

    def step(self, state: ActivityState, tool: TrackEstimate,
             mask: BinaryMask, frame_seq: int) -> EventRecord | None:
        if state.status is not Status.MOVING or not tool.valid:
            self._streak = 0
            self._emitted = False
            return None
        regions = connected_regions(mask)
        if not regions:
            return None
        dist = _point_to_region(tool.center, regions[0])
        if dist <= self._calib.drop_dist_thresh:
            self._streak = 0
            self._emitted = False
            return None
        self._streak += 1
        if self._streak >= DROP_PERSIST_FRAMES and not self._emitted:
            self._emitted = True
            return EventRecord(EventKind.DROP, frame_seq, intensity=dist)
        return None


def _dist(a: tuple[float, float], b: tuple[float, float]) -> float:
    return float(np.hypot(a[0] - b[0], a[1] - b[1]))


def _point_to_region(point: tuple[float, float], region: Region) -> float:
    d = region.coords.astype(np.float64) - np.asarray(point, dtype=np.float64)
    return float(np.sqrt((d * d).sum(axis=1).min()))


def _merge_regions(main: Region, others: list[Region]) -> np.ndarray:
    """Main contour plus every region whose boundary gap to it is small."""
    if not others:
        return main.coords
    tree = cKDTree(main.coords)
    parts = [main.coords]
    for reg in others:
        gap, _ = tree.query(reg.coords, k=1)
        if gap.min() <= MERGE_GAP:
            parts.append(reg.coords)
    return np.concatenate(parts, axis=0)
