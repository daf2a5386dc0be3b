"""Trajectory quality measures over tool-tip track segments.

All functions are pure. Time is measured in frames; callers convert to
milliseconds with the session fps.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# Squared-speed floor: samples that are effectively stationary get zero
# curvature rather than a 0/0 blowup.
SPEED_EPS2 = 1e-6


class InsufficientData(ValueError):
    """Segment too short for the requested measure."""


@dataclass(frozen=True)
class TrackSegment:
    """Ordered (frame_seq, x, y) samples from one Moving interval."""

    samples: tuple[tuple[int, float, float], ...]

    def __post_init__(self):
        if len(self.samples) < 1:
            raise ValueError("segment needs at least one sample")
        seqs = [s[0] for s in self.samples]
        if any(b <= a for a, b in zip(seqs, seqs[1:])):
            raise ValueError("sample seq must strictly increase")

    def __len__(self) -> int:
        return len(self.samples)

    def xy(self) -> np.ndarray:
        return np.array([(s[1], s[2]) for s in self.samples], dtype=np.float64)


def smoothness(seg: TrackSegment) -> float:
    """Population standard deviation of per-step scalar speed.

    Scalar speed (not the velocity vector) keeps the measure rotation
    invariant. Zero for constant-speed motion; grows with hesitation.
    """
    if len(seg) < 3:
        raise InsufficientData(f"smoothness needs >=3 samples, got {len(seg)}")
    pts = seg.xy()
    speeds = np.linalg.norm(np.diff(pts, axis=0), axis=1)
    return float(speeds.std())


def arc_length(seg: TrackSegment) -> int:
    """Distinct pixel count of the 8-connected polyline through the samples."""
    pts = [(int(round(s[1])), int(round(s[2]))) for s in seg.samples]
    visited: set[tuple[int, int]] = set()
    visited.add(pts[0])
    for (x0, y0), (x1, y1) in zip(pts, pts[1:]):
        for p in _bresenham(x0, y0, x1, y1):
            visited.add(p)
    return len(visited)


def _bresenham(x0: int, y0: int, x1: int, y1: int):
    """All pixels of the 8-connected line from (x0,y0) to (x1,y1) inclusive."""
    dx = abs(x1 - x0)
    dy = abs(y1 - y0)
    sx = 1 if x0 < x1 else -1
    sy = 1 if y0 < y1 else -1
    err = dx - dy
    x, y = x0, y0
    while True:
        yield x, y
        if x == x1 and y == y1:
            return
        e2 = 2 * err
        if e2 > -dy:
            err -= dy
            x += sx
        if e2 < dx:
            err += dx
            y += sy


def curvature_series(seg: TrackSegment) -> list[float]:
    """Per-sample curvature |x'y'' - y'x''| / (x'^2 + y'^2)^(3/2).

    Derivatives come from central differences (one-sided at the ends).
    Near-zero speed yields curvature 0 by the SPEED_EPS2 rule.
    """
    if len(seg) < 5:
        raise InsufficientData(f"curvature needs >=5 samples, got {len(seg)}")
    pts = seg.xy()
    x, y = pts[:, 0], pts[:, 1]
    dx = np.gradient(x)
    dy = np.gradient(y)
    ddx = np.gradient(dx)
    ddy = np.gradient(dy)
    speed2 = dx * dx + dy * dy
    num = np.abs(dx * ddy - dy * ddx)
    with np.errstate(divide="ignore", invalid="ignore"):
        kappa = num / np.power(speed2, 1.5)
    kappa = np.where(speed2 < SPEED_EPS2, 0.0, kappa)
    return [float(k) for k in kappa]


def count_jerks(kappas: list[float], thresh: float) -> int:
    """Number of maximal runs with curvature at or above the threshold.

    Run-based so the count does not scale with the frame rate.
    """
    count = 0
    above = False
    for k in kappas:
        if k >= thresh and not above:
            count += 1
            above = True
        elif k < thresh:
            above = False
    return count
