"""Raster primitives shared by the whole analysis pipeline.

Everything here is a pure function of its inputs: color conversion, hue
segmentation, connected regions, central moments, eccentricity and grid
frame differencing. No OpenCV in this module — hue math and gray
conversion are pinned down explicitly so results are bit-stable.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

# 8-connectivity structuring element for region labelling: thin rasterized
# ring arcs must stay connected across diagonal steps.
_EIGHT_CONNECTED = np.ones((3, 3), dtype=bool)

# Denominator floor below which a region has no usable minor axis.
ECC_EPS = 1e-9


class DegenerateRegion(ValueError):
    """Region has collinear pixels: eccentricity denominator vanished."""


@dataclass(frozen=True)
class Rect:
    """Axis-aligned pixel rectangle, top-left anchored."""

    x: int
    y: int
    w: int
    h: int

    def __post_init__(self):
        if self.w < 1 or self.h < 1:
            raise ValueError(f"rect must have positive size, got {self.w}x{self.h}")

    @property
    def cx(self) -> float:
        return self.x + self.w / 2.0

    @property
    def cy(self) -> float:
        return self.y + self.h / 2.0

    @property
    def x2(self) -> int:
        return self.x + self.w

    @property
    def y2(self) -> int:
        return self.y + self.h

    def inside(self, width: int, height: int) -> bool:
        return self.x >= 0 and self.y >= 0 and self.x2 <= width and self.y2 <= height

    def contains_rect(self, other: "Rect") -> bool:
        return (
            self.x <= other.x
            and self.y <= other.y
            and self.x2 >= other.x2
            and self.y2 >= other.y2
        )

    def contains_point(self, px: float, py: float) -> bool:
        return self.x <= px < self.x2 and self.y <= py < self.y2

    def intersects(self, other: "Rect") -> bool:
        return not (
            self.x2 <= other.x
            or other.x2 <= self.x
            or self.y2 <= other.y
            or other.y2 <= self.y
        )

    def clamped(self, width: int, height: int) -> "Rect":
        x = min(max(self.x, 0), width - 1)
        y = min(max(self.y, 0), height - 1)
        return Rect(x, y, max(1, min(self.w, width - x)), max(1, min(self.h, height - y)))

    def slices(self) -> tuple[slice, slice]:
        return slice(self.y, self.y2), slice(self.x, self.x2)


def iou(a: Rect, b: Rect) -> float:
    """Intersection-over-union of two rects."""
    ix = max(0, min(a.x2, b.x2) - max(a.x, b.x))
    iy = max(0, min(a.y2, b.y2) - max(a.y, b.y))
    inter = ix * iy
    if inter == 0:
        return 0.0
    return inter / float(a.w * a.h + b.w * b.h - inter)


@dataclass(frozen=True)
class Frame:
    """One RGB8 raster with its position in the session stream.

    ``pixels`` is row-major (height, width, 3) uint8; it is frozen on
    construction so frames can be shared between threads.
    """

    pixels: np.ndarray
    seq: int
    timestamp_ms: float = 0.0

    def __post_init__(self):
        px = self.pixels
        if px.ndim != 3 or px.shape[2] != 3 or px.dtype != np.uint8:
            raise ValueError("pixels must be (h, w, 3) uint8")
        if px.shape[0] < 16 or px.shape[1] < 16:
            raise ValueError("frame must be at least 16x16")
        px.setflags(write=False)

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @classmethod
    def from_bytes(cls, width: int, height: int, data: bytes, seq: int,
                   timestamp_ms: float = 0.0) -> "Frame":
        if len(data) != width * height * 3:
            raise ValueError(
                f"payload is {len(data)} bytes, expected {width * height * 3}")
        px = np.frombuffer(bytearray(data), dtype=np.uint8).reshape(height, width, 3)
        return cls(px, seq, timestamp_ms)


@dataclass(frozen=True)
class BinaryMask:
    """Per-pixel boolean raster, same dimensions as its source frame."""

    bits: np.ndarray

    def __post_init__(self):
        if self.bits.ndim != 2 or self.bits.dtype != np.bool_:
            raise ValueError("bits must be a 2-d boolean array")
        self.bits.setflags(write=False)

    @property
    def width(self) -> int:
        return self.bits.shape[1]

    @property
    def height(self) -> int:
        return self.bits.shape[0]


@dataclass(frozen=True)
class RegionMoments:
    """Second-order central moments of a pixel region (binary intensity)."""

    area: int
    cx: float
    cy: float
    mu20: float
    mu02: float
    mu11: float


@dataclass(frozen=True)
class Region:
    """Connected pixel set with its bounding rectangle.

    ``coords`` is an (n, 2) int array of (x, y) pixel positions.
    """

    coords: np.ndarray
    bbox: Rect

    @property
    def area(self) -> int:
        return self.coords.shape[0]

    def centroid(self) -> tuple[float, float]:
        return float(self.coords[:, 0].mean()), float(self.coords[:, 1].mean())


def rgb_to_gray(pixels: np.ndarray) -> np.ndarray:
    """Integer-weighted luma: (r*299 + g*587 + b*114) // 1000, uint8.

    Integer arithmetic keeps the conversion bit-exact everywhere.
    """
    px = pixels.astype(np.uint32)
    luma = (px[..., 0] * 299 + px[..., 1] * 587 + px[..., 2] * 114) // 1000
    return luma.astype(np.uint8)


def rgb_hsv(pixels: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Hue (degrees, 0..360), saturation and value (fractions) per pixel.

    Gray pixels (max == min) get hue 0 and saturation 0.
    """
    rgb = pixels.astype(np.float32)
    r, g, b = rgb[..., 0], rgb[..., 1], rgb[..., 2]
    maxc = rgb.max(axis=2)
    minc = rgb.min(axis=2)
    delta = maxc - minc
    val = maxc / 255.0
    sat = np.where(maxc > 0, delta / np.maximum(maxc, 1e-6), 0.0)

    safe = np.maximum(delta, 1e-6)
    hr = ((g - b) / safe) % 6.0
    hg = (b - r) / safe + 2.0
    hb = (r - g) / safe + 4.0
    hue = np.where(maxc == r, hr, np.where(maxc == g, hg, hb)) * 60.0
    hue = np.where(delta > 0, hue, 0.0)
    return hue, sat, val


def hue_in_band(hue: np.ndarray, lo: float, hi: float) -> np.ndarray:
    """Membership test for a hue band that may wrap through 360 degrees."""
    if lo <= hi:
        return (hue >= lo) & (hue <= hi)
    return (hue >= lo) | (hue <= hi)


def segment_by_hue(frame: Frame, hue_band: tuple[float, float],
                   min_sat: float, min_val: float) -> BinaryMask:
    """Set a bit wherever hue falls in the band and sat/val clear the floors."""
    lo, hi = hue_band
    if not (0 <= lo < 360 and 0 <= hi < 360):
        raise ValueError(f"hue band endpoints must be in [0, 360), got {hue_band}")
    hue, sat, val = rgb_hsv(frame.pixels)
    bits = hue_in_band(hue, lo, hi) & (sat >= min_sat) & (val >= min_val)
    return BinaryMask(bits)


def mask_sum_in_rect(mask: BinaryMask, r: Rect) -> int:
    """Count of set bits inside ``r``. The rect must lie inside the mask."""
    if not r.inside(mask.width, mask.height):
        raise ValueError(f"rect {r} outside mask {mask.width}x{mask.height}")
    ys, xs = r.slices()
    return int(mask.bits[ys, xs].sum())


def connected_regions(mask: BinaryMask) -> list[Region]:
    """8-connected components of the mask, largest area first."""
    labels, count = ndimage.label(mask.bits, structure=_EIGHT_CONNECTED)
    if count == 0:
        return []
    regions = []
    for obj_slice, label in zip(ndimage.find_objects(labels), range(1, count + 1)):
        ys, xs = np.nonzero(labels[obj_slice] == label)
        y0, x0 = obj_slice[0].start, obj_slice[1].start
        coords = np.column_stack((xs + x0, ys + y0)).astype(np.int64)
        bbox = Rect(x0, y0,
                    obj_slice[1].stop - x0,
                    obj_slice[0].stop - y0)
        regions.append(Region(coords, bbox))
    regions.sort(key=lambda reg: reg.area, reverse=True)
    return regions


def central_moments(region: Region | np.ndarray) -> RegionMoments:
    """Second moments about the region centroid with unit intensity.

    Computing about the centroid (rather than the raw origin) is what makes
    the downstream eccentricity translation-invariant.
    """
    coords = region.coords if isinstance(region, Region) else np.asarray(region)
    if coords.ndim != 2 or coords.shape[1] != 2 or coords.shape[0] == 0:
        raise ValueError("region must be a non-empty (n, 2) pixel array")
    x = coords[:, 0].astype(np.float64)
    y = coords[:, 1].astype(np.float64)
    cx = float(x.mean())
    cy = float(y.mean())
    dx = x - cx
    dy = y - cy
    return RegionMoments(
        area=int(coords.shape[0]),
        cx=cx,
        cy=cy,
        mu20=float((dx * dx).sum()),
        mu02=float((dy * dy).sum()),
        mu11=float((dx * dy).sum()),
    )


def eccentricity(m: RegionMoments) -> float:
    """Ratio of principal second moments: 1 for a disk, a^2/b^2 for an ellipse.

    Invariant under rotation and translation of the region.
    """
    root = float(np.sqrt((m.mu20 - m.mu02) ** 2 + 4.0 * m.mu11 ** 2))
    den = m.mu20 + m.mu02 - root
    if den <= ECC_EPS:
        raise DegenerateRegion(
            f"region too thin for eccentricity (denominator {den:.3g})")
    return (m.mu20 + m.mu02 + root) / den


def region_eccentricity(region: Region | np.ndarray) -> float:
    return eccentricity(central_moments(region))


def grid_diff(prev: Frame, curr: Frame, cell_change_thresh: float,
              grid: int = 10) -> tuple[int, float]:
    """Mean absolute gray difference per grid cell.

    Returns (number of cells whose mean change reaches the threshold, mean
    change intensity over those cells — 0.0 when none qualify).
    """
    if prev.pixels.shape != curr.pixels.shape:
        raise ValueError("frames differ in dimensions")
    gp = rgb_to_gray(prev.pixels).astype(np.int32)
    gc = rgb_to_gray(curr.pixels).astype(np.int32)
    diff = np.abs(gc - gp)

    h, w = diff.shape
    row_edges = [h * i // grid for i in range(grid)]
    col_edges = [w * i // grid for i in range(grid)]
    sums = np.add.reduceat(np.add.reduceat(diff, row_edges, axis=0), col_edges, axis=1)
    row_sizes = np.diff(row_edges + [h])
    col_sizes = np.diff(col_edges + [w])
    areas = np.outer(row_sizes, col_sizes)
    means = sums / areas

    changed = means >= cell_change_thresh
    count = int(changed.sum())
    intensity = float(means[changed].mean()) if count else 0.0
    return count, intensity
