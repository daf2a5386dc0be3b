"""Tool-tip tracker: frame-to-frame median flow with forward-backward
validation, fused with a 3-stage sliding-window detector (variance filter,
fern ensemble, nearest-neighbour similarity) and an online positive/negative
appearance model.

One instance per session; step() must be called in frame order. Detection
internals are vectorized over the scanning grid but the public surface is
strictly sequential and deterministic for a fixed input sequence and seed.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import cv2
import numpy as np

from .calibration import ToolTemplate
from .imaging import Frame, Rect, iou, rgb_to_gray

PATCH_SIZE = 15
N_FERNS = 10
N_COMPARISONS = 13
SCALES = (0.8, 1.0, 1.25)
STRIDE_FRACTION = 0.1
# windows keep stage 1 when their gray variance reaches this fraction of
# the seed patch variance
VAR_KEEP_FRACTION = 0.5
FERN_KEEP = 0.5
# seed patches flatter than this variance cannot be tracked
VAR_MIN = 25.0
CONFIDENCE_FLOOR = 0.55
DETECTION_OVERRIDE = 0.6
MODEL_CAP = 200
FB_MAX_ERROR = 10.0
MAX_NCC_CANDIDATES = 64
FLOW_GRID = 10
LK_PARAMS = dict(
    winSize=(11, 11),
    maxLevel=2,  # 3 pyramid levels
    criteria=(cv2.TERM_CRITERIA_EPS | cv2.TERM_CRITERIA_COUNT, 20, 0.03),
)


class BadSeed(ValueError):
    """Seed patch has too little texture to track."""


class FlowLost(Exception):
    """Median flow kept fewer than 4 trustworthy points."""


class Source(enum.Enum):
    TRACKED = "tracked"
    DETECTED = "detected"
    LOST = "lost"


@dataclass(frozen=True)
class TrackEstimate:
    bbox: Rect | None
    center: tuple[float, float]
    confidence: float
    valid: bool
    source: Source

    def __post_init__(self):
        if self.valid and self.confidence < CONFIDENCE_FLOOR:
            raise ValueError("valid estimate below the confidence floor")
        if self.source is Source.LOST and self.valid:
            raise ValueError("lost estimate cannot be valid")


def _grid_points(bbox: Rect, n: int = FLOW_GRID) -> np.ndarray:
    """n x n interior point grid of a bbox, float32 (n*n, 1, 2)."""
    xs = bbox.x + bbox.w * (np.arange(n) + 0.5) / n
    ys = bbox.y + bbox.h * (np.arange(n) + 0.5) / n
    gx, gy = np.meshgrid(xs, ys)
    return np.stack([gx.ravel(), gy.ravel()], axis=1).astype(np.float32).reshape(-1, 1, 2)


def _median_flow_gray(prev: np.ndarray, curr: np.ndarray,
                      bbox: Rect) -> tuple[Rect, float]:
    p0 = _grid_points(bbox)
    p1, st_f, _ = cv2.calcOpticalFlowPyrLK(prev, curr, p0, None, **LK_PARAMS)
    p0r, st_b, _ = cv2.calcOpticalFlowPyrLK(curr, prev, p1, None, **LK_PARAMS)
    ok = (st_f.ravel() == 1) & (st_b.ravel() == 1)
    if ok.sum() < 4:
        raise FlowLost(f"only {int(ok.sum())} points survived LK")
    a = p0.reshape(-1, 2)[ok]
    b = p1.reshape(-1, 2)[ok]
    back = p0r.reshape(-1, 2)[ok]
    fb = np.linalg.norm(a - back, axis=1)
    fb_med = float(np.median(fb))
    keep = fb <= fb_med
    if keep.sum() < 4:
        raise FlowLost(f"only {int(keep.sum())} points within median fb error")
    a, b = a[keep], b[keep]

    dx = float(np.median(b[:, 0] - a[:, 0]))
    dy = float(np.median(b[:, 1] - a[:, 1]))
    scale = 1.0
    if a.shape[0] >= 2:
        ia, ib = np.triu_indices(a.shape[0], k=1)
        d0 = np.linalg.norm(a[ia] - a[ib], axis=1)
        d1 = np.linalg.norm(b[ia] - b[ib], axis=1)
        good = d0 > 1e-9
        if good.any():
            scale = float(np.median(d1[good] / d0[good]))

    cx = bbox.x + bbox.w / 2.0 + dx
    cy = bbox.y + bbox.h / 2.0 + dy
    nw = max(4, int(round(bbox.w * scale)))
    nh = max(4, int(round(bbox.h * scale)))
    moved = Rect(int(round(cx - nw / 2.0)), int(round(cy - nh / 2.0)), nw, nh)
    return moved, fb_med


def median_flow_step(prev: Frame, curr: Frame, bbox: Rect) -> tuple[Rect, float]:
    """Track a bbox from prev to curr; returns (moved rect, median fb error)."""
    if not bbox.inside(prev.width, prev.height):
        raise ValueError(f"bbox {bbox} outside frame")
    return _median_flow_gray(rgb_to_gray(prev.pixels), rgb_to_gray(curr.pixels), bbox)


def _normalize_patch(patch: np.ndarray) -> np.ndarray | None:
    """Resample to 15x15, zero mean, unit norm. None for flat patches."""
    if patch.shape != (PATCH_SIZE, PATCH_SIZE):
        patch = cv2.resize(patch, (PATCH_SIZE, PATCH_SIZE),
                           interpolation=cv2.INTER_LINEAR)
    v = patch.astype(np.float32).ravel()
    v -= v.mean()
    n = float(np.linalg.norm(v))
    if n < 1e-6:
        return None
    return v / n


class ToolModel:
    """Normalized positive/negative patches plus the fern ensemble."""

    def __init__(self, rng: np.random.Generator):
        self.pos: list[np.ndarray] = []
        self.neg: list[np.ndarray] = []
        # comparison endpoints in unit window coordinates
        self.fern_pairs = rng.random((N_FERNS, N_COMPARISONS, 4), dtype=np.float64)
        n_leaves = 1 << N_COMPARISONS
        self.n_pos = np.zeros((N_FERNS, n_leaves), dtype=np.int32)
        self.n_neg = np.zeros((N_FERNS, n_leaves), dtype=np.int32)
        self.posterior = np.zeros((N_FERNS, n_leaves), dtype=np.float32)

    @property
    def patch_count(self) -> int:
        return len(self.pos) + len(self.neg)

    def add_positive(self, normalized: np.ndarray) -> None:
        self.pos.append(normalized)
        self._enforce_cap()

    def add_negative(self, normalized: np.ndarray) -> None:
        self.neg.append(normalized)
        self._enforce_cap()

    def _enforce_cap(self) -> None:
        # drop oldest beyond the cap; the seed positive is pinned
        while self.patch_count > MODEL_CAP:
            if len(self.neg) > 1:
                self.neg.pop(0)
            elif len(self.pos) > 1:
                self.pos.pop(1)
            else:
                break

    def similarities(self, normalized: np.ndarray) -> tuple[float, float]:
        """(positive, negative) similarity of a normalized patch, each in [0,1]."""
        sim_p = 0.0
        sim_n = 0.0
        if self.pos:
            sim_p = (float(np.max(np.stack(self.pos) @ normalized)) + 1.0) / 2.0
        if self.neg:
            sim_n = (float(np.max(np.stack(self.neg) @ normalized)) + 1.0) / 2.0
        return sim_p, sim_n

    def confidence(self, normalized: np.ndarray | None) -> float:
        """Relative similarity; a neutral 0.5 stands in while no negative
        patches have been mined yet."""
        if normalized is None or not self.pos:
            return 0.0
        sim_p, sim_n = self.similarities(normalized)
        if not self.neg:
            sim_n = 0.5
        total = sim_p + sim_n
        return sim_p / total if total > 0 else 0.0

    def train_fern(self, codes: np.ndarray, positive: bool) -> None:
        """Bootstrapped update: only on misclassified examples."""
        avg = float(self.posterior[np.arange(N_FERNS), codes].mean())
        if positive and avg <= FERN_KEEP:
            self.n_pos[np.arange(N_FERNS), codes] += 1
        elif not positive and avg > FERN_KEEP:
            self.n_neg[np.arange(N_FERNS), codes] += 1
        else:
            return
        touched = codes
        idx = np.arange(N_FERNS)
        tot = self.n_pos[idx, touched] + self.n_neg[idx, touched]
        self.posterior[idx, touched] = np.where(
            tot > 0, self.n_pos[idx, touched] / np.maximum(tot, 1), 0.0)


class _ScanGrid:
    """Precomputed sliding windows and fern offsets for one scale."""

    def __init__(self, frame_w: int, frame_h: int, win_w: int, win_h: int,
                 fern_pairs: np.ndarray):
        self.w = win_w
        self.h = win_h
        stride_x = max(1, int(round(STRIDE_FRACTION * win_w)))
        stride_y = max(1, int(round(STRIDE_FRACTION * win_h)))
        xs = np.arange(0, frame_w - win_w + 1, stride_x, dtype=np.int32)
        ys = np.arange(0, frame_h - win_h + 1, stride_y, dtype=np.int32)
        gx, gy = np.meshgrid(xs, ys)
        self.x = gx.ravel()
        self.y = gy.ravel()
        # fern comparison offsets in this window's pixel units
        px = np.clip((fern_pairs[..., 0] * win_w).astype(np.int32), 0, win_w - 1)
        py = np.clip((fern_pairs[..., 1] * win_h).astype(np.int32), 0, win_h - 1)
        qx = np.clip((fern_pairs[..., 2] * win_w).astype(np.int32), 0, win_w - 1)
        qy = np.clip((fern_pairs[..., 3] * win_h).astype(np.int32), 0, win_h - 1)
        self.offsets = (px, py, qx, qy)

    def count(self) -> int:
        return self.x.shape[0]

    def variances(self, integral: np.ndarray, integral_sq: np.ndarray) -> np.ndarray:
        x, y, w, h = self.x, self.y, self.w, self.h
        area = float(w * h)

        def box(ii):
            return (ii[y + h, x + w] - ii[y, x + w] - ii[y + h, x] + ii[y, x])

        s1 = box(integral).astype(np.float64)
        s2 = box(integral_sq).astype(np.float64)
        mean = s1 / area
        return s2 / area - mean * mean

    def fern_codes(self, blurred: np.ndarray, idx: np.ndarray) -> np.ndarray:
        """(len(idx), N_FERNS) int codes for the selected windows."""
        x = self.x[idx]
        y = self.y[idx]
        px, py, qx, qy = self.offsets
        codes = np.zeros((x.shape[0], N_FERNS), dtype=np.int64)
        for f in range(N_FERNS):
            acc = np.zeros(x.shape[0], dtype=np.int64)
            for c in range(N_COMPARISONS):
                bit = blurred[y + py[f, c], x + px[f, c]] > \
                    blurred[y + qy[f, c], x + qx[f, c]]
                acc = (acc << 1) | bit
            codes[:, f] = acc
        return codes


class ToolTracker:
    """TLD-style tracker over one session's frame stream."""

    def __init__(self, frame: Frame, seed_bbox: Rect, fern_seed: int = 2):
        if not seed_bbox.inside(frame.width, frame.height):
            raise ValueError(f"seed bbox {seed_bbox} outside frame")
        gray = rgb_to_gray(frame.pixels)
        ys, xs = seed_bbox.slices()
        seed_patch = gray[ys, xs]
        self.seed_var = float(seed_patch.astype(np.float64).var())
        if self.seed_var < VAR_MIN:
            raise BadSeed(f"seed variance {self.seed_var:.1f} below {VAR_MIN}")

        self.model = ToolModel(np.random.default_rng(fern_seed))
        self.frame_w = frame.width
        self.frame_h = frame.height
        self.seed_size = (seed_bbox.w, seed_bbox.h)
        self.grids = [
            _ScanGrid(frame.width, frame.height,
                      max(4, int(round(seed_bbox.w * s))),
                      max(4, int(round(seed_bbox.h * s))),
                      self.model.fern_pairs)
            for s in SCALES
        ]

        self._train_init(gray, seed_bbox)
        self._prev_gray: np.ndarray | None = gray
        self._last_seq = frame.seq
        self._estimate = TrackEstimate(
            bbox=seed_bbox, center=(seed_bbox.cx, seed_bbox.cy),
            confidence=1.0, valid=True, source=Source.TRACKED)

    @classmethod
    def from_template(cls, template: ToolTemplate, frame_w: int, frame_h: int,
                      fern_seed: int = 2) -> "ToolTracker":
        """Seed the appearance model from a stored calibration template.

        The tool's live location is unknown, so the tracker starts Lost and
        relies on the detector to lock on.
        """
        patch = template.patch
        bg = int(np.median(patch))
        canvas = np.full((frame_h, frame_w), bg, dtype=np.uint8)
        x0 = (frame_w - patch.shape[1]) // 2
        y0 = (frame_h - patch.shape[0]) // 2
        canvas[y0:y0 + patch.shape[0], x0:x0 + patch.shape[1]] = patch
        rgb = np.stack([canvas] * 3, axis=2)
        seed = Rect(x0, y0, patch.shape[1], patch.shape[0])
        tracker = cls(Frame(rgb, seq=0), seed, fern_seed=fern_seed)
        tracker._prev_gray = None
        tracker._last_seq = 0
        tracker._estimate = TrackEstimate(
            bbox=None, center=(frame_w / 2.0, frame_h / 2.0),
            confidence=0.0, valid=False, source=Source.LOST)
        return tracker

    @property
    def estimate(self) -> TrackEstimate:
        return self._estimate

    def _train_init(self, gray: np.ndarray, seed_bbox: Rect) -> None:
        blurred = cv2.GaussianBlur(gray, (7, 7), 2.0)
        ys, xs = seed_bbox.slices()
        seed_norm = _normalize_patch(gray[ys, xs])
        if seed_norm is None:
            raise BadSeed("seed patch has zero contrast")
        self.model.add_positive(seed_norm)

        # positive fern examples: the seed window on mildly warped frames
        grid_idx, win_idx = self._nearest_window(seed_bbox)
        grid = self.grids[grid_idx]
        cx, cy = seed_bbox.cx, seed_bbox.cy
        warps = [None]
        for angle in (-5.0, 5.0):
            warps.append(cv2.getRotationMatrix2D((cx, cy), angle, 1.0))
        for s in (0.95, 1.05):
            warps.append(cv2.getRotationMatrix2D((cx, cy), 0.0, s))
        for dx, dy in ((-2, 0), (2, 0), (0, -2), (0, 2)):
            warps.append(np.array([[1, 0, dx], [0, 1, dy]], dtype=np.float64))
        for m in warps:
            wb = blurred if m is None else cv2.warpAffine(
                blurred, m, (self.frame_w, self.frame_h),
                borderMode=cv2.BORDER_REPLICATE)
            codes = grid.fern_codes(wb, np.array([win_idx]))[0]
            self.model.train_fern(codes, positive=True)
            if m is not None:
                wg = cv2.warpAffine(gray, m, (self.frame_w, self.frame_h),
                                    borderMode=cv2.BORDER_REPLICATE)
                norm = _normalize_patch(wg[ys, xs])
                if norm is not None:
                    self.model.add_positive(norm)

        # negative examples: textured windows well away from the seed
        integral, integral_sq = self._integrals(gray)
        variances = grid.variances(integral, integral_sq)
        textured = np.nonzero(variances >= VAR_KEEP_FRACTION * self.seed_var)[0]
        added = 0
        for idx in textured[:: max(1, len(textured) // 40)]:
            cand = Rect(int(grid.x[idx]), int(grid.y[idx]), grid.w, grid.h)
            if iou(cand, seed_bbox) >= 0.2:
                continue
            codes = grid.fern_codes(blurred, np.array([idx]))[0]
            self.model.train_fern(codes, positive=False)
            cys, cxs = cand.slices()
            norm = _normalize_patch(gray[cys, cxs])
            if norm is not None and added < 20:
                self.model.add_negative(norm)
                added += 1

    @staticmethod
    def _integrals(gray: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        integral, integral_sq = cv2.integral2(gray)
        return integral, integral_sq

    def _nearest_window(self, bbox: Rect) -> tuple[int, int]:
        """Scanning window closest to a bbox: (grid index, window index)."""
        best_grid = min(range(len(self.grids)),
                        key=lambda i: abs(np.log(self.grids[i].w / max(bbox.w, 1))))
        grid = self.grids[best_grid]
        dx = np.abs(grid.x - bbox.x)
        dy = np.abs(grid.y - bbox.y)
        return best_grid, int(np.argmin(dx + dy))

    def _detect_gray(self, gray: np.ndarray,
                     blurred: np.ndarray) -> list[tuple[Rect, float]]:
        integral, integral_sq = self._integrals(gray)
        var_floor = VAR_KEEP_FRACTION * self.seed_var
        candidates: list[tuple[Rect, float, np.ndarray]] = []
        for grid in self.grids:
            if grid.count() == 0:
                continue
            variances = grid.variances(integral, integral_sq)
            stage1 = np.nonzero(variances >= var_floor)[0]
            if stage1.size == 0:
                continue
            codes = grid.fern_codes(blurred, stage1)
            scores = self.model.posterior[
                np.arange(N_FERNS)[None, :], codes].mean(axis=1)
            stage2 = scores > FERN_KEEP
            if not stage2.any():
                continue
            kept = stage1[stage2]
            kept_scores = scores[stage2]
            kept_codes = codes[stage2]
            order = np.argsort(kept_scores)[::-1][:MAX_NCC_CANDIDATES]
            for j in order:
                idx = kept[j]
                rect = Rect(int(grid.x[idx]), int(grid.y[idx]), grid.w, grid.h)
                candidates.append((rect, float(kept_scores[j]), kept_codes[j]))

        scored: list[tuple[Rect, float]] = []
        candidates.sort(key=lambda c: c[1], reverse=True)
        for rect, _, _ in candidates[:MAX_NCC_CANDIDATES]:
            ys, xs = rect.slices()
            norm = _normalize_patch(gray[ys, xs])
            conf = self.model.confidence(norm)
            scored.append((rect, conf))
        scored.sort(key=lambda c: c[1], reverse=True)
        self._last_stage2 = candidates  # kept for negative mining
        return scored

    def detect(self, frame: Frame) -> list[tuple[Rect, float]]:
        """Run the cascade alone; survivors sorted by similarity."""
        gray = rgb_to_gray(frame.pixels)
        blurred = cv2.GaussianBlur(gray, (7, 7), 2.0)
        return self._detect_gray(gray, blurred)

    def step(self, frame: Frame) -> TrackEstimate:
        if frame.seq <= self._last_seq:
            raise ValueError(
                f"frame seq {frame.seq} not after {self._last_seq}")
        gray = rgb_to_gray(frame.pixels)
        blurred = cv2.GaussianBlur(gray, (7, 7), 2.0)

        flow: tuple[Rect, float] | None = None
        if self._estimate.valid and self._prev_gray is not None \
                and self._estimate.bbox is not None:
            try:
                moved, fb_err = _median_flow_gray(self._prev_gray, gray,
                                                  self._estimate.bbox)
                if fb_err <= FB_MAX_ERROR and moved.inside(self.frame_w, self.frame_h):
                    ys, xs = moved.slices()
                    conf = self.model.confidence(_normalize_patch(gray[ys, xs]))
                    flow = (moved, conf)
            except FlowLost:
                flow = None

        detections = self._detect_gray(gray, blurred)
        det = detections[0] if detections else None

        best: tuple[Rect, float, Source] | None = None
        if flow is not None:
            best = (flow[0], flow[1], Source.TRACKED)
        if det is not None and det[1] >= DETECTION_OVERRIDE:
            if best is None or det[1] > best[1]:
                best = (det[0], det[1], Source.DETECTED)

        if best is None or best[1] < CONFIDENCE_FLOOR:
            center = self._estimate.center
            self._estimate = TrackEstimate(bbox=None, center=center,
                                           confidence=0.0, valid=False,
                                           source=Source.LOST)
        else:
            rect, conf, source = best
            self._estimate = TrackEstimate(bbox=rect, center=(rect.cx, rect.cy),
                                           confidence=conf, valid=True,
                                           source=source)
            if conf >= DETECTION_OVERRIDE:
                self._learn(gray, blurred, rect)

        self._prev_gray = gray
        self._last_seq = frame.seq
        return self._estimate

    def _learn(self, gray: np.ndarray, blurred: np.ndarray, rect: Rect) -> None:
        """P/N update around a confident estimate."""
        grid_idx, win_idx = self._nearest_window(rect)
        codes = self.grids[grid_idx].fern_codes(blurred, np.array([win_idx]))[0]
        self.model.train_fern(codes, positive=True)

        ys, xs = rect.slices()
        norm = _normalize_patch(gray[ys, xs])
        if norm is not None:
            sim_p, _ = self.model.similarities(norm)
            if sim_p < 0.85:
                self.model.add_positive(norm)

        mined = 0
        for cand_rect, _, cand_codes in getattr(self, "_last_stage2", []):
            if iou(cand_rect, rect) >= 0.2:
                continue
            self.model.train_fern(cand_codes, positive=False)
            if mined < 5:
                cys, cxs = cand_rect.slices()
                cand_norm = _normalize_patch(gray[cys, cxs])
                if cand_norm is not None:
                    sim_p, sim_n = self.model.similarities(cand_norm)
                    if sim_p > 0.5 and sim_n < 0.95:
                        self.model.add_negative(cand_norm)
                        mined += 1
