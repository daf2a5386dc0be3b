"""Session scoring: feature extraction, a linear SVM and synopsis reports.

Features come straight from the activity log so the same extractor serves
both live sessions and synthetic corpora. Training is deterministic
full-batch subgradient descent on the hinge loss; no sampling, so a fixed
corpus always yields the same model.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, fields

import numpy as np

from .calibration import DEFAULT_JERK_CURVATURE, VersionError
from .metrics import (InsufficientData, TrackSegment, arc_length,
                      count_jerks, curvature_series, smoothness)
from .records import ActivityLog, EventKind, Status

MODEL_VERSION = 1

LABEL_NOVICE = "novice"
LABEL_IMPROVED = "improved"
LABELS = (LABEL_NOVICE, LABEL_IMPROVED)


class DegenerateLabels(ValueError):
    """Training set does not contain both classes."""


@dataclass(frozen=True)
class FeatureVector:
    """Per-session skill measures, in fixed order."""

    avg_grasp_time_ms: float = 0.0
    tug_count: int = 0
    hit_count: int = 0
    avg_hit_intensity: float = 0.0
    avg_move_time_ms: float = 0.0
    avg_moves_per_placement: float = 0.0
    avg_smoothness: float = 0.0
    avg_arc_length: float = 0.0
    jerk_count: int = 0
    drop_count: int = 0
    rings_placed: int = 0

    def __post_init__(self):
        for name, value in self.as_dict().items():
            if not np.isfinite(value):
                raise ValueError(f"feature {name} must be finite")
        for name in ("tug_count", "hit_count", "jerk_count", "drop_count",
                     "rings_placed"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")

    def as_array(self) -> np.ndarray:
        return np.array([getattr(self, f.name) for f in fields(self)],
                        dtype=np.float64)

    def as_dict(self) -> dict[str, float | int]:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_array(cls, values) -> "FeatureVector":
        names = [f.name for f in fields(cls)]
        if len(values) != len(names):
            raise ValueError(f"expected {len(names)} values")
        kwargs = {}
        for name, v in zip(names, values):
            if name.endswith("_count") or name == "rings_placed":
                kwargs[name] = int(round(float(v)))
            else:
                kwargs[name] = float(v)
        return cls(**kwargs)


FEATURE_NAMES = tuple(f.name for f in fields(FeatureVector))
N_FEATURES = len(FEATURE_NAMES)


def _moving_segments(log: ActivityLog, min_samples: int) -> list[TrackSegment]:
    """Valid track samples grouped by Moving interval."""
    segments = []
    for iv in log.completed_intervals(Status.MOVING):
        pts = [(s.seq, s.x, s.y) for s in log.track
               if s.valid and iv.start_seq <= s.seq < iv.end_seq]
        if len(pts) >= min_samples:
            segments.append(TrackSegment(tuple(pts)))
    return segments


def extract_features(log: ActivityLog,
                     jerk_thresh: float = DEFAULT_JERK_CURVATURE
                     ) -> FeatureVector:
    """Aggregate a closed log into the feature vector.

    Total: an empty or degenerate log yields the zero vector rather than
    an error, so a crashed or idle session can still be reported.
    """
    grasp = log.completed_intervals(Status.PICKING)
    move = log.completed_intervals(Status.MOVING)
    f1 = float(np.mean([log.frames_to_ms(iv.frames()) for iv in grasp])) \
        if grasp else 0.0
    f5 = float(np.mean([log.frames_to_ms(iv.frames()) for iv in move])) \
        if move else 0.0

    hits = log.events_of(EventKind.HIT)
    f4 = float(np.mean([e.intensity for e in hits])) if hits else 0.0

    n_placed = len(log.placements)
    f6 = len(move) / max(n_placed, 1)

    smooth_vals = []
    arc_vals = []
    jerks = 0
    for seg in _moving_segments(log, min_samples=3):
        try:
            smooth_vals.append(smoothness(seg))
            arc_vals.append(float(arc_length(seg)))
        except InsufficientData:
            continue
        if len(seg) >= 5:
            try:
                jerks += count_jerks(curvature_series(seg), jerk_thresh)
            except InsufficientData:
                pass
    f7 = float(np.mean(smooth_vals)) if smooth_vals else 0.0
    f8 = float(np.mean(arc_vals)) if arc_vals else 0.0

    return FeatureVector(
        avg_grasp_time_ms=f1,
        tug_count=len(log.events_of(EventKind.TUG)),
        hit_count=len(hits),
        avg_hit_intensity=f4,
        avg_move_time_ms=f5,
        avg_moves_per_placement=f6,
        avg_smoothness=f7,
        avg_arc_length=f8,
        jerk_count=jerks,
        drop_count=len(log.events_of(EventKind.DROP)),
        rings_placed=n_placed,
    )


@dataclass(frozen=True)
class SvmModel:
    """Standardizing linear classifier: novice below the plane, improved above."""

    weights: tuple[float, ...]
    bias: float
    means: tuple[float, ...]
    stds: tuple[float, ...]

    def __post_init__(self):
        if not (len(self.weights) == len(self.means) == len(self.stds)
                == N_FEATURES):
            raise ValueError(f"model must have {N_FEATURES} coefficients")
        if any(s <= 0 for s in self.stds):
            raise ValueError("stds must be positive")

    def standardize(self, f: FeatureVector) -> np.ndarray:
        return (f.as_array() - np.array(self.means)) / np.array(self.stds)

    def decision(self, f: FeatureVector) -> float:
        return float(np.dot(self.weights, self.standardize(f)) + self.bias)


def predict(m: SvmModel, f: FeatureVector) -> tuple[str, float]:
    """(label, signed margin); positive margin means improved."""
    margin = m.decision(f)
    return (LABEL_IMPROVED if margin > 0 else LABEL_NOVICE), margin


def _hinge_objective(Z: np.ndarray, y: np.ndarray, w: np.ndarray, b: float,
                     lam: float) -> float:
    margins = y * (Z @ w + b)
    hinge = np.maximum(0.0, 1.0 - margins)
    return 0.5 * lam * float(w @ w) + float(hinge.mean())


def train_svm(X, y, C: float = 10.0, tol: float = 1e-5,
              max_iters: int = 50_000) -> SvmModel:
    """Fit the soft-margin SVM by full-batch subgradient descent.

    Deterministic: no sampling, fixed iteration order. Stops once the best
    objective seen stops improving by more than tol (checked every 100
    iterations) or at the iteration cap.
    """
    labels = np.array([{LABEL_NOVICE: -1.0, LABEL_IMPROVED: 1.0}[v]
                       for v in y])
    if len(set(y)) < 2:
        raise DegenerateLabels("training needs both novice and improved")
    A = np.stack([f.as_array() for f in X])
    n = A.shape[0]

    means = A.mean(axis=0)
    stds = A.std(axis=0)
    keep = stds > 1e-12
    safe = np.where(keep, stds, 1.0)
    Z = (A - means) / safe
    Z[:, ~keep] = 0.0

    lam = 1.0 / (C * n)
    w = np.zeros(N_FEATURES)
    b = 0.0
    best = (_hinge_objective(Z, labels, w, b, lam), w.copy(), b)
    window_best = best[0]
    for t in range(1, max_iters + 1):
        margins = labels * (Z @ w + b)
        viol = margins < 1.0
        grad_w = lam * w
        grad_b = 0.0
        if viol.any():
            grad_w = grad_w - (labels[viol, None] * Z[viol]).sum(axis=0) / n
            grad_b = -float(labels[viol].sum()) / n
        eta = 0.5 / np.sqrt(t)
        w = w - eta * grad_w
        b = b - eta * grad_b
        obj = _hinge_objective(Z, labels, w, b, lam)
        if obj < best[0]:
            best = (obj, w.copy(), b)
        if t % 100 == 0:
            if window_best - best[0] <= tol:
                break
            window_best = best[0]

    w = best[1]
    b = best[2]
    w[~keep] = 0.0  # constant features carry no signal
    return SvmModel(weights=tuple(float(v) for v in w), bias=float(b),
                    means=tuple(float(v) for v in means),
                    stds=tuple(float(v) for v in safe))


def evaluate(m: SvmModel, X, y) -> float:
    """Fraction of examples whose predicted label matches."""
    if not X:
        return 0.0
    good = sum(1 for f, lbl in zip(X, y) if predict(m, f)[0] == lbl)
    return good / len(X)


def save_model(m: SvmModel, path: str) -> None:
    doc = {
        "version": MODEL_VERSION,
        "weights": list(m.weights),
        "bias": m.bias,
        "means": list(m.means),
        "stds": list(m.stds),
    }
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2)
        fh.write("\n")
    os.replace(tmp, path)


def load_model(path: str) -> SvmModel:
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    expected = {"version", "weights", "bias", "means", "stds"}
    if set(doc) != expected:
        unknown = set(doc) - expected
        missing = expected - set(doc)
        raise ValueError(f"bad model file: unknown={sorted(unknown)} "
                         f"missing={sorted(missing)}")
    if doc["version"] != MODEL_VERSION:
        raise VersionError(
            f"model version {doc['version']}, expected {MODEL_VERSION}")
    return SvmModel(weights=tuple(doc["weights"]), bias=float(doc["bias"]),
                    means=tuple(doc["means"]), stds=tuple(doc["stds"]))


def write_corpus(path: str, X, y) -> None:
    """One JSON record per session, labels alongside features."""
    with open(path, "w", encoding="utf-8") as fh:
        for f, lbl in zip(X, y):
            fh.write(json.dumps({"label": lbl, "features": f.as_dict()},
                                sort_keys=True))
            fh.write("\n")


def read_corpus(path: str) -> tuple[list[FeatureVector], list[str]]:
    X: list[FeatureVector] = []
    y: list[str] = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            doc = json.loads(line)
            feats = doc["features"]
            X.append(FeatureVector(**{k: feats[k] for k in FEATURE_NAMES}))
            y.append(doc["label"])
    return X, y


def synthetic_corpus(n_per_class: int = 15, placements: int = 4,
                     fps: float = 25.0, seed0: int = 100
                     ) -> tuple[list[FeatureVector], list[str]]:
    """Scripted novice/improved sessions, featurized without rendering."""
    from .scenegen import IMPROVED, NOVICE, build_script, synthesize_log

    X: list[FeatureVector] = []
    y: list[str] = []
    for i in range(n_per_class):
        for persona, offset in ((NOVICE, 0), (IMPROVED, 10_000)):
            script = build_script(seed0 + offset + i, persona,
                                  placements=placements, fps=fps)
            X.append(extract_features(synthesize_log(script)))
            y.append(persona.name)
    return X, y


@dataclass(frozen=True)
class SessionSynopsis:
    """End-of-session report: features, event timeline, placements, verdict."""

    fps: float
    n_frames: int
    duration_ms: float
    features: FeatureVector
    events: tuple[dict, ...]
    placements: tuple[dict, ...]
    verdict: str | None = None
    margin: float | None = None
    user: str | None = None

    def to_dict(self) -> dict:
        return {
            "fps": self.fps,
            "n_frames": self.n_frames,
            "duration_ms": self.duration_ms,
            "features": self.features.as_dict(),
            "events": list(self.events),
            "placements": list(self.placements),
            "verdict": self.verdict,
            "margin": self.margin,
            "user": self.user,
        }

    def to_json(self) -> str:
        """Canonical serialization: stable key order, no timestamps."""
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"

    def to_text(self) -> str:
        lines = [
            "session synopsis",
            f"  user: {self.user or '-'}",
            f"  frames: {self.n_frames} at {self.fps:g} fps "
            f"({self.duration_ms / 1000.0:.1f} s)",
            "features:",
        ]
        for name, value in self.features.as_dict().items():
            if isinstance(value, int):
                lines.append(f"  {name}: {value}")
            else:
                lines.append(f"  {name}: {value:.3f}")
        lines.append("events:")
        if self.events:
            for e in self.events:
                lines.append(f"  frame {e['seq']}: {e['kind']} "
                             f"(intensity {e['intensity']:.2f})")
        else:
            lines.append("  none")
        lines.append("placements:")
        if self.placements:
            for p in self.placements:
                lines.append(f"  frame {p['end_seq']}: peg {p['source']} "
                             f"-> peg {p['target']}")
        else:
            lines.append("  no placements")
        if self.verdict is not None:
            lines.append(f"verdict: {self.verdict} "
                         f"(margin {self.margin:+.3f})")
        return "\n".join(lines) + "\n"


def render_synopsis(log: ActivityLog, f: FeatureVector,
                    verdict: str | None = None, margin: float | None = None,
                    user: str | None = None) -> SessionSynopsis:
    """Bundle a closed log and its features into the report document."""
    if log.intervals:
        first = log.intervals[0].start_seq
        last = max(iv.end_seq or iv.start_seq for iv in log.intervals)
        n_frames = max(0, last - first)
    else:
        n_frames = 0
    events = tuple(
        {"kind": e.kind.value, "seq": e.frame_seq,
         "intensity": float(e.intensity)}
        for e in log.events)
    placements = tuple(
        {"source": p.source, "target": p.target,
         "start_seq": p.start_seq, "end_seq": p.end_seq}
        for p in log.placements)
    return SessionSynopsis(fps=log.fps, n_frames=n_frames,
                           duration_ms=log.frames_to_ms(n_frames),
                           features=f, events=events, placements=placements,
                           verdict=verdict, margin=margin, user=user)
