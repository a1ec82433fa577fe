"""SORT-style multi-object tracking and per-track length aggregation.

Boxes are tracked with a constant-velocity Kalman filter over
``(cx, cy, s, r)`` (centre, area, aspect ratio) and associated frame to
frame by an optimal IoU assignment. Every track gathers the accepted
length measurements of its detections; :func:`aggregate_lengths` reduces
them to one robust value per individual.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
from scipy.optimize import linear_sum_assignment
from sklearn.base import BaseEstimator

from .errors import ConfigError, OrderError
from .validation import check_boxes

logger = logging.getLogger(__name__)


class BBox(NamedTuple):
    """Axis-aligned box in pixels; ``x2 > x1`` and ``y2 > y1``."""

    x1: float
    y1: float
    x2: float
    y2: float

    @classmethod
    def of(cls, box):
        b = check_boxes([box])[0]
        return cls(*map(float, b))

    @property
    def area(self):
        return (self.x2 - self.x1) * (self.y2 - self.y1)


@dataclass(frozen=True)
class TrackerConfig:
    """SORT parameters plus the Kalman noise constants.

    ``measurement_noise`` is the diagonal of R over ``(cx, cy, s, r)``;
    ``process_noise`` the diagonal of Q and ``initial_covariance`` that of
    P0, both over ``(cx, cy, s, r, vcx, vcy, vs)``.
    """

    max_age: int = 10
    min_hits: int = 0
    iou_threshold: float = 0.2
    measurement_noise: tuple = (1.0, 1.0, 10.0, 10.0)
    process_noise: tuple = (1.0, 1.0, 1.0, 1.0, 0.01, 0.01, 1e-4)
    initial_covariance: tuple = (10.0, 10.0, 10.0, 10.0, 1e4, 1e4, 1e4)

    def __post_init__(self):
        for name in ("max_age", "min_hits"):
            v = getattr(self, name)
            if isinstance(v, bool) or not isinstance(v, (int, np.integer)) or v < 0:
                raise ConfigError(name, f"must be a non-negative integer, got {v!r}")
        if not 0.0 <= float(self.iou_threshold) <= 1.0:
            raise ConfigError("iou_threshold", f"must lie in [0, 1], got {self.iou_threshold!r}")
        for name, size in (("measurement_noise", 4), ("process_noise", 7), ("initial_covariance", 7)):
            v = tuple(float(x) for x in getattr(self, name))
            if len(v) != size or any(not np.isfinite(x) or x < 0 for x in v):
                raise ConfigError(name, f"needs {size} finite non-negative values")
            object.__setattr__(self, name, v)

    @classmethod
    def from_dict(cls, d):
        known = set(cls.__dataclass_fields__)
        extra = set(d) - known
        if extra:
            raise ConfigError(sorted(extra)[0], "unknown tracker setting")
        return cls(**d)

    def to_dict(self):
        return {k: (list(v) if isinstance(v, tuple) else v) for k, v in self.__dict__.items()}


def iou(a, b):
    """Intersection over union of two boxes (0 when disjoint)."""
    ax1, ay1, ax2, ay2 = a[:4]
    bx1, by1, bx2, by2 = b[:4]
    w = min(ax2, bx2) - max(ax1, bx1)
    h = min(ay2, by2) - max(ay1, by1)
    if w <= 0 or h <= 0:
        return 0.0
    inter = w * h
    return float(inter / ((ax2 - ax1) * (ay2 - ay1) + (bx2 - bx1) * (by2 - by1) - inter))


def iou_matrix(a, b):
    a, b = check_boxes(a), check_boxes(b)
    w = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    h = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    inter = np.clip(w, 0, None) * np.clip(h, 0, None)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    return inter / (area_a[:, None] + area_b[None, :] - inter)


def box_to_z(box):
    x1, y1, x2, y2 = box[:4]
    w, h = x2 - x1, y2 - y1
    return np.array([x1 + w / 2.0, y1 + h / 2.0, w * h, w / h])


def z_to_box(x):
    s, r = max(float(x[2]), 0.0), max(float(x[3]), 0.0)
    w = np.sqrt(s * r)
    h = s / w if w > 0 else 0.0
    return BBox(float(x[0] - w / 2.0), float(x[1] - h / 2.0), float(x[0] + w / 2.0), float(x[1] + h / 2.0))


_F = np.eye(7)
_F[0, 4] = _F[1, 5] = _F[2, 6] = 1.0
_H = np.eye(4, 7)


class KalmanBoxState:
    """Constant-velocity filter over ``(cx, cy, s, r, vcx, vcy, vs)``."""

    def __init__(self, box, config=TrackerConfig()):
        self.x = np.zeros(7)
        self.x[:4] = box_to_z(box)
        self.P = np.diag(config.initial_covariance)
        self.Q = np.diag(config.process_noise)
        self.R = np.diag(config.measurement_noise)

    def predict(self):
        # an area about to go negative has its growth rate zeroed
        if self.x[2] + self.x[6] <= 0:
            self.x[6] = 0.0
        self.x = _F @ self.x
        self.P = _F @ self.P @ _F.T + self.Q
        return z_to_box(self.x)

    def update(self, box):
        y = box_to_z(box) - _H @ self.x
        S = _H @ self.P @ _H.T + self.R
        try:
            S_inv = np.linalg.inv(S)
        except np.linalg.LinAlgError:
            S_inv = np.linalg.pinv(S)
        K = self.P @ _H.T @ S_inv
        self.x = self.x + K @ y
        I_KH = np.eye(7) - K @ _H
        # Joseph form keeps P symmetric positive semi-definite
        self.P = I_KH @ self.P @ I_KH.T + K @ self.R @ K.T
        self.P = (self.P + self.P.T) / 2.0

    @property
    def box(self):
        return z_to_box(self.x)


@dataclass
class Track:
    id: int
    kalman: KalmanBoxState
    first_frame: object = None
    last_frame: object = None
    hits: int = 1
    age: int = 0
    time_since_update: int = 0
    n_detections: int = 1
    lengths: list = field(default_factory=list)

    @property
    def box(self):
        return self.kalman.box


def predict(track):
    """Advance a track one frame and return its predicted box."""
    box = track.kalman.predict()
    track.age += 1
    track.time_since_update += 1
    return box


def update(track, det):
    """Correct a track with a matched detection box."""
    track.kalman.update(det)
    track.hits += 1
    track.n_detections += 1
    track.time_since_update = 0


def optimal_assignment(cost):
    """Minimum-cost one-to-one assignment; pairs sorted by row index."""
    cost = np.asarray(cost, dtype=np.float64)
    if cost.size == 0:
        return []
    rows, cols = linear_sum_assignment(cost)
    return sorted(zip(rows.tolist(), cols.tolist()))


class Association(NamedTuple):
    matches: list
    unmatched_tracks: list
    unmatched_detections: list


def associate(predicted, detections, iou_threshold=0.2):
    """Match predicted track boxes to detections by maximum total IoU.

    The assignment minimises the summed ``1 - IoU``; any pair below
    ``iou_threshold`` is then split back into unmatched entries. All three
    lists are in ascending index order.
    """
    predicted, detections = check_boxes(predicted), check_boxes(detections)
    n, m = len(predicted), len(detections)
    if n == 0 or m == 0:
        return Association([], list(range(n)), list(range(m)))
    ious = iou_matrix(predicted, detections)
    matches = []
    for i, j in optimal_assignment(1.0 - ious):
        if ious[i, j] >= iou_threshold:
            matches.append((i, j))
    mt = {i for i, _ in matches}
    md = {j for _, j in matches}
    return Association(matches, [i for i in range(n) if i not in mt], [j for j in range(m) if j not in md])


class Detection(NamedTuple):
    """A detection box with its (optional) length measurement."""

    box: tuple
    result: object = None


class TrackedBox(NamedTuple):
    track_id: int
    bbox: BBox
    detection_index: int


def _accepted_length(result):
    if result is None:
        return None
    if isinstance(result, (int, float, np.floating)):
        return float(result) if np.isfinite(result) else None
    if getattr(result, "accepted", False):
        return float(result.length_m)
    return None


class Tracker:
    """Online SORT tracker for one session.

    Call :meth:`step` once per frame in capture order. Track ids start at
    1 and are never reused.
    """

    def __init__(self, config=TrackerConfig()):
        self.config = config
        self.tracks = []
        self.finished = []
        self._next_id = 1
        self._last_frame = None
        self.frame_count = 0

    def step(self, frame_id, detections):
        """Process one frame.

        Parameters
        ----------
        frame_id : comparable
            Must increase strictly from call to call.
        detections : sequence
            Boxes, or ``(box, result)`` pairs whose ``result`` is a
            LengthResult (or a bare length in metres).

        Returns
        -------
        list of TrackedBox
            Tracks updated or created at this frame, in detection order.
        """
        if self._last_frame is not None and not frame_id > self._last_frame:
            raise OrderError(f"frame {frame_id!r} does not follow {self._last_frame!r}")
        self._last_frame = frame_id
        self.frame_count += 1
        cfg = self.config

        dets = [d if isinstance(d, Detection) else
                (Detection(tuple(d[0]), d[1]) if len(d) == 2 and np.ndim(d[0]) == 1 else Detection(tuple(d)))
                for d in detections]
        boxes = check_boxes([d.box for d in dets]) if dets else np.zeros((0, 4))

        predicted = [predict(t) for t in self.tracks]
        # tracks whose prediction degenerated cannot be matched
        usable = [i for i, b in enumerate(predicted)
                  if np.all(np.isfinite(b)) and b.x2 > b.x1 and b.y2 > b.y1]
        assoc = associate([predicted[i] for i in usable], boxes, cfg.iou_threshold)

        det_track = {}
        for i, j in assoc.matches:
            track = self.tracks[usable[i]]
            update(track, boxes[j])
            track.last_frame = frame_id
            det_track[j] = track
        for j in assoc.unmatched_detections:
            track = Track(self._next_id, KalmanBoxState(boxes[j], cfg), first_frame=frame_id, last_frame=frame_id)
            self._next_id += 1
            self.tracks.append(track)
            det_track[j] = track

        out = []
        for j in range(len(dets)):
            track = det_track[j]
            length = _accepted_length(dets[j].result)
            if length is not None:
                track.lengths.append(length)
            if track.hits >= cfg.min_hits or self.frame_count <= cfg.min_hits:
                out.append(TrackedBox(track.id, track.box, j))

        alive = []
        for t in self.tracks:
            (alive if t.time_since_update <= cfg.max_age else self.finished).append(t)
        self.tracks = alive
        return out

    def all_tracks(self):
        return sorted(self.finished + self.tracks, key=lambda t: t.id)


def aggregate_lengths(track_or_values):
    """Median of the lengths inside the 1.5 IQR fences, or None if empty.

    Quartiles use linear interpolation between order statistics.
    """
    values = getattr(track_or_values, "lengths", track_or_values)
    v = np.sort(np.asarray(list(values), dtype=np.float64))
    if v.size == 0:
        return None
    q1, q3 = np.percentile(v, [25, 75])
    spread = 1.5 * (q3 - q1)
    kept = v[(v >= q1 - spread) & (v <= q3 + spread)]
    return float(np.median(kept))


class SortTracker(BaseEstimator):
    """Estimator wrapper: ``fit`` runs a whole session through the tracker.

    ``X`` is a sequence of ``(frame_id, detections)`` pairs. After fitting,
    ``tracks_`` holds every track and ``assignments_`` the per-frame output
    of :meth:`Tracker.step`.
    """

    def __init__(self, max_age=10, min_hits=0, iou_threshold=0.2):
        self.max_age = max_age
        self.min_hits = min_hits
        self.iou_threshold = iou_threshold

    def fit(self, X, y=None):
        tracker = Tracker(TrackerConfig(self.max_age, self.min_hits, self.iou_threshold))
        self.assignments_ = [(fid, tracker.step(fid, dets)) for fid, dets in X]
        self.tracks_ = tracker.all_tracks()
        return self

    def predict(self, X):
        """Track ids per frame, aligned with each frame's detections."""
        self.fit(X)
        out = []
        for (_, dets), (_, boxes) in zip(X, self.assignments_):
            ids = [None] * len(dets)
            for tb in boxes:
                ids[tb.detection_index] = tb.track_id
            out.append(ids)
        return out

    def lengths(self):
        return {t.id: aggregate_lengths(t) for t in self.tracks_}
