"""Synthetic scenes and motion scripts with known ground truth.

Prawns are Bezier ribbons (quadratic by default, cubic to probe model
mismatch) lying on a depth surface ``z(u, v) = depth + tilt_u*(u - ppx) +
tilt_v*(v - ppy)``. The true length is the arc length of the de-projected
curve, integrated numerically on a fine parameter grid.

Randomness comes from ``numpy.random.Generator(PCG64(seed))`` only, so a
scene is a pure function of its spec.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.spatial import cKDTree

from .errors import SpecError
from .ingest import BinaryMask, CameraIntrinsics, DepthFrame, PolygonAnnotation

ORACLE_SUBDIVISIONS = 10_000
_RIBBON_EPS = 1e-7


def rng_for(seed):
    return np.random.Generator(np.random.PCG64(seed))


def bezier(control, tau):
    """Evaluate a Bezier curve of any degree at parameters ``tau`` (de Casteljau)."""
    pts = np.asarray(control, dtype=np.float64)
    tau = np.asarray(tau, dtype=np.float64)[:, None]
    layer = [np.broadcast_to(p, (len(tau), 2)) for p in pts]
    while len(layer) > 1:
        layer = [(1 - tau) * a + tau * b for a, b in zip(layer[:-1], layer[1:])]
    return layer[0]


_GOLDEN = (math.sqrt(5.0) - 1.0) / 2.0


def golden_rotation(n):
    """Fractional part of ``n`` times the golden ratio conjugate.

    Any run of consecutive integers lands evenly over [0, 1), so
    thresholding at ``rate`` marks close to that fraction of them.
    """
    return np.mod(np.asarray(n, dtype=np.float64) * _GOLDEN, 1.0)


@dataclass(frozen=True)
class SyntheticPrawn:
    """One ribbon-shaped animal; ``control`` holds 3 (quadratic) or 4 (cubic) pixel points."""

    control: tuple
    half_width: float
    depth_m: float
    tilt_u: float = 0.0
    tilt_v: float = 0.0

    def __post_init__(self):
        ctrl = tuple((float(x), float(y)) for x, y in self.control)
        object.__setattr__(self, "control", ctrl)
        if len(ctrl) not in (3, 4):
            raise SpecError("control must hold 3 or 4 points")
        if self.half_width < 1:
            raise SpecError("half_width must be at least 1 pixel")
        if not self.depth_m > 0:
            raise SpecError("depth_m must be positive")

    def points(self, n=ORACLE_SUBDIVISIONS):
        return bezier(self.control, np.linspace(0.0, 1.0, n + 1))

    def true_pixel_arc_length(self, n=ORACLE_SUBDIVISIONS):
        return float(np.hypot(*np.diff(self.points(n), axis=0).T).sum())

    def depth_at(self, u, v, K):
        return self.depth_m + self.tilt_u * (np.asarray(u) - K.ppx) + self.tilt_v * (np.asarray(v) - K.ppy)

    def true_length_m(self, K, n=ORACLE_SUBDIVISIONS):
        p = self.points(n)
        z = self.depth_at(p[:, 0], p[:, 1], K)
        xyz = np.column_stack([(p[:, 0] - K.ppx) * z / K.fx, (p[:, 1] - K.ppy) * z / K.fy, z])
        return float(np.linalg.norm(np.diff(xyz, axis=0), axis=1).sum())

    def translated(self, dx, dy):
        return SyntheticPrawn(tuple((x + dx, y + dy) for x, y in self.control), self.half_width,
                              self.depth_m, self.tilt_u, self.tilt_v)

    def reflected_x(self, width):
        return SyntheticPrawn(tuple((width - x, y) for x, y in self.control), self.half_width,
                              self.depth_m, -self.tilt_u, self.tilt_v)

    def _dense(self, metric="euclidean"):
        n = max(64, int(math.ceil(self.true_pixel_arc_length(256) / 0.05)))
        tau = np.linspace(0.0, 1.0, n + 1)
        pts = bezier(self.control, tau)
        d = np.abs(np.diff(pts, axis=0))
        step = np.hypot(d[:, 0], d[:, 1]) if metric == "euclidean" else d.max(axis=1)
        s = np.concatenate([[0.0], np.cumsum(step)])
        return pts, s

    def ribbon(self, width, height, metric="euclidean"):
        """Pixels whose centre lies within ``half_width`` of the curve.

        Returns the mask and, for each set pixel, the arc coordinate (px)
        of its nearest curve point (``-1`` elsewhere). With
        ``metric="chebyshev"`` the coordinate counts 8-connected pixel
        steps along the curve instead of Euclidean length.
        """
        if metric not in ("euclidean", "chebyshev"):
            raise ValueError(f"unknown metric {metric!r}")
        pts, s = self._dense(metric)
        lo = np.floor(pts.min(axis=0) - self.half_width - 1).astype(int)
        hi = np.ceil(pts.max(axis=0) + self.half_width + 1).astype(int)
        x0, y0 = max(lo[0], 0), max(lo[1], 0)
        x1, y1 = min(hi[0], width), min(hi[1], height)
        bits = np.zeros((height, width), dtype=bool)
        arc = np.full((height, width), -1.0)
        if x1 <= x0 or y1 <= y0:
            return bits, arc
        gy, gx = np.mgrid[y0:y1, x0:x1]
        centres = np.column_stack([gx.ravel() + 0.5, gy.ravel() + 0.5])
        dist, idx = cKDTree(pts).query(centres, distance_upper_bound=self.half_width + 0.5)
        inside = np.isfinite(dist)
        inside[inside] = dist[inside] ** 2 <= self.half_width ** 2 + _RIBBON_EPS
        sub = inside.reshape(gx.shape)
        bits[y0:y1, x0:x1] = sub
        arc[y0:y1, x0:x1][sub] = s[idx[inside]]
        return bits, arc

    def outline(self, n=48):
        """Closed polygon approximating the ribbon (offset curve plus round caps)."""
        tau = np.linspace(0.0, 1.0, n + 1)
        c = bezier(self.control, tau)
        d = np.gradient(c, axis=0)
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        normal = np.column_stack([-d[:, 1], d[:, 0]])
        r = self.half_width
        left, right = c + r * normal, c - r * normal
        ang_end = math.atan2(d[-1, 1], d[-1, 0])
        ang_start = math.atan2(d[0, 1], d[0, 0])
        cap = np.linspace(-math.pi / 2, math.pi / 2, 9)[1:-1]
        end_cap = c[-1] + r * np.column_stack([np.cos(ang_end - cap), np.sin(ang_end - cap)])
        start_cap = c[0] + r * np.column_stack([np.cos(ang_start + math.pi - cap), np.sin(ang_start + math.pi - cap)])
        return np.vstack([left, end_cap, right[::-1], start_cap])

    def within(self, width, height):
        p = self.points(256)
        r = self.half_width
        return bool(p[:, 0].min() - r >= 0 and p[:, 1].min() - r >= 0
                    and p[:, 0].max() + r <= width and p[:, 1].max() + r <= height)


@dataclass(frozen=True)
class SceneSpec:
    """Inputs for :func:`gen_scene`.

    ``hole_pattern`` selects how depth holes are laid out: ``"stratified"``
    cuts each prawn body into cross-section patches ``hole_patch`` pixel
    steps long and drops close to ``hole_rate`` of them (golden-ratio
    ordering, so holes are nested in the rate), while ``"iid"`` drops
    every pixel independently. Background pixels are iid
    in both modes.
    """

    seed: int
    intrinsics: CameraIntrinsics
    prawns: tuple = ()
    hole_rate: float = 0.0
    depth_noise_sigma_m: float = 0.0
    hole_pattern: str = "stratified"
    hole_patch: int = 3
    background_depth_m: Optional[float] = None

    def __post_init__(self):
        object.__setattr__(self, "prawns", tuple(self.prawns))
        if not 0.0 <= self.hole_rate < 1.0:
            raise SpecError("hole_rate must lie in [0, 1)")
        if self.depth_noise_sigma_m < 0:
            raise SpecError("depth_noise_sigma_m must be non-negative")
        if self.hole_pattern not in ("stratified", "iid"):
            raise SpecError(f"unknown hole_pattern {self.hole_pattern!r}")
        if int(self.hole_patch) != self.hole_patch or self.hole_patch < 1:
            raise SpecError("hole_patch must be a positive integer")

    @property
    def width(self):
        return self.intrinsics.width

    @property
    def height(self):
        return self.intrinsics.height


@dataclass(frozen=True)
class Scene:
    masks: list
    depth: DepthFrame
    lengths_m: list
    spec: SceneSpec = field(repr=False)


def gen_scene(spec: SceneSpec):
    """Render masks, a depth frame and the true lengths for a scene.

    Raises
    ------
    SpecError
        If any prawn ribbon leaves the frame.
    """
    K = spec.intrinsics
    W, H = spec.width, spec.height
    rng = rng_for(spec.seed)
    for i, p in enumerate(spec.prawns):
        if not p.within(W, H):
            raise SpecError(f"prawn {i} leaves the {W}x{H} frame")

    base = spec.background_depth_m
    if base is None:
        base = spec.prawns[0].depth_m if spec.prawns else 0.5
    z = np.full((H, W), float(base))
    uniform = rng.random((H, W))
    noise = rng.standard_normal((H, W)) if spec.depth_noise_sigma_m > 0 else None
    holes = uniform < spec.hole_rate

    masks, lengths = [], []
    for p in spec.prawns:
        bits, arc = p.ribbon(W, H, metric="chebyshev")
        ys, xs = np.nonzero(bits)
        z[ys, xs] = p.depth_at(xs + 0.5, ys + 0.5, K)
        if spec.hole_pattern == "stratified":
            offset = int(rng.integers(0, 1 << 20))

            cell = np.floor(arc[ys, xs] / spec.hole_patch).astype(np.int64) + offset
            holes[ys, xs] = golden_rotation(cell) < spec.hole_rate
        masks.append(BinaryMask(bits))
        lengths.append(p.true_length_m(K))

    if noise is not None:
        z = z + spec.depth_noise_sigma_m * noise
    units = np.rint(z / K.depth_scale)
    units = np.clip(units, 1, 65535).astype(np.uint16)
    units[holes] = 0
    return Scene(masks, DepthFrame(units, K.depth_scale), lengths, spec)


def random_prawn(rng, K, length_m, depth_m, *, bend=0.25, half_width_frac=0.045, cubic=False,
                 tilt=(0.0, 0.0), margin=4, tries=200, bounds=None):
    """Place a prawn of roughly ``length_m`` at ``depth_m`` uniformly within the frame.

    ``bend`` is the sideways offset of the middle control point(s) as a
    fraction of the chord; ``half_width_frac`` sets the ribbon half-width
    relative to the pixel length. ``bounds = (x0, y0, x1, y1)`` restricts
    placement to a sub-rectangle of the frame.
    """
    bx0, by0, bx1, by1 = (0.0, 0.0, K.width, K.height) if bounds is None else map(float, bounds)
    target_px = length_m * K.fx / depth_m
    half_width = max(1.0, half_width_frac * target_px)
    for _ in range(tries):
        angle = rng.uniform(0, math.pi)
        offset = rng.uniform(-bend, bend)
        d = np.array([math.cos(angle), math.sin(angle)])
        n = np.array([-d[1], d[0]])
        if cubic:
            unit = [-0.5 * d, -d / 6 + offset * n, d / 6 - offset * n, 0.5 * d]
        else:
            unit = [-0.5 * d, 2 * offset * n, 0.5 * d]
        unit_len = SyntheticPrawn(tuple(map(tuple, unit)), 1.0, 1.0).true_pixel_arc_length(2048)
        scale = target_px / unit_len
        pts = np.array(unit) * scale
        span_lo = pts.min(axis=0) - half_width - margin
        span_hi = pts.max(axis=0) + half_width + margin
        free = np.array([bx1 - bx0, by1 - by0]) - (span_hi - span_lo)
        if np.any(free <= 0):
            continue
        centre = rng.uniform(0, 1, 2) * free - span_lo + np.array([bx0, by0])
        prawn = SyntheticPrawn(tuple(map(tuple, pts + centre)), half_width, depth_m, *tilt)
        if prawn.within(K.width, K.height):
            return prawn
    raise SpecError(f"cannot fit a {length_m * 1000:.0f} mm prawn at {depth_m:.2f} m in the frame")


# --------------------------------------------------------------------------
# Motion scripts for the tracker


@dataclass(frozen=True)
class ScriptedBox:
    gt_id: int
    box: tuple
    velocity: tuple = (0.0, 0.0)
    jumps: tuple = ()  # (frame, dx, dy): teleport applied before rendering that frame
    visible: tuple = ()  # (first, last) inclusive frame ranges when shown; empty = always


@dataclass(frozen=True)
class MotionScript:
    seed: int
    n_frames: int
    width: int
    height: int
    boxes: tuple

    def __post_init__(self):
        object.__setattr__(self, "boxes", tuple(self.boxes))
        if self.n_frames < 1:
            raise SpecError("n_frames must be positive")


@dataclass(frozen=True)
class MotionFrames:
    detections: list  # per frame: (n, 4) array
    gt_ids: list  # per frame: list of ids aligned with detections


def gen_motion(script: MotionScript):
    """Deterministic per-frame boxes for a motion script.

    Raises
    ------
    SpecError
        If a box leaves the frame or a jump keeps any overlap with the
        previous position.
    """
    dets, ids = [], []
    state = {}
    for b in script.boxes:
        x1, y1, x2, y2 = map(float, b.box)
        if not (x2 > x1 and y2 > y1):
            raise SpecError(f"box {b.gt_id} is degenerate")
        state[b.gt_id] = np.array([x1, y1, x2, y2])
    for f in range(script.n_frames):
        frame_boxes, frame_ids = [], []
        for b in script.boxes:
            cur = state[b.gt_id]
            if f > 0:
                cur = cur + np.array([*b.velocity, *b.velocity], dtype=np.float64)
            for jf, dx, dy in b.jumps:
                if jf == f:
                    w, h = cur[2] - cur[0], cur[3] - cur[1]
                    if abs(dx) < w and abs(dy) < h:
                        raise SpecError(f"jump of box {b.gt_id} at frame {f} keeps overlap")
                    cur = cur + np.array([dx, dy, dx, dy], dtype=np.float64)
            state[b.gt_id] = cur
            if cur[0] < 0 or cur[1] < 0 or cur[2] > script.width or cur[3] > script.height:
                raise SpecError(f"box {b.gt_id} leaves the frame at frame {f}")
            shown = not b.visible or any(lo <= f <= hi for lo, hi in b.visible)
            if shown:
                frame_boxes.append(cur.copy())
                frame_ids.append(b.gt_id)
        dets.append(np.array(frame_boxes).reshape(-1, 4))
        ids.append(frame_ids)
    return MotionFrames(dets, ids)


def polygon_annotation(prawn: SyntheticPrawn, image_id, score=None, decimals=2):
    verts = np.round(prawn.outline(), decimals)
    return PolygonAnnotation(image_id, tuple(map(tuple, verts)), score)


# --------------------------------------------------------------------------
# Multi-frame sessions and seasons


DEFAULT_SEASON_INTRINSICS = CameraIntrinsics(460.0, 460.0, 320.0, 180.0, 640, 360)


@dataclass(frozen=True)
class SeasonSpec:
    """A synthetic grow-out season: ponds x days of culture x tray checks.

    Each session (one pond on one DOC) shows ``prawns_per_session``
    animals drifting at ``speed_px`` per frame over ``frames_per_session``
    frames. Mean length grows linearly by ``growth_mm_per_day`` from
    ``initial_length_mm`` at DOC 0, with per-animal spread
    ``length_sd_mm``. ``hand_samples`` feed-tray lengths are drawn from the
    same distribution for every session.
    """

    seed: int = 0
    intrinsics: CameraIntrinsics = DEFAULT_SEASON_INTRINSICS
    ponds: tuple = ("P1", "P2", "P3", "P4")
    docs: tuple = (10, 20, 30, 40, 50, 60, 70, 80)
    frames_per_session: int = 4
    prawns_per_session: int = 4
    initial_length_mm: float = 60.0
    growth_mm_per_day: float = 0.9
    length_sd_mm: float = 3.0
    depth_range_m: tuple = (0.4, 0.6)
    bend: float = 0.2
    speed_px: float = 3.0
    hole_rate: float = 0.0
    depth_noise_sigma_m: float = 0.0
    hand_samples: int = 3

    def __post_init__(self):
        object.__setattr__(self, "ponds", tuple(str(p) for p in self.ponds))
        object.__setattr__(self, "docs", tuple(int(d) for d in self.docs))
        object.__setattr__(self, "depth_range_m", tuple(float(d) for d in self.depth_range_m))
        if not self.ponds or len(set(self.ponds)) != len(self.ponds):
            raise SpecError("ponds must be a non-empty list of distinct ids")
        if not self.docs or min(self.docs) < 0 or len(set(self.docs)) != len(self.docs):
            raise SpecError("docs must be distinct non-negative integers")
        if self.frames_per_session < 1 or self.prawns_per_session < 1:
            raise SpecError("sessions need at least one frame and one prawn")
        lo, hi = self.depth_range_m
        if not 0 < lo <= hi:
            raise SpecError("depth_range_m must satisfy 0 < lo <= hi")
        if self.initial_length_mm <= 0 or self.length_sd_mm < 0 or self.speed_px < 0:
            raise SpecError("lengths must be positive and spreads non-negative")
        if not 0.0 <= self.hole_rate < 1.0 or self.depth_noise_sigma_m < 0 or self.hand_samples < 0:
            raise SpecError("invalid noise or sampling settings")

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        extra = set(d) - set(cls.__dataclass_fields__)
        if extra:
            raise SpecError(f"unknown season setting {sorted(extra)[0]!r}")
        if "intrinsics" in d:
            try:
                d["intrinsics"] = CameraIntrinsics(**d["intrinsics"])
            except TypeError as exc:
                raise SpecError(f"bad intrinsics: {exc}") from None
        try:
            return cls(**d)
        except (TypeError, ValueError) as exc:
            raise SpecError(str(exc)) from None

    def mean_length_mm(self, doc):
        return self.initial_length_mm + self.growth_mm_per_day * doc


@dataclass(frozen=True)
class SessionFrame:
    frame_id: int
    depth: DepthFrame
    annotations: tuple


@dataclass(frozen=True)
class SyntheticSession:
    pond_id: str
    doc: int
    intrinsics: CameraIntrinsics
    frames: tuple
    hand_measurements_mm: tuple
    truth: tuple  # (frame_id, instance, prawn_id, true_length_mm)


def gen_session(spec: SeasonSpec, pond_index, doc):
    """One tray check: the same animals seen over consecutive frames."""
    K = spec.intrinsics
    rng = rng_for([spec.seed, pond_index, doc])
    n, n_frames = spec.prawns_per_session, spec.frames_per_session
    travel = spec.speed_px * (n_frames - 1)
    cell_w = K.width / n
    mean = spec.mean_length_mm(doc)
    base, velocities = [], []
    for k in range(n):
        length_mm = max(0.5 * mean, rng.normal(mean, spec.length_sd_mm))
        depth = rng.uniform(*spec.depth_range_m)
        heading = rng.uniform(0, 2 * math.pi)
        v = spec.speed_px * np.array([math.cos(heading), math.sin(heading)])
        # the cell leaves room for the whole drift
        bounds = (k * cell_w + max(0.0, -v[0]) * (n_frames - 1), max(0.0, -v[1]) * (n_frames - 1),
                  (k + 1) * cell_w - max(0.0, v[0]) * (n_frames - 1), K.height - max(0.0, v[1]) * (n_frames - 1))
        if bounds[2] - bounds[0] < travel or bounds[3] - bounds[1] < travel:
            raise SpecError("frame too small for the requested drift")
        base.append(random_prawn(rng, K, length_mm / 1000.0, depth, bend=spec.bend, bounds=bounds))
        velocities.append(v)

    frames, truth = [], []
    for f in range(n_frames):
        prawns = [p.translated(*(f * v)) for p, v in zip(base, velocities)]
        scene = gen_scene(SceneSpec(int(rng.integers(0, 2**31)), K, prawns, spec.hole_rate,
                                    spec.depth_noise_sigma_m, background_depth_m=spec.depth_range_m[1] + 0.2))
        image_id = f"{f:06d}.png"
        anns = tuple(polygon_annotation(p, image_id) for p in prawns)
        frames.append(SessionFrame(f, scene.depth, anns))
        truth += [(f, k, k, 1000.0 * length) for k, length in enumerate(scene.lengths_m)]
    hand = tuple(float(round(max(0.5 * mean, rng.normal(mean, spec.length_sd_mm)), 1))
                 for _ in range(spec.hand_samples))
    return SyntheticSession(spec.ponds[pond_index], doc, K, tuple(frames), hand, tuple(truth))


def gen_season(spec: SeasonSpec):
    """Yield every session of the season, pond by pond, in DOC order."""
    for i in range(len(spec.ponds)):
        for doc in sorted(spec.docs):
            yield gen_session(spec, i, doc)
