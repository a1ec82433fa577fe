"""Metric length of a prawn from its mask and an aligned depth frame.

The centreline is down-sampled, lifted into camera space with the pinhole
model, screened for inconsistent and out-of-range depth, gated on the
fraction of usable samples, repaired (outlier replacement + linear
interpolation of z), smoothed with quadratic fits to the pixel path, and
finally measured as the sum of Euclidean steps between successive points.
"""

from __future__ import annotations

import enum
import math
from dataclasses import asdict, dataclass, fields
from typing import NamedTuple, Optional

import numpy as np
from scipy.linalg import solve_triangular
from sklearn.base import BaseEstimator

from .errors import EmptyMask, FormatError, InvalidDepth, TooSparse
from .ingest import CameraIntrinsics, DepthFrame
from .skeleton import Centreline, build_graph, longest_path_centreline, skeletonize
from .validation import check_depth, check_mask, check_scalar

MISSING = float("nan")

# Modified z-score constant: Phi^-1(0.75), making MAD consistent with sigma.
_MODZ = 0.6745
# Companion constant for the mean absolute deviation fallback (sqrt(pi/2)).
_MEANAD = 1.253314
_MIN_Z_DEVIATION_M = 0.001


@dataclass(frozen=True)
class RangingConfig:
    sample_stride: int = 3
    validity_threshold: float = 0.95
    z_outlier_mad_k: float = 3.5
    inconsistency_mad_k: float = 5.0
    poly_degree: int = 2
    min_depth_m: float = 0.1
    max_depth_m: float = 3.0

    def __post_init__(self):
        check_scalar(self.sample_stride, "sample_stride", int, min_val=1)
        check_scalar(self.validity_threshold, "validity_threshold", min_val=0.0, max_val=1.0, include_min=False)
        check_scalar(self.z_outlier_mad_k, "z_outlier_mad_k", min_val=0.0, include_min=False)
        check_scalar(self.inconsistency_mad_k, "inconsistency_mad_k", min_val=0.0, include_min=False)
        if self.poly_degree != 2:
            raise ValueError("poly_degree is fixed at 2")
        check_scalar(self.min_depth_m, "min_depth_m", min_val=0.0)
        if not self.min_depth_m < self.max_depth_m:
            raise ValueError("min_depth_m must be below max_depth_m")

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown ranging options: {sorted(unknown)}")
        return cls(**d)

    to_dict = asdict


class Status(str, enum.Enum):
    ACCEPTED = "Accepted"
    REJECTED = "Rejected"


class Reason(str, enum.Enum):
    LOW_VALIDITY = "LowValidity"
    TOO_SPARSE = "TooSparse"
    EMPTY_MASK = "EmptyMask"


@dataclass(frozen=True)
class LengthResult:
    status: Status
    validity_ratio: float
    n_samples: int
    length_m: Optional[float] = None
    reason: Optional[Reason] = None
    frame_id: Optional[int] = None
    instance_id: Optional[int] = None

    def __post_init__(self):
        if self.status is Status.ACCEPTED and not (self.length_m is not None and self.length_m > 0):
            raise ValueError("accepted results need a positive length")

    @property
    def accepted(self):
        return self.status is Status.ACCEPTED

    @property
    def length_mm(self):
        return None if self.length_m is None else self.length_m * 1000.0


@dataclass(frozen=True, eq=False)
class DepthSamples:
    """Down-sampled centreline: pixel ``(x, y)`` rows, arc parameter ``t`` and depth ``z`` (NaN = missing)."""

    pixels: np.ndarray
    t: np.ndarray
    z: np.ndarray

    def __len__(self):
        return len(self.z)

    @property
    def present(self):
        return ~np.isnan(self.z)

    def with_z(self, z):
        return DepthSamples(self.pixels, self.t, np.asarray(z, dtype=np.float64))

    def slice(self, start, stop):
        return DepthSamples(self.pixels[start:stop], self.t[start:stop], self.z[start:stop])


@dataclass(frozen=True, eq=False)
class Polyline3D:
    points: np.ndarray

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        if not np.all(np.isfinite(pts)):
            raise ValueError("polyline coordinates must be finite")
        object.__setattr__(self, "points", pts)

    def __len__(self):
        return len(self.points)


def deproject(K: CameraIntrinsics, u, v, z):
    """Pixel ``(u, v)`` at range ``z`` metres to a camera-space point."""
    z_arr = np.asarray(z, dtype=np.float64)
    if np.any(~(z_arr > 0)):
        raise InvalidDepth("depth must be positive to de-project")
    x = (np.asarray(u, dtype=np.float64) - K.ppx) * z_arr / K.fx
    y = (np.asarray(v, dtype=np.float64) - K.ppy) * z_arr / K.fy
    if np.ndim(x) == 0:
        return float(x), float(y), float(z_arr)
    return np.stack(np.broadcast_arrays(x, y, z_arr), axis=-1)


def project(K: CameraIntrinsics, x, y, z):
    """Inverse of :func:`deproject`."""
    z = np.asarray(z, dtype=np.float64)
    u = np.asarray(x) * K.fx / z + K.ppx
    v = np.asarray(y) * K.fy / z + K.ppy
    if np.ndim(u) == 0:
        return float(u), float(v)
    return u, v


def _arc_parameter(path):
    steps = np.hypot(*np.diff(path, axis=0).T) if len(path) > 1 else np.zeros(0)
    s = np.concatenate([[0.0], np.cumsum(steps)])
    return s / s[-1] if s[-1] > 0 else s


def sample_depth_along(line: Centreline, depth: DepthFrame, cfg: RangingConfig = RangingConfig()):
    path = line.as_array()
    values = check_depth(depth)
    xs, ys = path[:, 0].astype(int), path[:, 1].astype(int)
    if xs.min() < 0 or ys.min() < 0 or xs.max() >= values.shape[1] or ys.max() >= values.shape[0]:
        raise FormatError("centreline leaves the depth frame")
    t = _arc_parameter(path)
    idx = np.arange(0, len(path), cfg.sample_stride)
    if idx[-1] != len(path) - 1:
        idx = np.append(idx, len(path) - 1)
    raw = values[ys[idx], xs[idx]]
    z = raw.astype(np.float64) * getattr(depth, "depth_scale", 0.001)
    z[raw == 0] = np.nan
    z[(z < cfg.min_depth_m) | (z > cfg.max_depth_m)] = np.nan
    return DepthSamples(path[idx].astype(np.int64), t[idx], z)


def _trend_residuals(t, v):
    """Deviation of each value from the line through its nearest neighbours."""
    n = len(v)
    res = np.empty(n)
    for j in range(n):
        if j == 0:
            a, b = 1, 2
        elif j == n - 1:
            a, b = n - 2, n - 3
        else:
            a, b = j - 1, j + 1
        dt = t[b] - t[a]
        pred = v[a] if dt == 0 else v[a] + (v[b] - v[a]) * (t[j] - t[a]) / dt
        res[j] = v[j] - pred
    return res


def _robust_score(res, floor):
    med = np.median(res)
    mad = np.median(np.abs(res - med))
    return np.abs(res - med) / max(mad, floor)


def reject_inconsistent(samples: DepthSamples, K: CameraIntrinsics, cfg: RangingConfig = RangingConfig()):
    """Mark samples whose 3-D x or y breaks the local linear trend.

    Residuals against the line through each sample's present neighbours
    are scored in units of their median absolute deviation (never less
    than one pixel footprint at the median range). The worst offender
    beyond ``inconsistency_mad_k`` is dropped and the screen repeated, so
    the neighbours of a single bad sample are not dragged out with it.
    """
    z = samples.z.copy()
    while True:
        present = np.flatnonzero(~np.isnan(z))
        if len(present) < 3:
            break
        zp = z[present]
        u = samples.pixels[present, 0] + 0.5
        v = samples.pixels[present, 1] + 0.5
        t = samples.t[present]
        floor = float(np.median(zp)) / max(K.fx, K.fy)
        score = np.maximum(
            _robust_score(_trend_residuals(t, (u - K.ppx) * zp / K.fx), floor),
            _robust_score(_trend_residuals(t, (v - K.ppy) * zp / K.fy), floor),
        )
        worst = int(np.argmax(score))
        if score[worst] <= cfg.inconsistency_mad_k:
            break
        z[present[worst]] = np.nan
    return samples.with_z(z)


def validity_ratio(samples: DepthSamples):
    return float(np.count_nonzero(samples.present)) / len(samples) if len(samples) else 0.0


def replace_z_outliers(zs, cfg: RangingConfig = RangingConfig()):
    """Replace extreme depth values with NaN using a modified z-score.

    The score is ``0.6745 * (z - median) / MAD``; when the MAD is zero the
    mean absolute deviation (scaled by 1.2533) stands in. Values within
    1 mm of the median are never flagged.
    """
    z = np.array(zs, dtype=np.float64)
    present = ~np.isnan(z)
    if not present.any():
        return z
    zp = z[present]
    med = np.median(zp)
    dev = np.abs(zp - med)
    mad = np.median(dev)
    if mad > 0:
        score = _MODZ * dev / mad
    else:
        mean_ad = dev.mean()
        score = dev / (_MEANAD * mean_ad) if mean_ad > 0 else np.zeros_like(dev)
    outlier = (score > cfg.z_outlier_mad_k) & (dev > _MIN_Z_DEVIATION_M)
    idx = np.flatnonzero(present)[outlier]
    z[idx] = np.nan
    return z


class Interpolated(NamedTuple):
    values: np.ndarray
    start: int
    stop: int


def interpolate_missing(zs, ts=None):
    """Trim leading/trailing gaps and linearly fill interior ones.

    Interpolation runs over ``ts`` when given, otherwise over the index.
    Present values are copied through unchanged.

    Raises
    ------
    TooSparse
        If fewer than two values are present.
    """
    z = np.asarray(zs, dtype=np.float64)
    present = np.flatnonzero(~np.isnan(z))
    if len(present) < 2:
        raise TooSparse("need at least two depth values to interpolate")
    start, stop = int(present[0]), int(present[-1]) + 1
    z = z[start:stop].copy()
    t = np.arange(len(z), dtype=np.float64) if ts is None else np.asarray(ts, dtype=np.float64)[start:stop]
    gaps = np.isnan(z)
    if gaps.any():
        ok = ~gaps
        z[gaps] = np.interp(t[gaps], t[ok], z[ok])
    return Interpolated(z, start, stop)


def fit_poly2(ts, vals):
    """Least-squares ``c0 + c1*t + c2*t**2`` via a QR factorisation.

    Returns
    -------
    ndarray of shape (3,)
        Coefficients in increasing order of power.
    """
    t = np.asarray(ts, dtype=np.float64)
    y = np.asarray(vals, dtype=np.float64)
    if len(t) != len(y):
        raise ValueError("ts and vals differ in length")
    if len(np.unique(t)) < 3:
        raise TooSparse("quadratic fit needs at least three distinct parameters")
    A = np.vander(t, 3, increasing=True)
    q, r = np.linalg.qr(A)
    return solve_triangular(r, q.T @ y)


def eval_poly2(coef, t):
    t = np.asarray(t, dtype=np.float64)
    return coef[0] + coef[1] * t + coef[2] * t * t


def smooth_pixels(samples: DepthSamples):
    """Quadratic fits of pixel x(t) and y(t), evaluated at the sample parameters."""
    if len(samples) < 3:
        raise TooSparse("smoothing needs at least three samples")
    px = samples.pixels[:, 0].astype(np.float64)
    py = samples.pixels[:, 1].astype(np.float64)
    return eval_poly2(fit_poly2(samples.t, px), samples.t), eval_poly2(fit_poly2(samples.t, py), samples.t)


def smooth_centreline(samples: DepthSamples, K: CameraIntrinsics, cfg: RangingConfig = RangingConfig()):
    """Smooth the pixel path and lift it to 3-D with the per-sample depth."""
    if np.isnan(samples.z).any():
        raise ValueError("smooth_centreline expects a complete z sequence")
    sx, sy = smooth_pixels(samples)
    return Polyline3D(deproject(K, sx + 0.5, sy + 0.5, samples.z))


def polyline_length(p):
    pts = p.points if isinstance(p, Polyline3D) else np.asarray(p, dtype=np.float64)
    if len(pts) < 2:
        raise TooSparse("a length needs at least two points")
    return float(np.linalg.norm(np.diff(pts, axis=0), axis=1).sum())


def measure(mask, depth: DepthFrame, K: CameraIntrinsics, cfg: RangingConfig = RangingConfig(),
            frame_id=None, instance_id=None, centreline=None):
    """Run the full chain for one instance and return a :class:`LengthResult`.

    Failures inside the chain are reported as ``Rejected`` results, never
    raised. A precomputed ``centreline`` skips the skeleton stage.
    """
    tags = {"frame_id": frame_id, "instance_id": instance_id}
    if centreline is None:
        bits = check_mask(mask, shape=check_depth(depth).shape)
        try:
            centreline = longest_path_centreline(build_graph(skeletonize(bits)))
        except EmptyMask:
            return LengthResult(Status.REJECTED, 0.0, 0, reason=Reason.EMPTY_MASK, **tags)

    samples = reject_inconsistent(sample_depth_along(centreline, depth, cfg), K, cfg)
    ratio = validity_ratio(samples)
    n = len(samples)
    if n < 3:
        return LengthResult(Status.REJECTED, ratio, n, reason=Reason.TOO_SPARSE, **tags)
    if ratio < cfg.validity_threshold:
        return LengthResult(Status.REJECTED, ratio, n, reason=Reason.LOW_VALIDITY, **tags)
    try:
        z = replace_z_outliers(samples.z, cfg)
        filled = interpolate_missing(z, samples.t)
        kept = samples.slice(filled.start, filled.stop).with_z(filled.values)
        length = polyline_length(smooth_centreline(kept, K, cfg))
    except TooSparse:
        return LengthResult(Status.REJECTED, ratio, n, reason=Reason.TOO_SPARSE, **tags)
    if not (length > 0 and math.isfinite(length)):
        return LengthResult(Status.REJECTED, ratio, n, reason=Reason.TOO_SPARSE, **tags)
    return LengthResult(Status.ACCEPTED, ratio, n, length_m=length, **tags)


class LengthEstimator(BaseEstimator):
    """Scikit-learn style front end to :func:`measure`.

    Parameters mirror :class:`RangingConfig`. ``transform`` takes an
    iterable of ``(mask, depth)`` pairs and returns lengths in metres with
    NaN for rejected instances; the full results land in ``results_``.
    """

    def __init__(self, intrinsics=None, sample_stride=3, validity_threshold=0.95, z_outlier_mad_k=3.5,
                 inconsistency_mad_k=5.0, min_depth_m=0.1, max_depth_m=3.0):
        self.intrinsics = intrinsics
        self.sample_stride = sample_stride
        self.validity_threshold = validity_threshold
        self.z_outlier_mad_k = z_outlier_mad_k
        self.inconsistency_mad_k = inconsistency_mad_k
        self.min_depth_m = min_depth_m
        self.max_depth_m = max_depth_m

    def fit(self, X=None, y=None):
        if not isinstance(self.intrinsics, CameraIntrinsics):
            raise TypeError("intrinsics must be a CameraIntrinsics record")
        params = self.get_params()
        params.pop("intrinsics")
        self.config_ = RangingConfig(**params)
        return self

    def measure(self, mask, depth, **tags):
        if not hasattr(self, "config_"):
            self.fit()
        return measure(mask, depth, self.intrinsics, self.config_, **tags)

    def transform(self, X):
        self.results_ = [self.measure(mask, depth) for mask, depth in X]
        return np.array([r.length_m if r.accepted else np.nan for r in self.results_])

    def fit_transform(self, X, y=None):
        return self.fit().transform(X)
