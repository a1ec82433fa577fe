"""Input validation helpers, in the spirit of ``sklearn.utils.validation``."""

from __future__ import annotations

import numbers

import numpy as np

from .errors import FormatError


def check_mask(mask, shape=None):
    """Return the boolean raster behind ``mask`` (a BinaryMask or array-like)."""
    bits = getattr(mask, "bits", mask)
    bits = np.asarray(bits)
    if bits.ndim != 2:
        raise FormatError(f"expected a 2-D mask, got shape {bits.shape}")
    if bits.dtype != bool:
        bits = bits != 0
    if shape is not None and bits.shape != tuple(shape):
        raise FormatError(f"mask shape {bits.shape} does not match frame {tuple(shape)}")
    return bits


def check_depth(depth, shape=None):
    values = np.asarray(getattr(depth, "values", depth))
    if values.ndim != 2:
        raise FormatError(f"expected a 2-D depth raster, got shape {values.shape}")
    if shape is not None and values.shape != tuple(shape):
        raise FormatError(f"depth shape {values.shape} does not match {tuple(shape)}")
    return values


def check_scalar(x, name, target_type=numbers.Real, *, min_val=None, max_val=None,
                 include_min=True, include_max=True):
    """Validate a scalar parameter's type and bounds, raising ValueError."""
    if isinstance(x, bool) or not isinstance(x, target_type):
        raise TypeError(f"{name} must be {target_type}, got {type(x).__name__}")
    if min_val is not None and (x < min_val or (x == min_val and not include_min)):
        raise ValueError(f"{name} == {x}, must be {'>=' if include_min else '>'} {min_val}")
    if max_val is not None and (x > max_val or (x == max_val and not include_max)):
        raise ValueError(f"{name} == {x}, must be {'<=' if include_max else '<'} {max_val}")
    return x


def check_boxes(boxes):
    """Coerce to an ``(n, 4)`` float array of ``x1, y1, x2, y2`` rows."""
    a = np.asarray(boxes, dtype=np.float64)
    if a.size == 0:
        return a.reshape(0, 4)
    a = np.atleast_2d(a)
    if a.ndim != 2 or a.shape[1] < 4:
        raise ValueError(f"boxes must have shape (n, 4), got {a.shape}")
    a = a[:, :4]
    if not np.all(np.isfinite(a)):
        raise ValueError("boxes must be finite")
    if np.any(a[:, 2] <= a[:, 0]) or np.any(a[:, 3] <= a[:, 1]):
        raise ValueError("boxes need x2 > x1 and y2 > y1")
    return a
