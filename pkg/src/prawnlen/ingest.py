"""Readers and writers for the on-disk inputs of a measurement session.

Covers VGG Image Annotator (VIA) polygon exports, 16-bit depth rasters
(binary PGM or raw little-endian ``.z16``), 8-bit mask PGMs, and the JSON
intrinsics/manifest documents that tie a session directory together.
"""

from __future__ import annotations

import json
import logging
import math
import numbers
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple, Optional, Sequence

import numpy as np

from .errors import ConfigError, EmptyMask, FormatError, ParseError

logger = logging.getLogger(__name__)

DEFAULT_DEPTH_SCALE = 0.001


def _readonly(a):
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class CameraIntrinsics:
    """Pinhole model of the depth-aligned colour camera."""

    fx: float
    fy: float
    ppx: float
    ppy: float
    width: int
    height: int
    depth_scale: float = DEFAULT_DEPTH_SCALE

    def __post_init__(self):
        for name in ("fx", "fy", "depth_scale"):
            value = getattr(self, name)
            if not math.isfinite(value) or value <= 0:
                raise ConfigError(name, f"must be positive, got {value!r}")
        for name in ("width", "height"):
            if int(getattr(self, name)) != getattr(self, name) or getattr(self, name) <= 0:
                raise ConfigError(name, "must be a positive integer")
        if not 0 <= self.ppx < self.width:
            raise ConfigError("ppx", f"must lie in [0, {self.width})")
        if not 0 <= self.ppy < self.height:
            raise ConfigError("ppy", f"must lie in [0, {self.height})")

    def to_dict(self):
        return {
            "fx": self.fx,
            "fy": self.fy,
            "ppx": self.ppx,
            "ppy": self.ppy,
            "width": self.width,
            "height": self.height,
            "depth_scale": self.depth_scale,
        }


@dataclass(frozen=True, eq=False)
class DepthFrame:
    """Z16 range raster; ``values`` has shape ``(height, width)`` and 0 marks no depth."""

    values: np.ndarray
    depth_scale: float = DEFAULT_DEPTH_SCALE

    def __post_init__(self):
        values = np.asarray(self.values)
        if values.ndim != 2:
            raise FormatError(f"depth raster must be 2-D, got shape {values.shape}")
        if values.dtype != np.uint16:
            if values.size and (values.min() < 0 or values.max() > 65535):
                raise FormatError("depth values must fit in 16 bits")
            values = values.astype(np.uint16)
        object.__setattr__(self, "values", _readonly(values))
        if not self.depth_scale > 0:
            raise ConfigError("depth_scale", "must be positive")

    @property
    def width(self):
        return self.values.shape[1]

    @property
    def height(self):
        return self.values.shape[0]

    @property
    def n_valid(self):
        return int(np.count_nonzero(self.values))

    def metres(self):
        """Depth in metres as float64, with NaN where the sensor reported 0."""
        out = self.values.astype(np.float64) * self.depth_scale
        out[self.values == 0] = np.nan
        return out

    def __eq__(self, other):
        if not isinstance(other, DepthFrame):
            return NotImplemented
        return self.depth_scale == other.depth_scale and np.array_equal(self.values, other.values)


@dataclass(frozen=True)
class PolygonAnnotation:
    image_id: str
    vertices: tuple
    score: Optional[float] = None

    def __post_init__(self):
        verts = tuple((float(x), float(y)) for x, y in self.vertices)
        object.__setattr__(self, "vertices", verts)
        if len(verts) < 3:
            raise ValueError("a polygon needs at least 3 vertices")
        if self.score is not None and not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score must lie in [0, 1], got {self.score}")

    @property
    def bbox(self):
        xs = [v[0] for v in self.vertices]
        ys = [v[1] for v in self.vertices]
        return min(xs), min(ys), max(xs), max(ys)

    def area(self):
        """Absolute shoelace area (pixels squared)."""
        v = np.asarray(self.vertices)
        x, y = v[:, 0], v[:, 1]
        return 0.5 * abs(float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1))))


@dataclass(frozen=True, eq=False)
class BinaryMask:
    """Single-instance raster; ``bits`` is a read-only boolean ``(height, width)`` array."""

    bits: np.ndarray

    def __post_init__(self):
        bits = np.asarray(self.bits)
        if bits.ndim != 2:
            raise FormatError(f"mask must be 2-D, got shape {bits.shape}")
        object.__setattr__(self, "bits", _readonly(bits.astype(bool)))

    @property
    def width(self):
        return self.bits.shape[1]

    @property
    def height(self):
        return self.bits.shape[0]

    @property
    def count(self):
        return int(np.count_nonzero(self.bits))

    def bbox(self):
        """Tight pixel box ``(x1, y1, x2, y2)`` with exclusive upper corner."""
        ys, xs = np.nonzero(self.bits)
        if len(xs) == 0:
            raise EmptyMask("mask has no set pixels")
        return int(xs.min()), int(ys.min()), int(xs.max()) + 1, int(ys.max()) + 1

    def __eq__(self, other):
        if not isinstance(other, BinaryMask):
            return NotImplemented
        return np.array_equal(self.bits, other.bits)


@dataclass(frozen=True)
class FrameRef:
    frame_id: int
    depth: str
    colour: Optional[str] = None
    annotation: Optional[str] = None


@dataclass(frozen=True)
class SessionManifest:
    pond_id: str
    doc: int
    frames: tuple
    intrinsics: str
    hand_measurements: tuple = ()
    base_dir: Optional[Path] = field(default=None, compare=False)

    def resolve(self, ref):
        return Path(ref) if self.base_dir is None else Path(self.base_dir) / ref

    def to_dict(self):
        frames = []
        for f in self.frames:
            entry = {"frame_id": f.frame_id, "depth": f.depth}
            if f.colour is not None:
                entry["colour"] = f.colour
            if f.annotation is not None:
                entry["annotation"] = f.annotation
            frames.append(entry)
        out = {
            "pond_id": self.pond_id,
            "doc": self.doc,
            "intrinsics": self.intrinsics,
            "frames": frames,
        }
        if self.hand_measurements:
            out["hand_measurements"] = list(self.hand_measurements)
        return out


# --------------------------------------------------------------------------
# VIA annotations


class ViaParseResult(NamedTuple):
    annotations: list
    n_skipped: int
    n_rejected: int


def _decode(document):
    if isinstance(document, (bytes, bytearray)):
        try:
            return bytes(document).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise ParseError("document is not valid UTF-8", exc.start) from exc
    return document


def _regions_of(entry):
    regions = entry.get("regions", [])
    if isinstance(regions, dict):  # VIA 1.x keyed regions
        regions = [regions[k] for k in sorted(regions, key=lambda k: (len(k), k))]
    if not isinstance(regions, list):
        raise ParseError("'regions' must be a list or object")
    return regions


def parse_via(document):
    """Parse a VIA export into polygon annotations.

    Parameters
    ----------
    document : str or bytes
        JSON text of a VIA project/export. Both the bare image map and a
        project file with an ``_via_img_metadata`` member are accepted.

    Returns
    -------
    ViaParseResult
        Annotations in document order, plus counts of non-polygon regions
        skipped and polygons rejected for having fewer than 3 vertices.
    """
    text = _decode(document)
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(f"malformed JSON: {exc.msg}", len(text[: exc.pos].encode("utf-8"))) from exc
    if isinstance(data, dict) and "_via_img_metadata" in data:
        data = data["_via_img_metadata"]
    if not isinstance(data, dict):
        raise ParseError("top level must be an object mapping image keys to entries")

    annotations, skipped, rejected = [], 0, 0
    for key, entry in data.items():
        if not isinstance(entry, dict):
            raise ParseError(f"image entry {key!r} is not an object")
        image_id = str(entry.get("filename", key))
        for region in _regions_of(entry):
            shape = region.get("shape_attributes", {}) if isinstance(region, dict) else None
            if not isinstance(shape, dict):
                raise ParseError(f"region in {key!r} lacks shape_attributes")
            if shape.get("name") != "polygon":
                skipped += 1
                continue
            xs, ys = shape.get("all_points_x"), shape.get("all_points_y")
            if not isinstance(xs, list) or not isinstance(ys, list) or len(xs) != len(ys):
                raise ParseError(f"polygon in {key!r} has mismatched point arrays")
            if not all(isinstance(v, numbers.Real) and not isinstance(v, bool) for v in xs + ys):
                raise ParseError(f"polygon in {key!r} has non-numeric coordinates")
            if len(xs) < 3:
                rejected += 1
                continue
            attrs = region.get("region_attributes") or {}
            score = attrs.get("score")
            if score is not None:
                try:
                    score = float(score)
                except (TypeError, ValueError) as exc:
                    raise ParseError(f"score in {key!r} is not numeric") from exc
            annotations.append(PolygonAnnotation(image_id, tuple(zip(xs, ys)), score))
    if skipped or rejected:
        logger.warning("VIA parse: %d non-polygon regions skipped, %d short polygons rejected", skipped, rejected)
    return ViaParseResult(annotations, skipped, rejected)


def _num(v):
    return int(v) if float(v).is_integer() else float(v)


def serialize_via(annotations, image_ids=()):
    """Write annotations as a VIA image map; ``image_ids`` adds empty entries."""
    out = {}
    for image_id in image_ids:
        out.setdefault(image_id, {"filename": image_id, "size": -1, "regions": [], "file_attributes": {}})
    for ann in annotations:
        entry = out.setdefault(
            ann.image_id, {"filename": ann.image_id, "size": -1, "regions": [], "file_attributes": {}}
        )
        attrs = {} if ann.score is None else {"score": ann.score}
        entry["regions"].append(
            {
                "shape_attributes": {
                    "name": "polygon",
                    "all_points_x": [_num(x) for x, _ in ann.vertices],
                    "all_points_y": [_num(y) for _, y in ann.vertices],
                },
                "region_attributes": attrs,
            }
        )
    return json.dumps(out, indent=1)


def via_image_ids(document):
    """Image ids present in a VIA document, including those without regions."""
    data = json.loads(_decode(document))
    if isinstance(data, dict) and "_via_img_metadata" in data:
        data = data["_via_img_metadata"]
    return [str(entry.get("filename", key)) for key, entry in data.items()]


# --------------------------------------------------------------------------
# Rasterization


def _crossings(vertices, yc):
    x = vertices[:, 0]
    y = vertices[:, 1]
    xj, yj = np.roll(x, 1), np.roll(y, 1)
    hit = (y > yc) != (yj > yc)
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        xc = (xj - x) * (yc - y) / (yj - y) + x
    return np.sort(xc[hit])


def rasterize_polygon(poly, width, height):
    """Fill a polygon with the even-odd rule sampled at pixel centres.

    Pixel ``(x, y)`` is set when ``(x + 0.5, y + 0.5)`` is inside. Parts of
    the polygon outside the frame are simply not sampled.

    Raises
    ------
    EmptyMask
        If the polygon has zero area or lies entirely outside the frame.
    """
    if width <= 0 or height <= 0:
        raise ValueError("frame dimensions must be positive")
    if poly.area() == 0.0:
        raise EmptyMask("polygon has zero area")
    x1, y1, x2, y2 = poly.bbox
    if x2 <= 0 or y2 <= 0 or x1 >= width or y1 >= height:
        raise EmptyMask("polygon lies outside the frame")

    verts = np.asarray(poly.vertices, dtype=np.float64)
    bits = np.zeros((height, width), dtype=bool)
    centres = np.arange(width) + 0.5
    row_lo = max(0, int(math.floor(y1 - 0.5)))
    row_hi = min(height, int(math.ceil(y2 + 0.5)))
    for row in range(row_lo, row_hi):
        xs = _crossings(verts, row + 0.5)
        if len(xs) == 0:
            continue
        # crossings strictly right of each centre; odd count means inside
        right = len(xs) - np.searchsorted(xs, centres, side="right")
        bits[row] = (right % 2) == 1
    return BinaryMask(bits)


# --------------------------------------------------------------------------
# PGM / raw rasters

_PGM_TOKEN = re.compile(rb"(?:\s|#[^\n]*\n)*(\S+)")


def _pgm_header(data):
    if data[:2] != b"P5":
        raise FormatError("not a binary PGM (missing P5 magic)")
    pos = 2
    tokens = []
    for _ in range(3):
        m = _PGM_TOKEN.match(data, pos)
        if m is None:
            raise FormatError("truncated PGM header")
        try:
            tokens.append(int(m.group(1)))
        except ValueError as exc:
            raise FormatError(f"bad PGM header token {m.group(1)!r}") from exc
        pos = m.end()
    if pos >= len(data) or not data[pos : pos + 1].isspace():
        raise FormatError("PGM header must end with a single whitespace byte")
    return tokens[0], tokens[1], tokens[2], pos + 1


def read_pgm(data):
    """Decode a binary PGM (8- or 16-bit) into a 2-D array."""
    w, h, maxval, offset = _pgm_header(bytes(data))
    if not 0 < maxval <= 65535:
        raise FormatError(f"PGM maxval {maxval} out of range")
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    need = w * h * dtype.itemsize
    body = data[offset : offset + need]
    if len(body) != need:
        raise FormatError(f"PGM body has {len(body)} bytes, expected {need}")
    return np.frombuffer(body, dtype=dtype).reshape(h, w), maxval


def write_pgm(array, maxval=None):
    a = np.asarray(array)
    if a.ndim != 2:
        raise FormatError("PGM rasters must be 2-D")
    if maxval is None:
        maxval = 65535 if a.dtype.itemsize > 1 else 255
    h, w = a.shape
    header = f"P5\n{w} {h}\n{maxval}\n".encode("ascii")
    body = a.astype(">u2" if maxval > 255 else "u1").tobytes()
    return header + body


def load_depth(data, expected_width, expected_height, depth_scale=DEFAULT_DEPTH_SCALE):
    """Load a Z16 depth frame from PGM or raw little-endian bytes.

    Raises
    ------
    FormatError
        On size mismatch, odd raw byte count, or an 8-bit PGM.
    """
    data = bytes(data)
    if data[:2] == b"P5":
        values, maxval = read_pgm(data)
        if maxval <= 255:
            raise FormatError("depth PGM must use 16-bit samples")
        if values.shape != (expected_height, expected_width):
            raise FormatError(
                f"depth PGM is {values.shape[1]}x{values.shape[0]}, expected {expected_width}x{expected_height}"
            )
        return DepthFrame(values.astype(np.uint16), depth_scale)
    if len(data) % 2:
        raise FormatError("raw depth buffer has an odd byte count")
    if len(data) != expected_width * expected_height * 2:
        raise FormatError(
            f"raw depth buffer has {len(data)} bytes, expected {expected_width * expected_height * 2}"
        )
    values = np.frombuffer(data, dtype="<u2").reshape(expected_height, expected_width)
    return DepthFrame(values.astype(np.uint16), depth_scale)


def dump_depth_pgm(frame):
    return write_pgm(frame.values, 65535)


def dump_depth_raw(frame):
    return frame.values.astype("<u2").tobytes()


def load_mask_pgm(data):
    values, maxval = read_pgm(bytes(data))
    if maxval > 255:
        raise FormatError("mask PGM must use 8-bit samples")
    return BinaryMask(values > 0)


def dump_mask_pgm(mask):
    return write_pgm(np.where(mask.bits, 255, 0).astype(np.uint8), 255)


# --------------------------------------------------------------------------
# JSON configuration records


def _load_object(text, what):
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(what, f"malformed JSON: {exc.msg} at char {exc.pos}") from exc
    if not isinstance(data, dict):
        raise ConfigError(what, "must be a JSON object")
    return data


def _check_keys(data, required, optional, where=""):
    for key in data:
        if key not in required and key not in optional:
            raise ConfigError(where + key, "unknown key")
    for key in required:
        if key not in data:
            raise ConfigError(where + key, "missing")


def _number(data, key, where=""):
    v = data[key]
    if isinstance(v, bool) or not isinstance(v, numbers.Real):
        raise ConfigError(where + key, "must be a number")
    return v


def load_intrinsics(text):
    data = _load_object(text, "intrinsics")
    _check_keys(data, ("fx", "fy", "ppx", "ppy", "width", "height"), ("depth_scale",))
    values = {k: _number(data, k) for k in data}
    for k in ("width", "height"):
        if not float(values[k]).is_integer():
            raise ConfigError(k, "must be an integer")
        values[k] = int(values[k])
    return CameraIntrinsics(**values)


def load_manifest(text, base_dir=None):
    """Parse and validate a session manifest.

    When ``base_dir`` is given every file reference is checked for
    existence relative to it.
    """
    data = _load_object(text, "manifest")
    _check_keys(data, ("pond_id", "doc", "intrinsics", "frames"), ("hand_measurements",))
    pond_id = data["pond_id"]
    if not isinstance(pond_id, (str, int)) or isinstance(pond_id, bool) or str(pond_id) == "":
        raise ConfigError("pond_id", "must be a non-empty string")
    doc = data["doc"]
    if isinstance(doc, bool) or not isinstance(doc, int) or doc < 0:
        raise ConfigError("doc", "must be a non-negative integer")
    if not isinstance(data["intrinsics"], str):
        raise ConfigError("intrinsics", "must be a file reference")
    if not isinstance(data["frames"], list):
        raise ConfigError("frames", "must be a list")

    frames = []
    for i, entry in enumerate(data["frames"]):
        where = f"frames[{i}]."
        if not isinstance(entry, dict):
            raise ConfigError(f"frames[{i}]", "must be an object")
        _check_keys(entry, ("frame_id", "depth"), ("colour", "annotation"), where)
        fid = entry["frame_id"]
        if isinstance(fid, bool) or not isinstance(fid, int):
            raise ConfigError(where + "frame_id", "must be an integer")
        for key in ("depth", "colour", "annotation"):
            if entry.get(key) is not None and not isinstance(entry[key], str):
                raise ConfigError(where + key, "must be a file reference")
        frames.append(FrameRef(fid, entry["depth"], entry.get("colour"), entry.get("annotation")))
    ids = [f.frame_id for f in frames]
    if len(set(ids)) != len(ids):
        raise ConfigError("frames", "duplicate frame_id")
    if ids != sorted(ids):
        raise ConfigError("frames", "frame_ids must be in capture order")

    hand = data.get("hand_measurements", [])
    if not isinstance(hand, list):
        raise ConfigError("hand_measurements", "must be a list")
    for v in hand:
        if isinstance(v, bool) or not isinstance(v, numbers.Real) or not v > 0:
            raise ConfigError("hand_measurements", "lengths must be positive numbers")

    manifest = SessionManifest(
        str(pond_id), doc, tuple(frames), data["intrinsics"], tuple(float(v) for v in hand),
        None if base_dir is None else Path(base_dir),
    )
    if base_dir is not None:
        if not manifest.resolve(manifest.intrinsics).is_file():
            raise ConfigError("intrinsics", f"file not found: {manifest.intrinsics}")
        for i, f in enumerate(frames):
            for key in ("depth", "colour", "annotation"):
                ref = getattr(f, key)
                if ref is not None and not manifest.resolve(ref).is_file():
                    raise ConfigError(f"frames[{i}].{key}", f"file not found: {ref}")
    return manifest


def masks_from_annotations(annotations: Sequence[PolygonAnnotation], width, height):
    """Rasterize each annotation; degenerate polygons yield ``None``."""
    out = []
    for ann in annotations:
        try:
            out.append(rasterize_polygon(ann, width, height))
        except EmptyMask:
            logger.warning("skipping degenerate polygon in %s", ann.image_id)
            out.append(None)
    return out
