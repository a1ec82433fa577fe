"""Session directories on disk.

A session is one tray check (one pond on one day of culture)::

    manifest.json          pond_id, doc, frame list, hand measurements
    intrinsics.json        camera model
    frames/000000_depth.pgm
    annotations/000000.json   VIA polygons (or a .pgm instance mask)
    ground_truth.csv       synthetic sessions only

Outputs of later stages (instances.csv, measurements.csv, tracks.csv,
...) are written next to the manifest unless redirected.
"""

from __future__ import annotations

import csv
import io
import json
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .errors import ConfigError, FormatError
from .ingest import (
    dump_depth_pgm,
    load_depth,
    load_intrinsics,
    load_manifest,
    load_mask_pgm,
    masks_from_annotations,
    parse_via,
    serialize_via,
)

MANIFEST = "manifest.json"
INSTANCE_FIELDS = ("session", "frame_id", "instance_id", "status", "reason", "validity_ratio",
                   "length_mm", "n_samples", "x1", "y1", "x2", "y2")


def write_session(session, out_dir):
    """Write a :class:`~prawnlen.synth.SyntheticSession` as a session directory."""
    out = Path(out_dir)
    (out / "frames").mkdir(parents=True, exist_ok=True)
    (out / "annotations").mkdir(exist_ok=True)
    frames = []
    for fr in session.frames:
        depth_ref = f"frames/{fr.frame_id:06d}_depth.pgm"
        ann_ref = f"annotations/{fr.frame_id:06d}.json"
        (out / depth_ref).write_bytes(dump_depth_pgm(fr.depth))
        image_id = fr.annotations[0].image_id if fr.annotations else f"{fr.frame_id:06d}.png"
        (out / ann_ref).write_text(serialize_via(fr.annotations, [image_id]) + "\n")
        frames.append({"frame_id": fr.frame_id, "depth": depth_ref, "annotation": ann_ref})
    (out / "intrinsics.json").write_text(json.dumps(session.intrinsics.to_dict(), indent=1) + "\n")
    manifest = {"pond_id": session.pond_id, "doc": session.doc, "intrinsics": "intrinsics.json",
                "frames": frames}
    if session.hand_measurements_mm:
        manifest["hand_measurements"] = list(session.hand_measurements_mm)
    (out / MANIFEST).write_text(json.dumps(manifest, indent=1) + "\n")
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["frame_id", "instance", "prawn_id", "true_length_mm"])
    for fid, inst, pid, length in session.truth:
        w.writerow([fid, inst, pid, f"{length:.4f}"])
    (out / "ground_truth.csv").write_text(buf.getvalue())
    return out


class Session(NamedTuple):
    manifest: object
    intrinsics: object
    root: Path


def open_session(path):
    """Load and validate the manifest and intrinsics of a session directory.

    Raises
    ------
    ConfigError
        If the manifest or intrinsics are missing or invalid.
    """
    root = Path(path)
    mpath = root / MANIFEST
    if not mpath.is_file():
        raise ConfigError("manifest", f"no {MANIFEST} in {root}")
    manifest = load_manifest(mpath.read_text(), base_dir=root)
    K = load_intrinsics(manifest.resolve(manifest.intrinsics).read_text())
    return Session(manifest, K, root)


def load_frame(session, ref):
    """Depth frame and instance masks for one frame reference.

    Masks that rasterize to nothing come back as ``None``.
    """
    m, K = session.manifest, session.intrinsics
    depth = load_depth(m.resolve(ref.depth).read_bytes(), K.width, K.height, K.depth_scale)
    if ref.annotation is None:
        return depth, []
    path = m.resolve(ref.annotation)
    if path.suffix.lower() == ".pgm":
        mask = load_mask_pgm(path.read_bytes())
        if mask.bits.shape != (K.height, K.width):
            raise FormatError(f"{path.name}: mask size does not match the intrinsics")
        return depth, [mask]
    anns = parse_via(path.read_bytes()).annotations
    return depth, masks_from_annotations(anns, K.width, K.height)


def write_rows(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def read_rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def fmt(x, nd=4):
    if x is None or (isinstance(x, float) and not np.isfinite(x)):
        return ""
    return f"{x:.{nd}f}"
