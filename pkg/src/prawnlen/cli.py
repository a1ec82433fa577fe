"""Command line front end: ``prawnlen {measure,track,eval,report,synth}``.

Exit codes: 0 success, 2 input error (bad session, config or spec),
3 empty result (nothing accepted, nothing to report).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .analytics import Measurement, read_measurements, render_report, write_measurements
from .errors import ConfigError, EmptyReport, PrawnlenError
from .evaluation import ScoredInstance, summarize
from .ingest import parse_via, rasterize_polygon
from .ranging import RangingConfig, measure
from .session import INSTANCE_FIELDS, fmt, load_frame, open_session, read_rows, write_rows, write_session
from .skeleton import build_graph, longest_path_centreline, skeletonize
from .synth import MotionScript, ScriptedBox, SeasonSpec, gen_motion, gen_season
from .tracking import Tracker, TrackerConfig, aggregate_lengths

logger = logging.getLogger("prawnlen")

EXIT_OK, EXIT_INPUT, EXIT_EMPTY = 0, 2, 3

# flag name -> (section, field)
_FLAT_KEYS = {
    "stride": ("ranging", "sample_stride"),
    "validity_threshold": ("ranging", "validity_threshold"),
    "iou_threshold": ("tracker", "iou_threshold"),
    "max_age": ("tracker", "max_age"),
}
_TOP_KEYS = {"jobs", "seed", "dump_skeleton", "bin_width_mm"}


class InputError(Exception):
    """Bad user input; reported with exit code 2."""


@dataclass(frozen=True)
class RunConfig:
    """Settings merged from a config file and command line flags."""

    ranging: RangingConfig = field(default_factory=RangingConfig)
    tracker: TrackerConfig = field(default_factory=TrackerConfig)
    jobs: int = 1
    seed: int | None = None
    dump_skeleton: int | None = None
    bin_width_mm: float = 5.0

    @classmethod
    def build(cls, file_data=None, flags=None):
        """Merge ``file_data`` (parsed JSON) with ``flags``; flags win.

        Raises
        ------
        ConfigError
            On unknown keys or values violating a constituent invariant.
        """
        sections = {"ranging": {}, "tracker": {}}
        top = {}

        def absorb(data, where):
            for key, value in data.items():
                if value is None:
                    continue
                if key in ("ranging", "tracker") and where == "file":
                    if not isinstance(value, dict):
                        raise ConfigError(key, "must be an object")
                    sections[key].update(value)
                elif key in _FLAT_KEYS:
                    sec, name = _FLAT_KEYS[key]
                    sections[sec][name] = value
                elif key in _TOP_KEYS:
                    top[key] = value
                else:
                    raise ConfigError(key, "unknown setting")

        if file_data is not None:
            if not isinstance(file_data, dict):
                raise ConfigError("config", "must be a JSON object")
            absorb(file_data, "file")
        absorb(flags or {}, "flags")
        try:
            ranging = RangingConfig.from_dict({**RangingConfig().to_dict(), **sections["ranging"]})
        except (TypeError, ValueError) as exc:
            raise ConfigError("ranging", str(exc)) from None
        tracker = TrackerConfig.from_dict({**TrackerConfig().to_dict(), **sections["tracker"]})
        jobs = top.get("jobs", 1)
        if isinstance(jobs, bool) or not isinstance(jobs, int) or jobs < 1:
            raise ConfigError("jobs", "must be a positive integer")
        seed = top.get("seed")
        if seed is not None and (isinstance(seed, bool) or not isinstance(seed, int) or seed < 0):
            raise ConfigError("seed", "must be a non-negative integer")
        dump = top.get("dump_skeleton")
        if dump is not None and (isinstance(dump, bool) or not isinstance(dump, int)):
            raise ConfigError("dump_skeleton", "must be a frame id")
        bw = top.get("bin_width_mm", 5.0)
        if isinstance(bw, bool) or not isinstance(bw, (int, float)) or not bw > 0:
            raise ConfigError("bin_width_mm", "must be positive")
        return cls(ranging, tracker, jobs, seed, dump, float(bw))


def load_config(args):
    data = None
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.is_file():
            raise ConfigError("config", f"file not found: {path}")
        try:
            data = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError("config", f"malformed JSON: {exc.msg}") from None
    flags = {k: getattr(args, k, None) for k in ("stride", "validity_threshold", "iou_threshold",
                                                 "max_age", "jobs", "seed", "dump_skeleton")}
    return RunConfig.build(data, flags)


# -- measure ------------------------------------------------------------------

def _measure_frame(root, index, ranging_dict):
    session = open_session(root)
    ref = session.manifest.frames[index]
    depth, masks = load_frame(session, ref)
    cfg = RangingConfig.from_dict(ranging_dict)
    rows = []
    for k, mask in enumerate(masks):
        if mask is None:
            rows.append((ref.frame_id, k, "Rejected", "EmptyMask", 0.0, 0, None, None))
            continue
        r = measure(mask, depth, session.intrinsics, cfg, frame_id=ref.frame_id, instance_id=k)
        box = mask.bbox() if mask.count else None
        rows.append((ref.frame_id, k, r.status.value, r.reason.value if r.reason else "",
                     r.validity_ratio, r.n_samples, r.length_mm, box))
    return rows


def _skeleton_svg(session, ref):
    """Masks, skeletons and centrelines of one frame as an SVG string."""
    K = session.intrinsics
    _, masks = load_frame(session, ref)
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{K.width}" height="{K.height}" '
             f'viewBox="0 0 {K.width} {K.height}">', f'<rect width="{K.width}" height="{K.height}" fill="#000"/>']
    for mask in masks:
        if mask is None or not mask.count:
            continue
        ys, xs = np.nonzero(mask.bits)
        parts += [f'<rect x="{x}" y="{y}" width="1" height="1" fill="#335"/>' for x, y in zip(xs, ys)]
        sk = skeletonize(mask)
        parts += [f'<rect x="{x}" y="{y}" width="1" height="1" fill="#ccc"/>' for x, y in sorted(sk.pixels)]
        line = longest_path_centreline(build_graph(sk))
        pts = " ".join(f"{x + 0.5},{y + 0.5}" for x, y in line.path)
        parts.append(f'<polyline points="{pts}" fill="none" stroke="#f33" stroke-width="0.6"/>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def cmd_measure(session_dir, config=RunConfig(), out_dir=None):
    """Measure every instance of a session; returns the exit code."""
    session = open_session(session_dir)
    out = Path(out_dir) if out_dir else session.root
    out.mkdir(parents=True, exist_ok=True)
    m = session.manifest
    jobs = [(str(session.root), i, config.ranging.to_dict()) for i in range(len(m.frames))]
    if config.jobs > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=config.jobs) as pool:
            per_frame = list(pool.map(_measure_frame, *zip(*jobs)))
    else:
        per_frame = [_measure_frame(*j) for j in jobs]

    rows, rejected, accepted = [], [], []
    for frame_rows in per_frame:
        for fid, k, status, reason, ratio, n, length_mm, box in frame_rows:
            b = box or ("", "", "", "")
            rows.append([session.root.name, fid, k, status, reason, fmt(ratio), fmt(length_mm, 1), n, *b])
            if status == "Accepted":
                accepted.append(Measurement(m.pond_id, m.doc, length_mm, "CV"))
            else:
                rejected.append([fid, k, reason, fmt(ratio), n])
    write_rows(out / "instances.csv", INSTANCE_FIELDS, rows)
    write_rows(out / "rejections.csv", ("frame_id", "instance_id", "reason", "validity_ratio", "n_samples"), rejected)
    hand = [Measurement(m.pond_id, m.doc, v, "FeedTraySample") for v in m.hand_measurements]
    (out / "measurements.csv").write_text(write_measurements(accepted + hand))

    if config.dump_skeleton is not None:
        refs = [f for f in m.frames if f.frame_id == config.dump_skeleton]
        if not refs:
            raise ConfigError("dump_skeleton", f"no frame {config.dump_skeleton} in the session")
        (out / f"skeleton_{config.dump_skeleton:06d}.svg").write_text(_skeleton_svg(session, refs[0]))

    print(f"measured {len(rows)} instances: {len(accepted)} accepted, {len(rejected)} rejected")
    return EXIT_OK if accepted else EXIT_EMPTY


# -- track --------------------------------------------------------------------

def _detections_from_rows(rows, with_status):
    frames = {}
    for line, r in enumerate(rows, start=2):
        try:
            fid = int(r["frame_id"])
            if r.get("x1", "") == "":
                frames.setdefault(fid, [])
                continue
            box = tuple(float(r[k]) for k in ("x1", "y1", "x2", "y2"))
            length = r.get("length_mm", "")
            ok = (r.get("status") == "Accepted") if with_status else True
            value = float(length) / 1000.0 if ok and length not in ("", None) else None
        except (KeyError, ValueError) as exc:
            raise InputError(f"detections line {line}: {exc}") from None
        frames.setdefault(fid, []).append((box, value))
    return frames


def _session_detections(session):
    frames = {}
    for ref in session.manifest.frames:
        _, masks = load_frame(session, ref)
        frames[ref.frame_id] = [(m.bbox(), None) for m in masks if m is not None and m.count]
    return frames


def cmd_track(source, config=RunConfig(), out_dir=None, detections=None):
    """Track detections of a session (or a detections CSV); returns the exit code."""
    pond, doc, name = None, None, Path(source).name
    if detections is not None:
        frames = _detections_from_rows(read_rows(detections), with_status=False)
        out = Path(out_dir) if out_dir else Path(detections).parent
    else:
        session = open_session(source)
        pond, doc = session.manifest.pond_id, session.manifest.doc
        out = Path(out_dir) if out_dir else session.root
        inst = out / "instances.csv"
        if inst.is_file():
            frames = _detections_from_rows(read_rows(inst), with_status=True)
        else:
            frames = _session_detections(session)
    out.mkdir(parents=True, exist_ok=True)

    tracker = Tracker(config.tracker)
    for fid in sorted(frames):
        tracker.step(fid, frames[fid])
    rows, tracked = [], []
    for t in tracker.all_tracks():
        robust = aggregate_lengths(t)
        rows.append([name, t.id, t.first_frame, t.last_frame, t.n_detections, len(t.lengths),
                     fmt(None if robust is None else robust * 1000.0, 3)])
        if robust is not None and pond is not None:
            tracked.append(Measurement(pond, doc, robust * 1000.0, "CV_tracked"))
    write_rows(out / "tracks.csv", ("session", "track_id", "first_frame", "last_frame", "n_detections",
                                    "n_accepted_lengths", "robust_length_mm"), rows)
    if pond is not None:
        (out / "tracked_measurements.csv").write_text(write_measurements(tracked))
    print(f"{len(rows)} tracks, {len(tracked)} with a robust length")
    return EXIT_OK


# -- eval ---------------------------------------------------------------------

def _instances(path, kind, width, height, scored):
    anns = parse_via(Path(path).read_bytes()).annotations
    out = []
    for a in anns:
        if scored and a.score is None:
            raise InputError(f"{path}: prediction for {a.image_id} has no score")
        if kind == "bbox":
            x1, y1, x2, y2 = a.bbox
            region = (x1, y1, x2, y2)
        else:
            region = rasterize_polygon(a, width, height).bits
        out.append(ScoredInstance(a.image_id, region, a.score if scored else None))
    return out


def cmd_eval(gt_path, pred_path, iou_type="segm", width=1280, height=720, out_csv=None):
    gts = _instances(gt_path, iou_type, width, height, scored=False)
    preds = _instances(pred_path, iou_type, width, height, scored=True)
    s = summarize(gts, preds)
    print(f"mAP={s.mAP:.6f} AP50={s.ap50:.6f} mAR={s.mAR:.6f}")
    if out_csv:
        write_rows(out_csv, ("iou_threshold", "ap", "recall", "tp", "fp", "fn"),
                   [[f"{r.iou_threshold:.2f}", fmt(r.ap, 6), fmt(r.recall, 6), r.tp, r.fp, r.fn]
                    for r in s.per_threshold])
    return EXIT_OK


# -- report -------------------------------------------------------------------

def _gather(inputs):
    ms, rejections = [], {}
    for item in inputs:
        p = Path(item)
        if p.is_dir():
            session = open_session(p)
            pond = session.manifest.pond_id
            for name in ("measurements.csv", "tracked_measurements.csv"):
                if (p / name).is_file():
                    ms += read_measurements((p / name).read_text())
            if (p / "instances.csv").is_file():
                inst = read_rows(p / "instances.csv")
                rej, tot = rejections.get(pond, (0, 0))
                rejections[pond] = (rej + sum(r["status"] != "Accepted" for r in inst), tot + len(inst))
        elif p.is_file():
            ms += read_measurements(p.read_text())
        else:
            raise InputError(f"no such file or session: {p}")
    return ms, rejections


def cmd_report(inputs, out_dir, config=RunConfig()):
    ms, rejections = _gather(inputs)
    try:
        bundle = render_report(ms, rejections, bin_width_mm=config.bin_width_mm)
    except EmptyReport as exc:
        print(f"prawnlen: {exc}", file=sys.stderr)
        return EXIT_EMPTY
    bundle.write(out_dir)
    print(bundle.trend_csv, end="")
    return EXIT_OK


# -- synth --------------------------------------------------------------------

def cmd_synth(spec_path, out_dir, config=RunConfig()):
    """Generate a season of sessions or a motion script from a JSON spec."""
    try:
        spec = json.loads(Path(spec_path).read_text())
    except FileNotFoundError:
        raise InputError(f"spec file not found: {spec_path}") from None
    except json.JSONDecodeError as exc:
        raise InputError(f"malformed spec JSON: {exc.msg}") from None
    if not isinstance(spec, dict):
        raise InputError("spec must be a JSON object")
    spec = dict(spec)
    kind = spec.pop("kind", "season")
    if config.seed is not None:
        spec["seed"] = config.seed
    out = Path(out_dir)
    if kind == "season":
        season = SeasonSpec.from_dict(spec)
        out.mkdir(parents=True, exist_ok=True)
        names = []
        for sess in gen_season(season):
            name = f"{sess.pond_id}_doc{sess.doc:03d}"
            write_session(sess, out / name)
            names.append(name)
        (out / "season.json").write_text(json.dumps({"sessions": names}, indent=1) + "\n")
        print(f"wrote {len(names)} sessions to {out}")
        return EXIT_OK
    if kind == "motion":
        boxes = spec.pop("boxes", [])
        try:
            script = MotionScript(boxes=tuple(
                ScriptedBox(int(b["gt_id"]), tuple(b["box"]), tuple(b.get("velocity", (0.0, 0.0))),
                            tuple(tuple(j) for j in b.get("jumps", ())),
                            tuple(tuple(v) for v in b.get("visible", ()))) for b in boxes), **spec)
        except (KeyError, TypeError) as exc:
            raise InputError(f"bad motion spec: {exc}") from None
        frames = gen_motion(script)
        out.mkdir(parents=True, exist_ok=True)
        rows = []
        for f, (dets, ids) in enumerate(zip(frames.detections, frames.gt_ids)):
            rows += [[f, gid, *(f"{v:.3f}" for v in d)] for d, gid in zip(dets, ids)]
        write_rows(out / "detections.csv", ("frame_id", "gt_id", "x1", "y1", "x2", "y2"), rows)
        print(f"wrote {len(rows)} detections over {script.n_frames} frames to {out}")
        return EXIT_OK
    raise InputError(f"unknown spec kind {kind!r}")


# -- entry point --------------------------------------------------------------

def build_parser():
    p = argparse.ArgumentParser(prog="prawnlen", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON file mirroring the flags")
    common.add_argument("--stride", type=int, help="pixels between centreline depth samples")
    common.add_argument("--validity-threshold", type=float, help="minimum fraction of usable depth samples")
    common.add_argument("--iou-threshold", type=float, help="minimum IoU for a track match")
    common.add_argument("--max-age", type=int, help="frames a track survives unmatched")
    common.add_argument("--jobs", type=int, help="worker processes for per-frame work")
    common.add_argument("--seed", type=int, help="seed for every random draw")
    common.add_argument("--dump-skeleton", type=int, metavar="FRAME", help="write a skeleton SVG for FRAME")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("measure", parents=[common], help="measure every instance of a session")
    s.add_argument("session")
    s.add_argument("--out", help="output directory (default: the session)")

    s = sub.add_parser("track", parents=[common], help="track detections and aggregate lengths")
    s.add_argument("session", nargs="?", help="session directory")
    s.add_argument("--detections", help="CSV of frame_id,x1,y1,x2,y2[,length_mm] instead of a session")
    s.add_argument("--out", help="output directory")

    s = sub.add_parser("eval", parents=[common], help="score predictions against ground truth")
    s.add_argument("gt")
    s.add_argument("pred")
    s.add_argument("--iou-type", choices=("segm", "bbox"), default="segm")
    s.add_argument("--width", type=int, default=1280)
    s.add_argument("--height", type=int, default=720)
    s.add_argument("--out", help="per-threshold CSV")

    s = sub.add_parser("report", parents=[common], help="render the growth report")
    s.add_argument("inputs", nargs="+", help="measurement CSVs or session directories")
    s.add_argument("--out", required=True, help="output directory for the bundle")

    s = sub.add_parser("synth", parents=[common], help="generate synthetic sessions")
    s.add_argument("spec")
    s.add_argument("out")
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        config = load_config(args)
        if args.command == "measure":
            return cmd_measure(args.session, config, args.out)
        if args.command == "track":
            if (args.session is None) == (args.detections is None):
                raise InputError("give either a session or --detections")
            return cmd_track(args.session or args.detections, config, args.out, args.detections)
        if args.command == "eval":
            return cmd_eval(args.gt, args.pred, args.iou_type, args.width, args.height, args.out)
        if args.command == "report":
            return cmd_report(args.inputs, args.out, config)
        return cmd_synth(args.spec, args.out, config)
    except (InputError, PrawnlenError, OSError) as exc:
        print(f"prawnlen: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
