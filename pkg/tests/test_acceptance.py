"""Acceptance suite: every criterion at its stated tolerance.

Each test prints one ``PASS``/``FAIL`` line (visible with ``pytest -v``)
before asserting, so a run documents the measured values either way.
"""

import itertools
import json
import time

import numpy as np
import pytest

from conftest import random_blob
from oracles import assignment_bruteforce, reference_summary, zhang_suen_reference
from prawnlen import cli
from prawnlen.analytics import DailySummary, Measurement, render_report, summarize_by_doc, trend_from_summaries
from prawnlen.evaluation import ScoredInstance, summarize
from prawnlen.ingest import CameraIntrinsics
from prawnlen.ranging import Reason, deproject, measure, polyline_length, project
from prawnlen.session import read_rows
from prawnlen.skeleton import component_count, thin
from prawnlen.synth import MotionScript, ScriptedBox, SceneSpec, gen_motion, gen_scene, random_prawn, rng_for
from prawnlen.tracking import Tracker, optimal_assignment

K_HD = CameraIntrinsics(920.0, 920.0, 640.0, 360.0, 1280, 720)


@pytest.fixture
def report(capsys):
    def emit(criterion, ok, detail):
        with capsys.disabled():
            print(f"\n{'PASS' if ok else 'FAIL'} criterion {criterion}: {detail}")
        return ok
    return emit


def _prawn_scenes(seed, n, hole_rate=0.0):
    """Seeded single-prawn scenes: alternating straight and bent, 60-200 mm at 0.3-1.0 m."""
    rng = rng_for(seed)
    for i in range(n):
        length, depth = rng.uniform(0.06, 0.20), rng.uniform(0.3, 1.0)
        p = random_prawn(rng, K_HD, length, depth, bend=0.0 if i % 2 == 0 else 0.25)
        yield gen_scene(SceneSpec(seed=i, intrinsics=K_HD, prawns=(p,), hole_rate=hole_rate))


# 1 ------------------------------------------------------------------------------

def test_criterion_1_length_accuracy(report):
    t0 = time.perf_counter()
    errors, accepted = [], 0
    for sc in _prawn_scenes(2024, 200):
        r = measure(sc.masks[0], sc.depth, K_HD)
        if r.accepted:
            accepted += 1
            errors.append((r.length_m - sc.lengths_m[0]) / sc.lengths_m[0])
    elapsed = time.perf_counter() - t0
    e = np.array(errors)
    rate, worst, bias = accepted / 200, float(np.abs(e).max()), float(e.mean())
    ok = rate >= 0.95 and worst <= 0.05 and -0.05 <= bias <= 0.02 and elapsed < 30
    report(1, ok, f"accepted {rate:.1%}, max |error| {worst:.2%}, bias {bias:+.2%}, {elapsed:.1f} s")
    assert ok


# 2 ------------------------------------------------------------------------------

def test_criterion_2_validity_gate(report):
    t0 = time.perf_counter()
    heavy = [measure(sc.masks[0], sc.depth, K_HD) for sc in _prawn_scenes(77, 30, hole_rate=0.10)]
    light = [measure(sc.masks[0], sc.depth, K_HD) for sc in _prawn_scenes(78, 30, hole_rate=0.02)]
    elapsed = time.perf_counter() - t0
    low = sum(r.reason is Reason.LOW_VALIDITY for r in heavy) / len(heavy)
    acc = sum(r.accepted for r in light) / len(light)
    ok = low == 1.0 and acc >= 0.90 and elapsed < 10
    report(2, ok, f"holes 0.10 -> {low:.0%} LowValidity, holes 0.02 -> {acc:.0%} accepted, {elapsed:.1f} s")
    assert ok


# 3 ------------------------------------------------------------------------------

def test_criterion_3_skeleton_properties(report):
    t0 = time.perf_counter()
    rng = np.random.default_rng(3)
    blobs = [random_blob(rng, 64) for _ in range(1000)]
    bad = {"idempotence": 0, "subset": 0, "connectivity": 0, "oracle": 0}
    for k, b in enumerate(blobs):
        sk = thin(b)
        bad["subset"] += bool((sk & ~b).any())
        bad["idempotence"] += not np.array_equal(thin(sk), sk)
        bad["connectivity"] += component_count(sk) != component_count(b)
        if k < 100:
            bad["oracle"] += not np.array_equal(sk, np.array(zhang_suen_reference(b.tolist()), dtype=bool))
    elapsed = time.perf_counter() - t0
    ok = not any(bad.values()) and elapsed < 60
    report(3, ok, f"violations {bad} over 1000 blobs (oracle on 100), {elapsed:.1f} s")
    assert ok


# 4 ------------------------------------------------------------------------------

def test_criterion_4_geometry(report):
    rng = np.random.default_rng(4)
    n = 100_000
    u, v = rng.uniform(0, K_HD.width, n), rng.uniform(0, K_HD.height, n)
    z = rng.uniform(0.1, 3.0, n)
    xyz = deproject(K_HD, u, v, z)
    uu, vv = project(K_HD, xyz[:, 0], xyz[:, 1], xyz[:, 2])
    round_trip = float(max(np.abs(uu - u).max(), np.abs(vv - v).max(), np.abs(xyz[:, 2] - z).max()))

    rigid = 0.0
    for _ in range(1000):
        pts = rng.normal(size=(int(rng.integers(2, 40)), 3))
        q, r = np.linalg.qr(rng.normal(size=(3, 3)))
        q *= np.sign(np.diag(r))
        moved = pts @ q.T + rng.normal(scale=10, size=3)
        a = polyline_length(pts)
        rigid = max(rigid, abs(polyline_length(moved) - a) / a)

    linear = 0.0
    for _ in range(1000):
        m = int(rng.integers(2, 40))
        pu, pv = rng.uniform(0, K_HD.width, m), rng.uniform(0, K_HD.height, m)
        zz, c = rng.uniform(0.3, 1.0), rng.uniform(0.2, 5.0)
        base = polyline_length(deproject(K_HD, pu, pv, np.full(m, zz)))
        scaled = polyline_length(deproject(K_HD, pu, pv, np.full(m, c * zz)))
        linear = max(linear, abs(scaled - c * base) / (c * base))

    ok = round_trip <= 1e-9 and rigid <= 1e-9 and linear <= 1e-6
    report(4, ok, f"round trip {round_trip:.1e}, rigid {rigid:.1e} rel, depth linearity {linear:.1e} rel")
    assert ok


# 5 ------------------------------------------------------------------------------

def _id_switches(frames):
    tr = Tracker()
    last, switches, ids = {}, 0, []
    for f, (dets, gts) in enumerate(zip(frames.detections, frames.gt_ids)):
        out = {tb.detection_index: tb.track_id for tb in tr.step(f, dets)}
        row = []
        for j, g in enumerate(gts):
            if g in last and last[g] != out[j]:
                switches += 1
            last[g] = out[j]
            row.append(out[j])
        ids.append(row)
    return switches, ids


def test_criterion_5_tracking(report):
    t0 = time.perf_counter()
    # two rows of five, each row drifting at its own velocity
    boxes = tuple(ScriptedBox(g, (60 + 110 * (g % 5), 40 + 200 * (g // 5), 120 + 110 * (g % 5), 100 + 200 * (g // 5)),
                              (-0.7, 1.2) if g // 5 else (1.5, 0.8)) for g in range(10))
    steady, _ = _id_switches(gen_motion(MotionScript(0, 50, 800, 600, boxes)))

    rng = np.random.default_rng(5)
    worst = 0.0
    for _ in range(10_000):
        cost = rng.random((int(rng.integers(1, 7)), int(rng.integers(1, 7))))
        got = sum(cost[i, j] for i, j in optimal_assignment(cost))
        worst = max(worst, abs(got - assignment_bruteforce(cost.tolist())))

    jump = MotionScript(0, 20, 640, 480, (ScriptedBox(1, (50, 50, 90, 80), (2, 0), jumps=((10, 300, 200),)),))
    jumped, ids = _id_switches(gen_motion(jump))
    elapsed = time.perf_counter() - t0
    ok = steady == 0 and worst <= 1e-12 and jumped == 1 and ids[9] != ids[10] and elapsed < 30
    report(5, ok, f"{steady} switches over 50 frames, assignment gap {worst:.1e} on 1e4 matrices, "
                  f"jump script {jumped} switch, {elapsed:.1f} s")
    assert ok


# 6 ------------------------------------------------------------------------------

def _fixture(rng, kind):
    def region():
        x1, y1 = rng.integers(0, 14, 2)
        x2, y2 = x1 + rng.integers(1, 16 - x1), y1 + rng.integers(1, 16 - y1)
        if kind == "box":
            return (float(x1), float(y1), float(x2), float(y2))
        m = np.zeros((16, 16), dtype=bool)
        m[y1:y2, x1:x2] = True
        m &= rng.random((16, 16)) < 0.9
        m[y1, x1] = True
        return m.tolist()

    gts, preds = [], []
    for img in range(int(rng.integers(1, 6))):
        n_gt = int(rng.integers(0, 7))
        gts += [(img, region()) for _ in range(n_gt)]
        preds += [(img, region(), float(rng.integers(1, 6)) / 5) for _ in range(int(rng.integers(0, 7 - n_gt)))]
    return gts, preds


def test_criterion_6_evaluation(report):
    rng = np.random.default_rng(6)
    worst = 0.0
    for k in range(20):
        kind = "box" if k % 2 == 0 else "mask"
        gts, preds = _fixture(rng, kind)
        conv = (lambda r: r) if kind == "box" else (lambda r: np.array(r, dtype=bool))
        g = [ScoredInstance(i, conv(r)) for i, r in gts]
        p = [ScoredInstance(i, conv(r), s) for i, r, s in preds]
        got = summarize(g, p).as_tuple()
        worst = max(worst, max(abs(a - b) for a, b in zip(got, reference_summary(gts, preds))))
    gts, _ = _fixture(rng, "box")
    while not gts:
        gts, _ = _fixture(rng, "box")
    g = [ScoredInstance(i, r) for i, r in gts]
    perfect = summarize(g, [ScoredInstance(x.image_id, x.region, 1.0) for x in g])
    ok = worst <= 1e-9 and perfect.mAP == 1.0 and perfect.mAR == 1.0
    report(6, ok, f"max deviation from reference {worst:.1e} over 20 fixtures, perfect -> "
                  f"mAP {perfect.mAP}, mAR {perfect.mAR}")
    assert ok


# 7 ------------------------------------------------------------------------------

def test_criterion_7_analytics(report):
    rng = np.random.default_rng(2024)
    ms = [Measurement("P1", d, 60.0 + 0.9 * d + rng.normal(0, 2.0)) for d in range(1, 41) for _ in range(30)]
    slope = trend_from_summaries(summarize_by_doc(ms)).slope

    disorder = 0
    for _ in range(10_000):
        vals = rng.lognormal(4, 0.5, int(rng.integers(1, 40)))
        s = DailySummary.of("P", "CV", 0, vals)
        disorder += not (s.min <= s.whisker_lo <= s.q1 <= s.median <= s.q3 <= s.whisker_hi <= s.max)

    a = render_report(ms, {"P1": (5, 100)})
    b = render_report(list(ms), {"P1": (5, 100)})
    identical = a.svg.encode() == b.svg.encode() and a.summaries_csv == b.summaries_csv and a.trend_csv == b.trend_csv
    ok = abs(slope - 0.9) <= 0.15 and disorder == 0 and identical
    report(7, ok, f"slope {slope:.4f} mm/day (target 0.9 +/- 0.15), {disorder} ordering violations in 1e4, "
                  f"report identical: {identical}")
    assert ok


# 8 ------------------------------------------------------------------------------

def test_criterion_8_end_to_end(report, tmp_path, capsys):
    t0 = time.perf_counter()
    spec = tmp_path / "season.json"
    spec.write_text(json.dumps({"seed": 8}))
    out = tmp_path / "season"
    codes = [cli.cmd_synth(spec, out)]
    sessions = [out / n for n in json.loads((out / "season.json").read_text())["sessions"]]
    for s in sessions:
        codes.append(cli.cmd_measure(s))
        codes.append(cli.cmd_track(s))
    codes.append(cli.cmd_report(sessions, tmp_path / "report"))
    elapsed = time.perf_counter() - t0
    capsys.readouterr()
    trend = read_rows(tmp_path / "report" / "trend.csv")
    slopes = {(r["pond_id"], r["source"]): float(r["slope_mm_per_day"]) for r in trend}
    ponds = sorted({p for p, _ in slopes})
    cv = {p: slopes[p, "CV"] for p in ponds}
    ok = (all(c == 0 for c in codes) and len(sessions) == 32 and len(ponds) == 4
          and all(v > 0 for v in cv.values()) and elapsed < 120)
    detail = ", ".join(f"{p} {v:.3f}" for p, v in cv.items())
    report(8, ok, f"{len(sessions)} sessions in {elapsed:.1f} s, CV slopes mm/day: {detail}")
    assert ok
