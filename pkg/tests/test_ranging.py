import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from oracles import grid_best_sse
from prawnlen.errors import InvalidDepth, TooSparse
from prawnlen.ingest import CameraIntrinsics, DepthFrame
from prawnlen.ranging import (
    DepthSamples,
    LengthEstimator,
    LengthResult,
    Polyline3D,
    Reason,
    RangingConfig,
    Status,
    deproject,
    eval_poly2,
    fit_poly2,
    interpolate_missing,
    measure,
    polyline_length,
    project,
    reject_inconsistent,
    replace_z_outliers,
    sample_depth_along,
    smooth_centreline,
    smooth_pixels,
)
from prawnlen.skeleton import Centreline
from prawnlen.synth import SceneSpec, SyntheticPrawn, gen_scene

K = CameraIntrinsics(600.0, 600.0, 320.0, 240.0, 640, 480)
NAN = float("nan")


def _samples(xs, ys, z):
    pix = np.column_stack([xs, ys]).astype(np.int64)
    t = np.linspace(0, 1, len(xs))
    return DepthSamples(pix, t, np.asarray(z, dtype=np.float64))


def _rotation(rng):
    q, r = np.linalg.qr(rng.standard_normal((3, 3)))
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


# -- config ---------------------------------------------------------------------

@pytest.mark.parametrize("kw", [{"validity_threshold": 0.0}, {"validity_threshold": 1.5},
                                {"sample_stride": 0}, {"min_depth_m": 2.0, "max_depth_m": 1.0}])
def test_config_invariants(kw):
    with pytest.raises(ValueError):
        RangingConfig(**kw)


def test_config_from_dict_rejects_unknown():
    with pytest.raises(ValueError):
        RangingConfig.from_dict({"stride": 2})
    assert RangingConfig.from_dict({"sample_stride": 2}).sample_stride == 2


def test_accepted_result_needs_length():
    with pytest.raises(ValueError):
        LengthResult(Status.ACCEPTED, 1.0, 10)


# -- de-projection ----------------------------------------------------------------

def test_principal_point_deprojects_to_axis():
    assert deproject(K, K.ppx, K.ppy, 0.5) == (0.0, 0.0, 0.5)


def test_one_focal_length_right_is_one_unit():
    assert deproject(K, K.ppx + K.fx, K.ppy, 1.0) == pytest.approx((1.0, 0.0, 1.0), abs=1e-12)


@pytest.mark.parametrize("z", [0.0, -0.3])
def test_non_positive_depth_raises(z):
    with pytest.raises(InvalidDepth):
        deproject(K, 10, 10, z)


@given(st.floats(0, 640), st.floats(0, 480), st.floats(0.1, 3.0))
def test_project_inverts_deproject(u, v, z):
    x, y, zz = deproject(K, u, v, z)
    uu, vv = project(K, x, y, zz)
    assert uu == pytest.approx(u, abs=1e-9) and vv == pytest.approx(v, abs=1e-9)


# -- sampling -------------------------------------------------------------------

def test_stride_three_on_ten_pixels():
    line = Centreline([(x, 5) for x in range(10)])
    depth = DepthFrame(np.full((20, 20), 500, dtype=np.uint16))
    s = sample_depth_along(line, depth, RangingConfig(sample_stride=3))
    assert s.pixels[:, 0].tolist() == [0, 3, 6, 9]
    np.testing.assert_allclose(s.z, 0.5)


def test_last_pixel_is_always_sampled():
    line = Centreline([(x, 5) for x in range(11)])
    depth = DepthFrame(np.full((20, 20), 500, dtype=np.uint16))
    s = sample_depth_along(line, depth, RangingConfig(sample_stride=3))
    assert s.pixels[:, 0].tolist() == [0, 3, 6, 9, 10]


def test_zero_and_implausible_depth_are_missing():
    values = np.full((20, 20), 500, dtype=np.uint16)
    values[5, 3] = 0
    values[5, 6] = 5000
    s = sample_depth_along(Centreline([(x, 5) for x in range(10)]), DepthFrame(values))
    assert np.isnan(s.z).tolist() == [False, True, True, False]


# -- inconsistency screen ---------------------------------------------------------

def test_collinear_samples_are_unchanged():
    s = _samples(np.arange(0, 33, 3) + 100, np.full(11, 200), np.full(11, 0.5))
    np.testing.assert_array_equal(reject_inconsistent(s, K).z, s.z)


def test_displaced_sample_is_marked_missing():
    xs = np.arange(0, 33, 3) + 100
    xs[5] += 10
    s = _samples(xs, np.full(11, 200), np.full(11, 0.5))
    # brute-force first pass: the displaced sample scores highest, far beyond 5
    x3 = (xs + 0.5 - K.ppx) * 0.5 / K.fx
    res = np.array([x3[j] - (x3[j - 1] + x3[j + 1]) / 2 for j in range(1, 10)])
    floor = 0.5 / K.fx
    mad = max(np.median(np.abs(res - np.median(res))), floor)
    assert np.argmax(np.abs(res - np.median(res)) / mad) + 1 == 5
    assert np.abs(res[4] - np.median(res)) / mad >= 10 * 0.5 - 1e-9
    out = reject_inconsistent(s, K)
    assert np.flatnonzero(np.isnan(out.z)).tolist() == [5]


def test_all_missing_is_unchanged():
    s = _samples(np.arange(5), np.zeros(5), np.full(5, NAN))
    assert np.isnan(reject_inconsistent(s, K).z).all()


# -- outliers, gaps, fits -----------------------------------------------------------

def test_constant_depths_are_unchanged():
    np.testing.assert_array_equal(replace_z_outliers([0.5] * 4), [0.5] * 4)


def test_isolated_spike_is_replaced():
    z = [0.50, 0.51, 0.50, 2.50, 0.50]
    # brute force: the MAD is 0, so the scaled mean absolute deviation is used
    dev = [abs(v - 0.5) for v in z]
    score = [d / (1.253314 * (sum(dev) / 5)) for d in dev]
    assert [s > 3.5 for s in score] == [False, False, False, True, False]
    out = replace_z_outliers(z)
    assert np.isnan(out).tolist() == [False, False, False, True, False]


def test_empty_outlier_input():
    assert replace_z_outliers([]).size == 0


def test_modified_z_score_with_positive_mad():
    z = np.array([1.00, 1.01, 0.99, 1.02, 0.98, 1.00, 1.60])
    med = np.median(z)
    mad = np.median(np.abs(z - med))
    flagged = 0.6745 * np.abs(z - med) / mad > 3.5
    np.testing.assert_array_equal(np.isnan(replace_z_outliers(z)), flagged)


def test_interior_gaps_are_linear():
    np.testing.assert_allclose(interpolate_missing([1.0, NAN, NAN, 4.0]).values, [1, 2, 3, 4])


def test_no_gaps_is_identity():
    out = interpolate_missing([0.4, 0.5, 0.6])
    np.testing.assert_array_equal(out.values, [0.4, 0.5, 0.6])
    assert (out.start, out.stop) == (0, 3)


def test_edges_are_trimmed():
    out = interpolate_missing([NAN, 1.0, NAN, 2.0, NAN])
    np.testing.assert_allclose(out.values, [1.0, 1.5, 2.0])
    assert (out.start, out.stop) == (1, 4)


def test_too_few_values_to_interpolate():
    with pytest.raises(TooSparse):
        interpolate_missing([NAN, 1.0, NAN])


def test_interpolation_follows_parameter():
    out = interpolate_missing([0.0, NAN, 3.0], ts=[0.0, 0.25, 1.0])
    np.testing.assert_allclose(out.values, [0.0, 0.75, 3.0])


def test_exact_parabola():
    t = np.linspace(-1, 1, 9)
    coef = fit_poly2(t, t ** 2)
    np.testing.assert_allclose(coef, [0, 0, 1], atol=1e-9)
    assert np.sum((eval_poly2(coef, t) - t ** 2) ** 2) < 1e-9


def test_constant_fit():
    np.testing.assert_allclose(fit_poly2([0, 1, 2, 3], [4.0] * 4), [4, 0, 0], atol=1e-12)


def test_fit_needs_three_points():
    with pytest.raises(TooSparse):
        fit_poly2([0, 1], [0, 1])


def test_fit_beats_grid_search():
    rng = np.random.default_rng(3)
    t = np.linspace(0, 1, 12)
    v = 0.3 + 0.8 * t - 0.5 * t ** 2 + rng.normal(0, 0.05, t.size)
    coef = fit_poly2(t, v)
    sse = float(np.sum((eval_poly2(coef, t) - v) ** 2))
    grid = [np.linspace(-1, 1, 41)] * 3
    assert sse <= grid_best_sse(t.tolist(), v.tolist(), grid) + 1e-6


def test_quadratic_path_is_unchanged_by_smoothing():
    i = np.arange(11)
    t = i / 10
    # x = 30 t and y = 200 t^2 land on integer pixels
    s = DepthSamples(np.column_stack([3 * i, 2 * i * i]).astype(np.int64), t, np.full(11, 0.5))
    sx, sy = smooth_pixels(s)
    np.testing.assert_allclose(sx, 3 * i, atol=1e-6)
    np.testing.assert_allclose(sy, 2 * i * i, atol=1e-6)


def test_three_samples_are_interpolated_exactly():
    s = _samples([0, 5, 7], [3, 9, 2], [0.5] * 3)
    sx, sy = smooth_pixels(s)
    np.testing.assert_allclose(sx, [0, 5, 7], atol=1e-9)
    np.testing.assert_allclose(sy, [3, 9, 2], atol=1e-9)


def test_zigzag_smooths_to_shorter_path():
    xs = np.arange(0, 60, 3) + 100
    ys = 200 + np.where(np.arange(len(xs)) % 2 == 0, 1, -1)
    s = _samples(xs, ys, np.full(len(xs), 0.5))
    raw = np.hypot(np.diff(xs), np.diff(ys)).sum()
    sx, sy = smooth_pixels(s)
    assert np.hypot(np.diff(sx), np.diff(sy)).sum() < raw


def test_smoothing_needs_complete_depth():
    with pytest.raises(ValueError):
        smooth_centreline(_samples([0, 1, 2], [0, 0, 0], [0.5, NAN, 0.5]), K)


# -- length -----------------------------------------------------------------------

def test_collinear_length():
    assert polyline_length([(0, 0, 0), (0, 0, 1), (0, 0, 3)]) == 3.0


def test_right_angle_length():
    assert polyline_length([(0, 0, 0), (1, 0, 0), (1, 1, 0)]) == 2.0


def test_length_needs_two_points():
    with pytest.raises(TooSparse):
        polyline_length([(0, 0, 0)])


def test_polyline_rejects_non_finite():
    with pytest.raises(ValueError):
        Polyline3D([(0, 0, 0), (np.inf, 0, 0)])


@given(st.integers(0, 2**32 - 1))
def test_length_is_rigid_invariant(seed):
    rng = np.random.default_rng(seed)
    pts = rng.normal(size=(int(rng.integers(2, 30)), 3))
    moved = pts @ _rotation(rng).T + rng.normal(scale=5, size=3)
    a, b = polyline_length(pts), polyline_length(moved)
    assert abs(a - b) <= 1e-9 * a


@given(st.integers(0, 2**32 - 1), st.floats(0.2, 5.0))
def test_length_scales_with_depth(seed, c):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(3, 20))
    s = _samples(np.sort(rng.integers(0, 600, n)), rng.integers(0, 400, n), np.full(n, 0.5))
    base = polyline_length(smooth_centreline(s, K))
    scaled = polyline_length(smooth_centreline(s.with_z(s.z * c), K))
    assert scaled == pytest.approx(c * base, rel=1e-6)


# -- full chain ---------------------------------------------------------------------

STRAIGHT = SyntheticPrawn(((170, 240), (320, 240), (470, 240)), 6.0, 0.5)


def _scene(hole_rate, seed=1):
    return gen_scene(SceneSpec(seed, K, (STRAIGHT,), hole_rate=hole_rate))


def test_straight_ribbon_length_follows_pinhole_relation():
    sc = _scene(0.0)
    r = measure(sc.masks[0], sc.depth, K)
    assert r.status is Status.ACCEPTED
    assert r.validity_ratio == 1.0
    assert r.length_m == pytest.approx(300 * 0.5 / 600, rel=0.02)
    assert sc.lengths_m[0] == pytest.approx(0.25, rel=1e-9)


def test_ten_percent_holes_fail_the_gate():
    sc = _scene(0.10)
    r = measure(sc.masks[0], sc.depth, K)
    assert r.status is Status.REJECTED and r.reason is Reason.LOW_VALIDITY
    assert r.validity_ratio < 0.95


def test_four_percent_holes_still_measure():
    sc = _scene(0.04)
    r = measure(sc.masks[0], sc.depth, K)
    assert r.accepted
    assert r.validity_ratio >= 0.95
    assert r.length_m == pytest.approx(sc.lengths_m[0], rel=0.05)


def test_empty_mask_is_rejected_not_raised():
    r = measure(np.zeros((480, 640), dtype=bool), _scene(0.0).depth, K)
    assert r.reason is Reason.EMPTY_MASK


def test_tiny_mask_is_too_sparse():
    bits = np.zeros((480, 640), dtype=bool)
    bits[240, 300:303] = True
    r = measure(bits, _scene(0.0).depth, K)
    assert r.reason is Reason.TOO_SPARSE


@given(st.integers(0, 1000))
def test_gate_is_monotone_in_hole_rate(seed):
    statuses = []
    for rate in (0.0, 0.02, 0.04, 0.06, 0.08, 0.10):
        sc = gen_scene(SceneSpec(seed, K, (STRAIGHT,), hole_rate=rate))
        statuses.append(measure(sc.masks[0], sc.depth, K).reason is Reason.LOW_VALIDITY)
    # once the gate fires it keeps firing as holes increase
    assert statuses == sorted(statuses)


def test_accepted_results_respect_the_gate():
    for rate in (0.0, 0.03, 0.05, 0.08):
        sc = _scene(rate, seed=4)
        r = measure(sc.masks[0], sc.depth, K)
        if r.accepted:
            assert r.validity_ratio >= 0.95 and r.length_m > 0


def test_length_estimator():
    sc = _scene(0.0)
    est = LengthEstimator(intrinsics=K, sample_stride=2)
    out = est.fit_transform([(sc.masks[0], sc.depth), (np.zeros((480, 640), bool), sc.depth)])
    assert out[0] == pytest.approx(0.25, rel=0.02)
    assert math.isnan(out[1])
    assert est.results_[1].reason is Reason.EMPTY_MASK
    with pytest.raises(TypeError):
        LengthEstimator().fit()
