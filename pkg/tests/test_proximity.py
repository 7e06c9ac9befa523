import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from dualskin.camera import CameraModel
from dualskin.proximity import (AllInvalidDepthError, ObstaclePointCloud, ProximityEstimate,
                                RankDeficientError, apply_calibration, calibrate_depth_affine,
                                closest_distance, depth_to_intensity, estimate_proximity,
                                fuse_views, masked_obstacle_points, normal_distances,
                                otsu_threshold, quantization_bound)
from dualskin.render import INVALID_DEPTH, DepthMap, ObstacleScene, Sphere, render_depth_map

from .oracles import closest_scalar, otsu_brute


@settings(max_examples=150, deadline=None)
@given(arrays(np.uint8, st.tuples(st.integers(1, 12), st.integers(1, 12))))
def test_otsu_matches_brute_force(img):
    m = otsu_threshold(img)
    ref = otsu_brute(img)
    if ref is None:
        assert m.degenerate
    else:
        assert not m.degenerate and m.threshold == ref
    np.testing.assert_array_equal(m.mask, img > m.threshold)


def test_otsu_tie_prefers_lower():
    # {0, 2, 4} equally weighted: splits at t=0 and t=2 tie by symmetry
    img = np.array([[0, 2, 4]], dtype=np.uint8)
    assert otsu_threshold(img).threshold == 0


@pytest.mark.parametrize("v,t,full", [(0, 0, False), (1, 0, True), (200, 199, True)])
def test_otsu_single_valued(v, t, full):
    m = otsu_threshold(np.full((4, 4), v, dtype=np.uint8))
    assert m.degenerate and m.threshold == t
    assert m.mask.all() == full and m.count == (16 if full else 0)


def test_otsu_dtype():
    with pytest.raises(ValueError):
        otsu_threshold(np.zeros((2, 2), dtype=np.int32))


def test_depth_to_intensity():
    d = DepthMap(np.array([[10.0, 20.0, INVALID_DEPTH], [30.0, 15.0, 30.0]]))
    img = depth_to_intensity(d)
    np.testing.assert_array_equal(img, [[255, 128, 0], [0, 191, 0]])
    flat = depth_to_intensity(DepthMap(np.array([[5.0, INVALID_DEPTH]])))
    np.testing.assert_array_equal(flat, [[255, 0]])
    with pytest.raises(AllInvalidDepthError):
        depth_to_intensity(DepthMap(np.full((2, 2), INVALID_DEPTH)))


def test_masked_points_row_major():
    cam = CameraModel(width=4, height=3, cx=1.5, cy=1.0)
    d = np.full((3, 4), 50.0)
    d[0, 1] = INVALID_DEPTH
    mask = np.ones((3, 4), bool)
    mask[2, 3] = False
    cloud = masked_obstacle_points(cam, DepthMap(d), mask)
    assert len(cloud) == 10
    v, u = np.divmod(np.arange(12), 4)
    keep = ~(((v == 0) & (u == 1)) | ((v == 2) & (u == 3)))
    np.testing.assert_array_equal(cloud.pixels, np.stack([u[keep], v[keep]], axis=1))
    np.testing.assert_allclose(cloud.radial, np.hypot(cloud.points[:, 0], cloud.points[:, 1]))
    with pytest.raises(ValueError):
        masked_obstacle_points(cam, DepthMap(d), mask[:2])


@settings(max_examples=80, deadline=None)
@given(st.integers(1, 60), st.integers(0, 2 ** 32 - 1), st.booleans())
def test_closest_distance_matches_scalar(k, seed, force_tie):
    r = np.random.default_rng(seed)
    pts = r.uniform(-120, 120, size=(k, 3))
    if force_tie and k > 2:
        pts[k - 1] = pts[1] * np.array([-1.0, -1.0, 1.0])   # same radius
    cloud = ObstaclePointCloud(pts, np.stack([np.arange(k), np.zeros(k, int)], axis=1),
                               np.sqrt(pts[:, 0] ** 2 + pts[:, 1] ** 2))
    out = closest_distance(normal_distances(cloud, 40.0), (20.0, 100.0))
    normals, kk = closest_scalar(pts, 40.0)
    assert out.distance == normals[kk]
    assert out.pixel == (kk, 0)
    assert out.contact_imminent == (normals[kk] < 0)
    assert out.low_confidence == (not 20.0 <= normals[kk] <= 100.0)


def test_closest_requires_normals_and_handles_empty():
    cloud = ObstaclePointCloud(np.ones((1, 3)), np.zeros((1, 2), int), np.ones(1))
    with pytest.raises(ValueError):
        closest_distance(cloud)
    empty = ObstaclePointCloud(np.zeros((0, 3)), np.zeros((0, 2), int), np.zeros(0))
    est = closest_distance(empty)
    assert not est.valid and math.isnan(est.distance)
    with pytest.raises(ValueError):
        normal_distances(cloud, 0.0)


@settings(max_examples=40, deadline=None)
@given(st.floats(0.2, 3.0), st.floats(-50, 50), st.integers(0, 10_000))
def test_calibration_recovers_affine(s, t, seed):
    x = np.random.default_rng(seed).uniform(0, 300, size=20)
    s_hat, t_hat = calibrate_depth_affine(x, s * x + t)
    assert s_hat == pytest.approx(s, rel=1e-9)
    assert t_hat == pytest.approx(t, abs=1e-7)


def test_calibration_errors():
    with pytest.raises(RankDeficientError):
        calibrate_depth_affine([5.0, 5.0, 5.0], [1.0, 2.0, 3.0])
    with pytest.raises(ValueError):
        calibrate_depth_affine([1.0, 2.0], [1.0])
    with pytest.raises(ValueError):
        calibrate_depth_affine([1.0, np.inf], [1.0, 2.0])


def test_apply_calibration_clips():
    d = DepthMap(np.array([[10.0, INVALID_DEPTH, 1.0]]))
    out = apply_calibration(d, 2.0, -5.0)
    np.testing.assert_array_equal(out.depth, [[15.0, INVALID_DEPTH, 0.0]])


def test_fuse_views():
    a = ProximityEstimate(10.0, (1, 1), "cam1", True)
    b = ProximityEstimate(10.0, (2, 2), "cam2", True)
    c = ProximityEstimate(5.0, (3, 3), "cam2", True)
    bad = ProximityEstimate(float("nan"))
    assert fuse_views(a, b) is a
    assert fuse_views(a, c) is c
    assert fuse_views(bad, b) is b
    assert fuse_views(a, bad) is a


def test_quantization_bound():
    cam = CameraModel(fx=200.0, fy=250.0, b=150.0)
    assert quantization_bound(cam, 50.0) == pytest.approx(1.0)


def test_estimate_on_clean_sphere(cameras):
    r_s = 40.0
    for n in (0.0, 35.0, 90.0):
        scene = ObstacleScene((Sphere((r_s + n + 40.0, 0.0, 0.0), 40.0),), r_s)
        ests = [estimate_proximity(c, render_depth_map(c, scene), r_s)[0] for c in cameras]
        f = fuse_views(*ests)
        dm = render_depth_map(cameras[0], scene)
        bound = quantization_bound(cameras[0], dm.depth[dm.valid].max())
        assert f.valid and abs(f.distance - n) <= bound
        assert f.low_confidence == (not 20 <= f.distance <= 100)


def test_estimate_all_invalid(cameras):
    dm = DepthMap(np.full((480, 640), INVALID_DEPTH))
    est, cloud, mask = estimate_proximity(cameras[0], dm, 40.0)
    assert not est.valid and len(cloud) == 0 and mask.degenerate


def test_full_frame_uses_every_valid_pixel(cameras):
    scene = ObstacleScene((Sphere((120.0, 0.0, 0.0), 40.0),), 40.0)
    dm = render_depth_map(cameras[0], scene)
    _, cloud, mask = estimate_proximity(cameras[0], dm, 40.0, full_frame=True)
    assert len(cloud) == int(dm.valid.sum()) == mask.count
