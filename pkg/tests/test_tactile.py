import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dualskin.fem import indentor_at_node, solve_indentation
from dualskin.render import TactileImage
from dualskin.tactile import (AmbiguousMatchError, DisplacementEstimate, LeastSquaresEstimator,
                              MarkerObservation, SingularSystemError, concat_views,
                              contact_depth, debias_image, detect_marker_centroids,
                              estimate_displacements_lsq, lift_free_field, read_regressor,
                              train_linear_regressor, write_regressor)

H, W = 60, 100


def _canvas(squares, half=2):
    px = np.zeros((H, W), dtype=np.uint8)
    for u, v in squares:
        px[v - half:v + half + 1, u - half:u + half + 1] = 255
    return TactileImage(px)


GRID = [(u, v) for v in (15, 45) for u in (15, 40, 65, 90)]


def test_identity_frame():
    ref = _canvas(GRID)
    obs = detect_marker_centroids(ref, ref)
    assert obs.visible.all()
    assert not obs.displacements.any()


@settings(max_examples=40, deadline=None)
@given(st.integers(-5, 5), st.integers(-5, 5))
def test_translation_recovered(du, dv):
    ref = _canvas(GRID)
    cur = _canvas([(u + du, v + dv) for u, v in GRID])
    obs = detect_marker_centroids(cur, ref)
    assert obs.visible.all()
    np.testing.assert_allclose(obs.displacements, np.tile([du, dv], (len(GRID), 1)), atol=1e-9)


def test_far_shift_needs_prediction():
    ref = _canvas(GRID)
    # 13 px lies outside the 12.5 px gate of every target
    cur = _canvas([(15, 28)] + GRID[1:])
    plain = detect_marker_centroids(cur, ref)
    assert not plain.visible[0] and plain.visible[1:].all()
    pred = np.zeros((len(GRID), 2))
    pred[0] = [0.0, 12.0]
    guided = detect_marker_centroids(cur, ref, predicted=pred)
    assert guided.visible.all()
    np.testing.assert_allclose(guided.displacements[0], [0, 13])


def test_merged_blob_skipped():
    ref = _canvas([(20, 30), (30, 30), (80, 30)])
    px = ref.pixels.copy()
    px[28:33, 18:33] = 255
    obs = detect_marker_centroids(TactileImage(px), ref)
    np.testing.assert_array_equal(obs.visible, [False, False, True])


def test_tie_raises():
    ref = _canvas([(20, 30), (80, 30)])
    cur = _canvas([(15, 30), (25, 30), (80, 30)], half=1)
    with pytest.raises(AmbiguousMatchError):
        detect_marker_centroids(cur, ref)


def test_anchor_indexing():
    ref = _canvas(GRID)
    anchors = np.array([[40.2, 15.1], [-10.0, 5.0], [90.0, 45.0], [np.nan, 1.0], [3.0, 3.0]])
    cur = _canvas([(u + 1, v) for u, v in GRID])
    obs = detect_marker_centroids(cur, ref, anchors_px=anchors)
    np.testing.assert_array_equal(obs.visible, [True, False, True, False, False])
    np.testing.assert_allclose(obs.displacements[[0, 2]], [[1, 0], [1, 0]])
    assert not obs.displacements[[1, 3, 4]].any()


def test_shape_mismatch():
    with pytest.raises(ValueError):
        detect_marker_centroids(_canvas(GRID), TactileImage(np.zeros((5, 5), np.uint8)))


@pytest.mark.parametrize("beta", [10, 30, 60])
def test_debias_cancels_offset(pipeline, mesh, K, beta):
    node = int(mesh.node_index(4, 15, 0))
    f = solve_indentation(mesh, K, indentor_at_node(mesh, node, 3.0))
    plain = pipeline.render(f.displacements)
    shifted = pipeline.render(f.displacements, beta)
    for a, b, ref in zip(plain, shifted, pipeline.references):
        oa = detect_marker_centroids(debias_image(a, ref), ref)
        ob = detect_marker_centroids(debias_image(b, ref), ref)
        np.testing.assert_array_equal(oa.visible, ob.visible)
        np.testing.assert_array_equal(oa.displacements, ob.displacements)


def test_concat_views_and_mismatch():
    a = MarkerObservation(np.ones((3, 2)), np.array([True, False, True]))
    b = MarkerObservation(2 * np.ones((3, 2)), np.array([False, True, True]), "cam2")
    y, m = concat_views(a, b)
    assert y.shape == (12,) and m.tolist() == [1, 1, 0, 0, 1, 1, 0, 0, 1, 1, 1, 1]
    with pytest.raises(ValueError):
        concat_views(a, MarkerObservation(np.ones((2, 2)), np.ones(2, bool)))


def test_lift_free_field(mesh, rng):
    D = rng.normal(size=(mesh.n_free, 3))
    u = lift_free_field(mesh, D)
    assert u.shape == (mesh.n_nodes, 3)
    np.testing.assert_array_equal(u[mesh.free_set], D)
    np.testing.assert_array_equal(u[mesh.inner_nodes], u[mesh.outer_nodes])
    assert not u[mesh.clamped].any()


def test_jacobian_is_first_order(pipeline, mesh, rng):
    # smooth 0.05 mm bump: forward model minus linearization is second order
    D = np.zeros((mesh.n_free, 3))
    D[:, 0] = 0.05 * rng.normal(size=mesh.n_free)
    est = DisplacementEstimate(D)
    shifts = np.concatenate([s.ravel() for s in pipeline.predicted_shifts(est)])
    lin = pipeline.J @ D.ravel()
    assert np.abs(shifts - lin).max() < 1e-2 * max(np.abs(lin).max(), 1e-9) + 1e-6


def test_lsq_normal_equations(pipeline, rng):
    J, L = pipeline.J, pipeline.L
    y = rng.normal(size=J.shape[0])
    mask = rng.random(J.shape[0]) < 0.8
    est = estimate_displacements_lsq((y, mask), J, L, mu=1e-2, tol=1e-10)
    d = est.D.ravel()
    Jv = J[mask]
    lhs = Jv.T @ (Jv @ d) + 1e-2 * (L.T @ (L @ d))
    rhs = Jv.T @ y[mask]
    assert np.linalg.norm(lhs - rhs) <= 1e-8 * np.linalg.norm(rhs)


def test_lsq_edge_cases(pipeline):
    lsq = LeastSquaresEstimator(pipeline.J, pipeline.L)
    n = pipeline.J.shape[0]
    with pytest.warns(RuntimeWarning):
        zero = lsq.estimate(np.ones(n), np.zeros(n, bool))
    assert not zero.D.any()
    mask = np.zeros(n, bool)
    mask[:4] = True
    with warnings.catch_warnings(record=True) as w:
        warnings.simplefilter("always")
        lsq.estimate(np.ones(n), mask)
    assert any(issubclass(x.category, RuntimeWarning) for x in w)
    assert not lsq.estimate(np.zeros(n)).D.any()


def test_contact_depth_ties_and_nodes():
    D = np.array([[0.0, 3.0, 4.0], [5.0, 0.0, 0.0], [1.0, 1.0, 1.0]])
    cd = contact_depth(DisplacementEstimate(D, nodes=np.array([7, 8, 9])))
    assert (cd.value, cd.index, cd.node) == (5.0, 0, 7)
    assert contact_depth(D).node is None
    with pytest.raises(ValueError):
        contact_depth(np.zeros((0, 3)))


def test_ridge_recovers_linear_map(rng):
    X = rng.normal(size=(200, 6))
    Wt = rng.normal(size=(6, 9))
    reg = train_linear_regressor(X, X @ Wt, lam=1e-12, seed=4)
    np.testing.assert_allclose(reg.weights, Wt, atol=1e-6)
    assert reg.n_train + reg.n_holdout == 200 and reg.n_holdout == 40
    assert reg.holdout_rmse < 1e-6
    again = train_linear_regressor(X, X @ Wt, lam=1e-12, seed=4)
    assert again.meta == reg.meta
    with pytest.raises(ValueError):
        reg.predict(np.ones(5))


def test_ridge_drops_duplicates(rng):
    X = rng.normal(size=(20, 3))
    Y = rng.normal(size=(20, 3))
    X2, Y2 = np.vstack([X, X[:5]]), np.vstack([Y, Y[:5]])
    reg = train_linear_regressor(X2, Y2, lam=0.1, seed=0)
    assert reg.n_train + reg.n_holdout == 20
    assert set(reg.meta["holdout"]) | set(reg.meta["train"]) == set(range(20))


def test_ridge_rank_deficient():
    X = np.ones((10, 2))
    with pytest.raises(SingularSystemError):
        train_linear_regressor(X, np.ones((10, 3)), lam=0.0)
    with pytest.raises(ValueError):
        train_linear_regressor(X[:1], np.ones((1, 3)), lam=1.0)


def test_regressor_file_roundtrip(tmp_path, rng):
    reg = train_linear_regressor(rng.normal(size=(30, 4)), rng.normal(size=(30, 6)), 0.5)
    p = tmp_path / "r.bin"
    write_regressor(reg, p)
    back = read_regressor(p)
    np.testing.assert_array_equal(back.weights, reg.weights)
    assert back.lam == reg.lam
    p.write_bytes(p.read_bytes()[:-8])
    with pytest.raises(ValueError):
        read_regressor(p)


def test_pipeline_zero_field(pipeline, mesh):
    cd = pipeline.contact_depth(np.zeros((mesh.n_nodes, 3)))
    assert cd.value == 0.0


def test_pipeline_tracks_indentation(pipeline, mesh, K):
    node = int(mesh.node_index(0, 15, 0))
    f = solve_indentation(mesh, K, indentor_at_node(mesh, node, 2.5))
    cd = pipeline.contact_depth(f.displacements)
    assert abs(cd.value - 2.5) < 1.25
    obs, _ = pipeline.track(pipeline.render(f.displacements))
    assert all(o.visible.sum() > 0.5 * o.n_markers for o in obs)
