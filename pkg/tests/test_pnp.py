import math

import numpy as np
import pytest

from scaledrift.initialization import DegenerateGeometryError
from scaledrift.io.geodesy import GeoAnchor, LocalOrigin
from scaledrift.manifold import SE3, Rot3
from scaledrift.pnp import MapGeoMatches, PnPError, localize_geo_image, make_geo_correspondence, reprojection_errors
from scaledrift.scene import Scene
from scaledrift.sim import ScenarioSpec, camera_pose, generate

from conftest import CAMERA


def _setup(rng, n=60, noise=0.0, outliers=0.0):
    scene = Scene(CAMERA)
    scene.add_keyframe(0, SE3.identity())
    true = camera_pose([0.5, 1.5, 3.0], 0.1, 0.02)
    local = np.column_stack([rng.uniform(-6, 6, n), rng.uniform(-3, 3, n), rng.uniform(8, 40, n)])
    X = true.act(local)
    scene.add_points(np.arange(n), X, 0)
    px = np.column_stack([CAMERA.fx * local[:, 0] / local[:, 2] + CAMERA.cx, CAMERA.fy * local[:, 1] / local[:, 2] + CAMERA.cy])
    px = px + rng.normal(0, noise, px.shape) if noise else px
    bad = rng.choice(n, int(round(outliers * n)), replace=False) if outliers else np.zeros(0, dtype=int)
    px[bad] += rng.uniform(30, 80, (len(bad), 2)) * rng.choice([-1, 1], (len(bad), 2))
    m = MapGeoMatches("g", CAMERA, [(i, px[i]) for i in range(n)])
    guess = SE3(Rot3.exp([0.01, -0.02, 0.015]) @ true.rotation, true.translation + [0.3, -0.1, 0.4])
    return scene, m, true, guess, bad


def _pose_error(a, b):
    return (a.rotation.inverse() @ b.rotation).angle(), np.linalg.norm(a.translation - b.translation)


def test_exact_recovery(rng):
    scene, m, true, guess, _ = _setup(rng)
    pose, inl = localize_geo_image(scene, m, guess)
    ang, dist = _pose_error(pose, true)
    assert ang < 1e-8 and dist < 1e-8
    assert inl == 60


def test_guess_equal_to_truth(rng):
    scene, m, true, _, _ = _setup(rng)
    pose, _ = localize_geo_image(scene, m, true)
    X = scene.point_xyz
    px = np.array([p for _, p in m.matches])
    assert np.max(reprojection_errors(CAMERA, pose, X, px)) < 1e-16
    ang, dist = _pose_error(pose, true)
    assert ang < 1e-12 and dist < 1e-12


def test_outliers_classified_exactly(rng):
    scene, m, true, guess, bad = _setup(rng, n=100, noise=1.0, outliers=0.2)
    pose, inl = localize_geo_image(scene, m, guess)
    assert inl <= 100 - len(bad)
    err = reprojection_errors(CAMERA, pose, scene.point_xyz, np.array([p for _, p in m.matches]))
    assert np.all(err[bad] > 5.99)
    ang, dist = _pose_error(pose, true)
    extent = np.ptp(scene.point_xyz, axis=0).max()
    assert math.degrees(ang) < 0.5 and dist < 0.01 * extent


def test_cost_not_above_initial_guess(rng):
    scene, m, _, guess, _ = _setup(rng, noise=1.0)
    pose, _ = localize_geo_image(scene, m, guess)
    X, px = scene.point_xyz, np.array([p for _, p in m.matches])
    assert np.sum(reprojection_errors(CAMERA, pose, X, px)) <= np.sum(reprojection_errors(CAMERA, guess, X, px))


def test_match_order_invariance(rng):
    scene, m, _, guess, _ = _setup(rng, noise=1.0, outliers=0.1)
    a, _ = localize_geo_image(scene, m, guess)
    shuffled = MapGeoMatches("g", CAMERA, [m.matches[i] for i in rng.permutation(len(m.matches))])
    b, _ = localize_geo_image(scene, shuffled, guess)
    assert np.array_equal(a.matrix(), b.matrix())


def test_too_few_matches(rng):
    scene, m, _, guess, _ = _setup(rng, n=3)
    with pytest.raises(DegenerateGeometryError):
        localize_geo_image(scene, m, guess)


def test_collinear_points_rejected(rng):
    scene = Scene(CAMERA)
    scene.add_keyframe(0, SE3.identity())
    X = np.column_stack([np.zeros(10), np.zeros(10), np.linspace(5, 20, 10)])
    scene.add_points(np.arange(10), X, 0)
    m = MapGeoMatches("g", CAMERA, [(i, np.array([320.0, 240.0])) for i in range(10)])
    with pytest.raises(DegenerateGeometryError):
        localize_geo_image(scene, m, SE3.identity())


def test_garbage_matches_fail_softly(rng):
    scene, m, _, guess, _ = _setup(rng)
    junk = MapGeoMatches("g", CAMERA, [(i, rng.uniform(0, 640, 2)) for i, _ in m.matches])
    with pytest.raises(PnPError):
        localize_geo_image(scene, junk, guess)


def test_correspondence_from_identity_tag():
    c = make_geo_correspondence(SE3.identity(), SE3.identity(), 3, "g")
    np.testing.assert_array_equal(c.world_point, [0, 0, 0])
    assert c.keyframe_id == 3 and c.geo_id == "g"


def test_correspondence_from_utm_tag():
    origin = LocalOrigin(0.0, 0.0, "30N")
    tag = GeoAnchor("g", easting=500000.0, northing=4000000.0, zone="30N", height=0.0, origin=origin)
    c = make_geo_correspondence(SE3.identity(), tag, 0)
    np.testing.assert_array_equal(c.world_point, [500000.0, 0.0, 4000000.0])
    np.testing.assert_array_equal(c.world_point, c.world_pose.translation)
    assert c.geo_id == "g"


def test_simulated_correspondences_match_injected_pairs():
    sc = generate(ScenarioSpec(n_keyframes=40, anchor_noise=0.0, seed=4))
    for c in sc.drifted.geo_correspondences:
        np.testing.assert_allclose(c.world_pose.matrix(), sc.geo_truth[c.geo_id].matrix(), atol=1e-12)
        np.testing.assert_allclose(c.map_pose.matrix(), sc.geo_map_truth[c.geo_id].matrix(), atol=1e-12)
