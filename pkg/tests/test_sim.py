import math

import numpy as np
import pytest

from scaledrift.ba import BaProblemSpec
from scaledrift.manifold import Rot3, Sim3
from scaledrift.pgo import PoseGraph, pgo_cost
from scaledrift.pipeline import scale_factor_trace
from scaledrift.sim import (
    SHAPES,
    ScenarioSpec,
    camera_pose,
    generate,
    local_map_transform,
    oracle_cost_ba,
    oracle_cost_pgo,
    trajectory,
)

from conftest import random_graph


def _quiet(**kw):
    return ScenarioSpec(pixel_noise=0.0, anchor_noise=0.0, **kw)


def test_no_drift_no_noise_matches_truth_up_to_map_frame():
    sc = generate(_quiet(n_keyframes=40, drift_factor=1.0))
    gt, raw = sc.ground_truth, sc.drifted
    A0 = local_map_transform(gt.keyframes[0], raw.keyframes[0], 1.0)
    for k in gt.keyframes:
        A = local_map_transform(gt.keyframes[k], raw.keyframes[k], 1.0)
        np.testing.assert_allclose(A.matrix(), A0.matrix(), atol=1e-9)
    np.testing.assert_allclose(raw.point_xyz, A0.act(gt.point_xyz), atol=1e-6)


def test_constant_multiplier_compounds():
    spec = _quiet(n_keyframes=101, drift_multipliers=(1.01,) * 100)
    assert spec.cumulative_scale()[-1] == pytest.approx(1.01**100, rel=1e-12)
    sc = generate(spec)
    gt, raw = sc.ground_truth.keyframes, sc.drifted.keyframes
    ratio = np.linalg.norm(raw[100].translation - raw[99].translation) / np.linalg.norm(gt[100].translation - gt[99].translation)
    assert ratio == pytest.approx(1.01**100, rel=1e-9)
    assert ratio == pytest.approx(2.7, abs=0.01)


def test_trace_recovers_injected_drift():
    spec = _quiet(n_keyframes=120, drift_factor=2.0)
    sc = generate(spec)
    cum = spec.cumulative_scale()
    for k, f in scale_factor_trace(sc.drifted, sc.ground_truth, window=1):
        assert abs(f - cum[k]) < 1e-6


def test_generation_is_deterministic():
    a = generate(ScenarioSpec(n_keyframes=30, seed=9))
    b = generate(ScenarioSpec(n_keyframes=30, seed=9))
    assert np.array_equal(a.drifted.point_xyz, b.drifted.point_xyz)
    assert np.array_equal(a.drifted.obs_pixel, b.drifted.obs_pixel)
    for k in a.drifted.keyframes:
        assert np.array_equal(a.drifted.keyframes[k].matrix(), b.drifted.keyframes[k].matrix())
    c = generate(ScenarioSpec(n_keyframes=30, seed=10))
    assert not np.array_equal(a.drifted.obs_pixel, c.drifted.obs_pixel)


def test_ground_truth_reprojects_exactly():
    sc = generate(_quiet(n_keyframes=20))
    gt = sc.ground_truth
    spec = BaProblemSpec(list(gt.keyframes), gt.point_ids, weight=0.0)
    assert oracle_cost_ba(gt, spec) < 1e-16


def test_uncorrected_error_grows_superlinearly():
    sc = generate(ScenarioSpec(n_keyframes=200, seed=0))
    gt = sc.ground_truth_positions
    # raw map lives in the first camera's frame; bring it to the world with that frame
    A0 = local_map_transform(sc.ground_truth.keyframes[0], sc.drifted.keyframes[0], 1.0).inverse()
    est = {k: A0.act(T.translation) for k, T in sc.drifted.keyframes.items()}
    e = {k: np.hypot(*(est[k] - gt[k])[[0, 2]]) for k in gt}
    half, full = np.mean([e[k] for k in range(100)]), np.mean([e[k] for k in range(200)])
    assert full > 2.0 * half


@pytest.mark.parametrize("shape", SHAPES)
def test_shapes_have_requested_spacing(shape):
    spec = ScenarioSpec(shape=shape, n_keyframes=60)
    P = np.array([T.translation for T in trajectory(spec)])
    steps = np.linalg.norm(np.diff(P, axis=0), axis=1)
    assert np.all(np.abs(steps - spec.spacing) < 0.05)
    assert np.all(P[:, 1] == spec.camera_height)


def test_city_grid_length():
    P = np.array([T.translation for T in trajectory(ScenarioSpec())])
    assert np.sum(np.linalg.norm(np.diff(P, axis=0), axis=1)) == pytest.approx(398.0, abs=2.0)


def test_camera_pose_axes():
    T = camera_pose([1.0, 2.0, 3.0], math.pi / 2)
    R = T.rotation.matrix()
    np.testing.assert_allclose(R[:, 2], [1, 0, 0], atol=1e-12)  # facing east
    np.testing.assert_allclose(R[:, 1], [0, -1, 0], atol=1e-12)  # image down is world down


@pytest.mark.parametrize(
    "bad",
    [
        dict(n_keyframes=1),
        dict(spacing=0.0),
        dict(drift_factor=-1.0),
        dict(shape="spiral"),
        dict(n_keyframes=3, drift_multipliers=(1.0,)),
        dict(n_keyframes=3, drift_multipliers=(1.0, 0.0)),
        dict(outlier_fraction=1.0),
    ],
)
def test_spec_validation(bad):
    with pytest.raises(ValueError):
        ScenarioSpec(**bad)


def test_spec_dict_round_trip_and_coercion():
    spec = ScenarioSpec(n_keyframes=12, drift_multipliers=(1.1,) * 11)
    assert ScenarioSpec.from_dict(spec.to_dict()) == spec
    assert ScenarioSpec.from_dict({"n_keyframes": "30", "drift_factor": "1.5"}).n_keyframes == 30
    with pytest.raises(KeyError):
        ScenarioSpec.from_dict({"colour": 1})


# -- oracles ------------------------------------------------------------------


def test_pgo_oracle_zero_configuration():
    S = Sim3(Rot3.exp([0.1, 0.2, 0.3]), [1.0, 2.0, 3.0], 1.3)
    g = PoseGraph({0: S, 1: S}, {"g": S}, rel_edges_kf=[(0, 1, Sim3.identity())],
                  rel_edges_geo=[(0, "g", Sim3.identity())], anchor_edges=[("g", S.translation)])
    assert oracle_cost_pgo(g) == pytest.approx(0.0, abs=1e-20)


def test_pgo_oracle_hand_computed():
    # e1 = log(T(1,0,0)) = (0,0,0, 0, 1,0,0) -> 2 * 1; e3 = (0,3,4) -> 0.5 * 25
    g = PoseGraph(
        {0: Sim3.identity(), 1: Sim3(Rot3.identity(), [1.0, 0.0, 0.0], 1.0)},
        {"g": Sim3(Rot3.identity(), [0.0, 3.0, 4.0], 1.0)},
        rel_edges_kf=[(0, 1, Sim3.identity())],
        anchor_edges=[("g", np.zeros(3))],
        lambda1=2.0,
        lambda3=0.5,
    )
    assert oracle_cost_pgo(g) == pytest.approx(14.5, abs=1e-12)
    assert pgo_cost(g) == pytest.approx(14.5, abs=1e-12)


def test_pgo_oracle_random_five_node():
    rng = np.random.default_rng(99)
    for _ in range(10):
        g = random_graph(rng, n_kf=5, n_geo=0) if rng.random() < 0.5 else random_graph(rng, n_kf=3, n_geo=2)
        ref = oracle_cost_pgo(g)
        assert abs(pgo_cost(g) - ref) <= 1e-9 * max(1.0, ref)
