import math

import numpy as np
import pytest
from scipy.linalg import logm

from scaledrift import manifold as mf
from scaledrift.ba import project
from scaledrift.initialization import initialize_scene
from scaledrift.manifold import Rot3, Sim3, exp_sim3
from scaledrift.pgo import (
    PgoOptions,
    PoseGraph,
    build_window,
    covisibility_pairs,
    graph_problem,
    optimize_graph,
    optimize_window,
    pgo_cost,
    propagate_to_map_points,
    relative_snapshot,
    residual_e1,
    residual_e2,
    residual_e3,
)
from scaledrift.sim import ScenarioSpec, generate, oracle_cost_pgo

from conftest import random_graph, random_sim3, street_scene


def _pair_graph(rng):
    Si, Sj, Sg = random_sim3(rng), random_sim3(rng), random_sim3(rng)
    g = PoseGraph({0: Si, 1: Sj}, {"g": Sg})
    g.rel_edges_kf.append((0, 1, relative_snapshot(Si, Sj)))
    g.rel_edges_geo.append((0, "g", relative_snapshot(Si, Sg)))
    g.anchor_edges.append(("g", Sg.translation.copy()))
    return g


def _dense_log(M):
    L = np.real(logm(M))
    W = 0.5 * (L[:3, :3] - L[:3, :3].T)
    return np.array([W[2, 1], W[0, 2], W[1, 0], np.trace(L[:3, :3]) / 3, *L[:3, 3]])


# -- residuals ----------------------------------------------------------------


def test_relative_residuals_vanish_at_snapshot(rng):
    g = _pair_graph(rng)
    np.testing.assert_allclose(residual_e1(g, 0, 1), 0.0, atol=1e-9)
    np.testing.assert_allclose(residual_e2(g, 0, "g"), 0.0, atol=1e-9)
    np.testing.assert_allclose(residual_e3(g, "g"), 0.0, atol=0)


@pytest.mark.parametrize("which", ["e1", "e2"])
def test_scaling_endpoint_by_two_gives_ln2(rng, which):
    g = _pair_graph(rng)
    if which == "e1":
        S = g.keyframe_nodes[1]
        g.keyframe_nodes[1] = Sim3(S.rotation, S.translation, 2.0 * S.scale)
        r, dS, Sj = residual_e1(g, 0, 1), g.rel_edges_kf[0][2], g.keyframe_nodes[1]
    else:
        S = g.geo_nodes["g"]
        g.geo_nodes["g"] = Sim3(S.rotation, S.translation, 2.0 * S.scale)
        r, dS, Sj = residual_e2(g, 0, "g"), g.rel_edges_geo[0][2], g.geo_nodes["g"]
    assert abs(r[3]) == pytest.approx(math.log(2.0), abs=1e-12)
    ref = _dense_log(dS.matrix() @ np.linalg.inv(g.keyframe_nodes[0].matrix()) @ Sj.matrix())
    np.testing.assert_allclose(r, ref, atol=1e-8)


def test_residual_grows_continuously_with_perturbation(rng):
    g = _pair_graph(rng)
    d = rng.normal(size=7)
    d /= np.linalg.norm(d)
    S0 = g.keyframe_nodes[0]
    norms = []
    for eps in np.linspace(0.0, 0.1, 21):
        g.keyframe_nodes[0] = exp_sim3(eps * d) @ S0
        norms.append(np.linalg.norm(residual_e1(g, 0, 1)))
    assert norms[0] < 1e-9
    assert all(b > a for a, b in zip(norms, norms[1:]))
    assert max(np.diff(norms)) < 0.1


def test_anchor_residual_examples():
    g = PoseGraph({}, {"m": Sim3(Rot3.identity(), [1.0, 2.0, 3.0], 1.0)}, anchor_edges=[("m", np.zeros(3))])
    np.testing.assert_array_equal(residual_e3(g, "m"), [1.0, 2.0, 3.0])
    eps = 0.25
    g.anchor_edges = [("m", np.array([eps, 0.0, 0.0]))]
    np.testing.assert_array_equal(residual_e3(g, "m"), [1.0 - eps, 2.0, 3.0])


def test_missing_edge_raises(rng):
    g = _pair_graph(rng)
    with pytest.raises(KeyError):
        residual_e1(g, 1, 0)
    with pytest.raises(KeyError):
        residual_e3(g, "nope")


# -- cost ---------------------------------------------------------------------


def test_cost_matches_dense_oracle():
    rng = np.random.default_rng(7)
    for _ in range(50):
        g = random_graph(rng)
        ref = oracle_cost_pgo(g)
        assert abs(pgo_cost(g) - ref) <= 1e-9 * max(1.0, ref)


def test_pre_optimisation_cost_is_anchor_term(rng):
    g = _pair_graph(rng)
    g.anchor_edges = [("g", g.geo_nodes["g"].translation + np.array([1.0, -2.0, 0.5]))]
    assert pgo_cost(g) == pytest.approx(g.lambda3 * 5.25, abs=1e-9)


def test_gauge_freedom_without_anchors(rng):
    g = random_graph(np.random.default_rng(11), n_kf=5, n_geo=3)
    for lst, key in ((g.rel_edges_kf, "kf"), (g.rel_edges_geo, "geo")):
        for n, (i, j, _) in enumerate(lst):
            lst[n] = (i, j, relative_snapshot(g.keyframe_nodes[i], g.node((key, j))))
    g.boundary_edges = [(i, j, relative_snapshot(g.keyframe_nodes[i], g.keyframe_nodes[j])) for i, j, _ in g.boundary_edges]
    g.lambda3 = 0.0
    assert pgo_cost(g) < 1e-10
    G = random_sim3(rng)
    g.keyframe_nodes = {k: G @ S for k, S in g.keyframe_nodes.items()}
    g.geo_nodes = {k: G @ S for k, S in g.geo_nodes.items()}
    assert pgo_cost(g) < 1e-10


def test_consistent_graph_stays_put(rng):
    g = _pair_graph(rng)
    before = {k: S.params() for k, S in g.keyframe_nodes.items()}
    rep = optimize_graph(g)
    assert rep.final_cost < 1e-12
    for k, S in g.keyframe_nodes.items():
        np.testing.assert_allclose(S.params(), before[k], atol=1e-12)


def test_uniform_drift_removed_by_three_anchors():
    n = 10
    gt = np.array([[0.3 * k, 0.0, 2.0 * k] for k in range(n)])
    nodes = {k: Sim3(Rot3.exp([0, 0.05 * k, 0]), 1.5 * gt[k], 1.0) for k in range(n)}
    g = PoseGraph(nodes, {})
    for k in range(n - 1):
        g.rel_edges_kf.append((k, k + 1, relative_snapshot(nodes[k], nodes[k + 1])))
    for k in (0, 4, 9):
        g.geo_nodes[f"g{k}"] = nodes[k]
        g.rel_edges_geo.append((k, f"g{k}", relative_snapshot(nodes[k], nodes[k])))
        g.anchor_edges.append((f"g{k}", gt[k]))
    optimize_graph(g)
    p = np.array([g.keyframe_nodes[k].translation for k in range(n)])
    f = np.linalg.norm(np.diff(p, axis=0), axis=1) / np.linalg.norm(np.diff(gt, axis=0), axis=1)
    assert np.all((f >= 0.95) & (f <= 1.05))


def test_default_weights():
    o = PgoOptions()
    assert (o.lambda1, o.lambda2, o.lambda3) == (1e5, 1e5, 1.0)


def test_fixed_nodes_do_not_move():
    g = random_graph(np.random.default_rng(3), n_kf=5, n_geo=2)
    g.fixed_keyframes = {0, 1}
    before = {k: g.keyframe_nodes[k].params().copy() for k in (0, 1)}
    optimize_graph(g)
    for k in (0, 1):
        assert np.array_equal(g.keyframe_nodes[k].params(), before[k])


# -- scene-level --------------------------------------------------------------


def _initialized_scene(seed=0):
    sc = generate(ScenarioSpec(n_keyframes=80, drift_factor=1.5, seed=seed))
    scene = sc.drifted.copy()
    corrs = scene.geo_correspondences
    scene.geo_correspondences = corrs[:4]
    initialize_scene(scene, up_hint=[0.0, -1.0, 0.0])
    return sc, scene, corrs


def test_window_keeps_outside_keyframes_bitwise():
    sc, scene, corrs = _initialized_scene()
    w = build_window(scene, 3)
    assert len(w.c2) == 3
    assert w.c1 == list(range(w.c2[0].keyframe_id, w.c2[-1].keyframe_id + 1))
    before = {k: T.matrix().copy() for k, T in scene.keyframes.items()}
    optimize_window(scene, w)
    inside = set(w.c1)
    for k, M in before.items():
        if k not in inside:
            assert np.array_equal(scene.keyframes[k].matrix(), M)


def test_window_correction_reduces_map_point_error():
    sc, scene, corrs = _initialized_scene(1)
    gt = sc.ground_truth
    w = build_window(scene, 3)
    rows = np.isin(scene.point_ref, w.c1)
    ids = scene.point_ids[rows]

    def err():
        return np.mean(np.linalg.norm(scene.point_xyz[rows] - gt.point_xyz[gt.point_rows(ids)], axis=1))

    before = err()
    optimize_window(scene, w)
    assert err() < before


def test_empty_window_rejected(rng):
    scene, _, _ = street_scene(rng)
    with pytest.raises(ValueError):
        build_window(scene)


def test_covisibility_counts_shared_points(rng):
    scene, _, _ = street_scene(rng, n_kf=3, n_pts=20)
    assert covisibility_pairs(scene, [0, 1, 2], 20) == [(0, 1), (0, 2), (1, 2)]
    assert covisibility_pairs(scene, [0, 1, 2], 21) == []


# -- propagation --------------------------------------------------------------


def test_propagation_identity_leaves_points(rng):
    scene, poses, _ = street_scene(rng)
    X = scene.point_xyz.copy()
    old = {k: mf.se3_to_sim3(T) for k, T in scene.keyframes.items()}
    propagate_to_map_points(scene, old, dict(old))
    np.testing.assert_array_equal(scene.point_xyz, X)


def test_propagation_scale_about_origin_keeps_projection(rng):
    scene, poses, _ = street_scene(rng)
    old = {0: mf.se3_to_sim3(scene.keyframes[0])}
    G = Sim3(Rot3.identity(), np.zeros(3), 2.0)
    new = {0: G @ old[0]}
    before = [project(scene.camera, scene.keyframes[0].inverse(), X) for X in scene.point_xyz]
    propagate_to_map_points(scene, old, new)
    T = new[0].to_se3()
    after = [project(scene.camera, T.inverse(), X) for X in scene.point_xyz]
    np.testing.assert_allclose(after, before, atol=1e-9)


def test_propagation_only_moves_owned_points(rng):
    scene, _, _ = street_scene(rng, n_kf=3, n_pts=10)
    scene.point_ref = np.array([0] * 5 + [1] * 5)
    X = scene.point_xyz.copy()
    old = {0: mf.se3_to_sim3(scene.keyframes[0])}
    propagate_to_map_points(scene, old, {0: Sim3(Rot3.identity(), [1.0, 0, 0], 1.0) @ old[0]})
    np.testing.assert_allclose(scene.point_xyz[:5], X[:5] + [1.0, 0, 0], atol=1e-12)
    np.testing.assert_array_equal(scene.point_xyz[5:], X[5:])


def test_graph_problem_cost_equals_pgo_cost(rng):
    g = random_graph(rng)
    prob, keys = graph_problem(g)
    assert prob.cost() == pgo_cost(g)
    assert len(keys) == len(g.keyframe_nodes) + len(g.geo_nodes)
