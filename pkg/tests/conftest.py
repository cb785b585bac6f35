import math
import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from scaledrift.ba import BaProblemSpec
from scaledrift.manifold import SE3, Rot3, Sim3
from scaledrift.pgo import PoseGraph
from scaledrift.scene import Camera, Scene
from scaledrift.sim import camera_pose

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

CAMERA = Camera(500.0, 500.0, 320.0, 240.0, 640, 480)


def random_rotation(rng, max_angle=math.pi * 0.95) -> Rot3:
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    return Rot3.exp(axis * rng.uniform(0.0, max_angle))


def random_sim3(rng, max_angle=math.pi * 0.95, trans=5.0, log_scale=0.7) -> Sim3:
    return Sim3(random_rotation(rng, max_angle), rng.uniform(-trans, trans, 3), math.exp(rng.uniform(-log_scale, log_scale)))


def random_se3(rng, max_angle=math.pi * 0.95, trans=5.0) -> SE3:
    return SE3(random_rotation(rng, max_angle), rng.uniform(-trans, trans, 3))


def random_graph(rng, n_kf=None, n_geo=None) -> PoseGraph:
    """Random pose graph with up to 10 nodes, perturbed edges and noisy anchors."""
    n_kf = n_kf or int(rng.integers(2, 7))
    n_geo = n_geo if n_geo is not None else int(rng.integers(1, 11 - n_kf))
    kf = {k: random_sim3(rng) for k in range(n_kf)}
    geo = {f"g{m}": random_sim3(rng) for m in range(n_geo)}
    g = PoseGraph(kf, geo)
    for i in range(n_kf):
        for j in range(i + 1, n_kf):
            if rng.random() < 0.7 or j == i + 1:
                g.rel_edges_kf.append((i, j, random_sim3(rng, 0.5, 1.0, 0.2)))
    for m, name in enumerate(geo):
        k = int(rng.integers(0, n_kf))
        g.rel_edges_geo.append((k, name, random_sim3(rng, 0.5, 1.0, 0.2)))
        g.anchor_edges.append((name, rng.uniform(-5, 5, 3)))
    if n_kf >= 3 and rng.random() < 0.5:
        g.fixed_keyframes = {0}
        g.boundary_edges.append((0, 1, random_sim3(rng, 0.5, 1.0, 0.2)))
        g.rel_edges_kf = [e for e in g.rel_edges_kf if 0 not in e[:2]]
    return g


def street_scene(rng, n_kf=5, n_pts=40, noise=1.0, camera=CAMERA, spacing=1.5):
    """Cameras moving along +z looking forward at points 6-30 m ahead."""
    scene = Scene(camera)
    poses = [camera_pose([0.2 * math.sin(k), 1.5, spacing * k], 0.02 * k) for k in range(n_kf)]
    for k, T in enumerate(poses):
        scene.add_keyframe(k, T)
    X = np.column_stack([rng.uniform(-8, 8, n_pts), rng.uniform(-2, 6, n_pts), rng.uniform(6 + spacing * n_kf, 30, n_pts)])
    scene.add_points(np.arange(n_pts), X, 0)
    for k, T in enumerate(poses):
        p = T.inverse().act(X)
        uv = np.column_stack([camera.fx * p[:, 0] / p[:, 2] + camera.cx, camera.fy * p[:, 1] / p[:, 2] + camera.cy])
        uv = uv + rng.normal(0, noise, uv.shape) if noise > 0 else uv
        scene.add_observations(k, np.arange(n_pts), uv)
    return scene, poses, X


def random_ba_instance(rng, n_kf=None, n_pts=None):
    """Scene + BA problem spec with ≤ 50 points and some anchors."""
    n_kf = n_kf or int(rng.integers(2, 6))
    n_pts = n_pts or int(rng.integers(10, 51))
    scene, poses, _ = street_scene(rng, n_kf, n_pts, noise=3.0)
    for k in range(n_kf):
        T = scene.keyframes[k]
        scene.keyframes[k] = SE3(Rot3.exp(rng.normal(0, 0.01, 3)) @ T.rotation, T.translation + rng.normal(0, 0.2, 3))
    scene.point_xyz = scene.point_xyz + rng.normal(0, 0.3, scene.point_xyz.shape)
    free = list(range(max(1, n_kf - 3), n_kf))
    anchors = []
    for k in free:
        if rng.random() < 0.7:
            anchors.append((k, rng.normal(0, 1.0, 3), scene.keyframes[k].translation + rng.normal(0, 1.0, 3), f"g{k}"))
    pts = np.unique(scene.obs_point[np.isin(scene.obs_keyframe, free)])
    spec = BaProblemSpec(free, pts, anchors, weight=float(10 ** rng.uniform(0, 4)), huber_delta=float(rng.uniform(1.0, 4.0)))
    return scene, spec


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# one line per acceptance criterion, repeated at the end of the run
ACCEPTANCE_LINES: dict[int, str] = {}


def report_criterion(number: int, status: str, detail: str) -> None:
    line = f"CRITERION {number}: {status} - {detail}"
    ACCEPTANCE_LINES[number] = line
    print(line)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[n])
