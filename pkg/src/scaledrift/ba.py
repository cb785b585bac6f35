"""Geo-constrained bundle adjustment.

Minimises Huber-robustified reprojection error over the window's
keyframe poses (SE(3)) and the map points they observe, plus a quadratic
pull of each windowed geo image's camera centre toward its geo-tag::

    E = sum rho(|x - pi(R_cw X + t_cw)|^2) + lam * sum |t_m - y_m|^2

Geo images are not variables.  Their centre is predicted from the pose of
the keyframe they were matched to, through the keyframe-to-geo-image
offset fixed at the start of the solve.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import manifold as mf
from .manifold import SE3, Rot3
from .pgo import GraphWindow
from .scene import Camera, Scene
from .solver import Euclidean, Huber, Problem, SE3Manifold, SolveReport, SolverOptions, solve

log = logging.getLogger(__name__)

CHI2_2DOF_95 = 5.991


class BehindCameraError(ValueError):
    pass


@dataclass
class BaOptions:
    weight: float = 1e3
    huber_delta: float = math.sqrt(CHI2_2DOF_95)
    full_history: bool = False
    min_parallax_deg: float = 10.0


@dataclass
class BaProblemSpec:
    keyframes: list[int]
    points: np.ndarray
    anchors: list[tuple[int, np.ndarray, np.ndarray, str]] = field(default_factory=list)
    weight: float = 1e3
    huber_delta: float = math.sqrt(CHI2_2DOF_95)
    min_parallax_deg: float = 10.0


# ---------------------------------------------------------------------------
# projection
# ---------------------------------------------------------------------------


def project(camera: Camera, pose_T: SE3, X) -> np.ndarray:
    """Pinhole projection of world point ``X`` through camera-from-world ``pose_T``."""
    p = pose_T.act(np.asarray(X, dtype=float))
    if p[2] <= 1e-9:
        raise BehindCameraError(f"point is behind the camera (depth {p[2]:.3g})")
    return np.array([camera.fx * p[0] / p[2] + camera.cx, camera.fy * p[1] / p[2] + camera.cy])


MIN_DEPTH = 1e-6


def _pinhole(camera: Camera, p: np.ndarray) -> np.ndarray:
    # a point behind the camera has no valid image; inf makes the optimiser reject that step
    z = np.where(p[:, 2] > MIN_DEPTH, p[:, 2], np.nan)
    uv = np.column_stack([camera.fx * p[:, 0] / z + camera.cx, camera.fy * p[:, 1] / z + camera.cy])
    return np.where(np.isnan(uv), np.inf, uv)


def reprojection_residual(camera: Camera, pixels: np.ndarray, P: np.ndarray, X: np.ndarray) -> np.ndarray:
    """``pixels - pi(R^T (X - c))`` for world-from-camera rows ``P = (q, c)``."""
    R = mf.quat_to_matrix(P[:, :4])
    p = np.einsum("nji,nj->ni", R, X - P[:, 4:7])
    return pixels - _pinhole(camera, p)


def reprojection_jacobian(camera: Camera, pixels: np.ndarray, P: np.ndarray, X: np.ndarray):
    """Analytic ``[d r / d pose (n,2,6), d r / d X (n,2,3)]`` for left pose updates."""
    R = mf.quat_to_matrix(P[:, :4])
    Rt = np.swapaxes(R, 1, 2)
    p = np.einsum("nij,nj->ni", Rt, X - P[:, 4:7])
    x, y, z = p[:, 0], p[:, 1], p[:, 2]
    n = len(P)
    Dpi = np.zeros((n, 2, 3))
    Dpi[:, 0, 0] = camera.fx / z
    Dpi[:, 0, 2] = -camera.fx * x / z**2
    Dpi[:, 1, 1] = camera.fy / z
    Dpi[:, 1, 2] = -camera.fy * y / z**2
    dp_dpose = np.concatenate([Rt @ mf.skew(X), -Rt], axis=2)
    return [-(Dpi @ dp_dpose), -(Dpi @ Rt)]


def _anchor_residual(offset: np.ndarray, y: np.ndarray, P: np.ndarray) -> np.ndarray:
    return mf.quat_rotate(P[:, :4], offset) + P[:, 4:7] - y


def _anchor_jacobian(offset: np.ndarray, y: np.ndarray, P: np.ndarray):
    w = mf.quat_rotate(P[:, :4], offset) + P[:, 4:7]
    J = np.zeros((len(P), 3, 6))
    J[:, :, :3] = -mf.skew(w)
    J[:, :, 3:] = np.eye(3)
    return [J]


def _se3_params(poses) -> np.ndarray:
    return np.array([np.concatenate([T.rotation.q, T.translation]) for T in poses]).reshape(-1, 7)


# ---------------------------------------------------------------------------
# problem construction
# ---------------------------------------------------------------------------


def build_ba_spec(scene: Scene, window: GraphWindow, options: BaOptions | None = None) -> BaProblemSpec:
    opt = options or BaOptions()
    c1 = list(window.c1)
    seen = np.isin(scene.obs_keyframe, c1)
    points = np.unique(scene.obs_point[seen])
    corrs = scene.geo_correspondences if opt.full_history else window.c2
    anchors = []
    c1_set = set(c1)
    for c in corrs:
        if c.keyframe_id not in c1_set:
            continue
        Pk = scene.keyframes[c.keyframe_id]
        offset = Pk.inverse().act(c.map_pose.translation)
        anchors.append((c.keyframe_id, offset, c.world_point, c.geo_id))
    return BaProblemSpec(c1, points, anchors, opt.weight, opt.huber_delta, opt.min_parallax_deg)


def _in_front(scene: Scene, kf: np.ndarray, pts: np.ndarray) -> np.ndarray:
    P = _se3_params([scene.keyframes[k] for k in kf.tolist()])
    X = scene.point_xyz[scene.point_rows(pts)]
    z = np.einsum("nji,nj->ni", mf.quat_to_matrix(P[:, :4]), X - P[:, 4:7])[:, 2]
    return z > MIN_DEPTH


def _parallax(scene: Scene, kf: np.ndarray, xi: np.ndarray, X: np.ndarray) -> np.ndarray:
    """Widest angle (degrees) between the rays observing each point."""
    c = np.array([scene.keyframes[k].translation for k in kf.tolist()]).reshape(-1, 3)
    d = X[xi] - c
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    # angle to the mean ray, doubled, bounds the pairwise spread from below
    m = np.zeros_like(X)
    np.add.at(m, xi, d)
    m /= np.maximum(np.linalg.norm(m, axis=1, keepdims=True), 1e-300)
    ang = np.degrees(np.arccos(np.clip(np.sum(d * m[xi], axis=1), -1.0, 1.0)))
    out = np.zeros(len(X))
    np.maximum.at(out, xi, ang)
    return 2.0 * out


def ba_problem(scene: Scene, spec: BaProblemSpec):
    """Solver problem for ``spec``; returns ``(problem, pose_ids, point_rows)``."""
    if len(spec.points) == 0:
        raise ValueError("bundle adjustment has no map points to refine (empty C5)")
    point_rows = scene.point_rows(spec.points)
    obs = np.isin(scene.obs_point, spec.points)
    obs[obs] = _in_front(scene, scene.obs_keyframe[obs], scene.obs_point[obs])
    obs_kf = scene.obs_keyframe[obs]
    free = set(spec.keyframes)
    pose_ids = list(spec.keyframes) + sorted(set(obs_kf.tolist()) - free)
    pose_index = {k: i for i, k in enumerate(pose_ids)}
    prob = Problem()
    prob.add_variables(
        "poses",
        SE3Manifold(),
        _se3_params([scene.keyframes[k] for k in pose_ids]),
        fixed=[k not in free for k in pose_ids],
    )
    point_index = {int(p): i for i, p in enumerate(spec.points.tolist())}
    pi = np.array([pose_index[k] for k in obs_kf.tolist()], dtype=np.int64)
    xi = np.array([point_index[p] for p in scene.obs_point[obs].tolist()], dtype=np.int64)
    X0 = scene.point_xyz[point_rows]
    # depth along a narrow bundle of rays is not observable; such points stay put
    weak = _parallax(scene, obs_kf, xi, X0) < spec.min_parallax_deg
    prob.add_variables("points", Euclidean(3), X0, fixed=weak, eliminate=True)
    pixels = scene.obs_pixel[obs]
    cam = scene.camera
    prob.add_residuals(
        "reprojection",
        lambda P, X: reprojection_residual(cam, pixels, P, X),
        [("poses", pi), ("points", xi)],
        2,
        loss=Huber(spec.huber_delta),
        jacobian=lambda P, X: reprojection_jacobian(cam, pixels, P, X),
    )
    if spec.anchors and spec.weight > 0:
        off = np.array([a[1] for a in spec.anchors])
        y = np.array([a[2] for a in spec.anchors])
        ai = np.array([pose_index[a[0]] for a in spec.anchors])
        prob.add_residuals(
            "geo_anchor",
            lambda P: _anchor_residual(off, y, P),
            [("poses", ai)],
            3,
            weight=spec.weight,
            jacobian=lambda P: _anchor_jacobian(off, y, P),
        )
    return prob, pose_ids, point_rows


def ba_cost(scene: Scene, spec: BaProblemSpec) -> float:
    prob, _, _ = ba_problem(scene, spec)
    return prob.cost()


def _update_local_scale(scene: Scene, moved: dict, old_xyz: np.ndarray) -> None:
    """Fold the change in each keyframe's median point depth into ``keyframe_scale``.

    BA refines SE(3) poses and points, but the map scale around a keyframe
    can still change; the driver needs it to place later keyframes.
    """
    if not moved:
        return
    sel = np.isin(scene.obs_keyframe, list(moved))
    kf = scene.obs_keyframe[sel]
    rows = scene.point_rows(scene.obs_point[sel])
    c_old = np.array([moved[k][0].translation for k in kf.tolist()]).reshape(-1, 3)
    c_new = np.array([moved[k][1].translation for k in kf.tolist()]).reshape(-1, 3)
    d_old = np.linalg.norm(old_xyz[rows] - c_old, axis=1)
    d_new = np.linalg.norm(scene.point_xyz[rows] - c_new, axis=1)
    ratio = d_new / np.maximum(d_old, 1e-12)
    for k in moved:
        r = ratio[kf == k]
        if len(r):
            scene.keyframe_scale[k] *= float(np.median(r))


def optimize_ba(scene: Scene, window: GraphWindow, spec: BaProblemSpec | BaOptions | None = None,
                solver_options: SolverOptions | None = None) -> SolveReport:
    """Refine C1 keyframe poses and C5 points in place; geo-image map poses follow their keyframe."""
    if not isinstance(spec, BaProblemSpec):
        spec = build_ba_spec(scene, window, spec)
    prob, pose_ids, point_rows = ba_problem(scene, spec)
    report = solve(prob, solver_options)
    vals = prob.variables["poses"].values
    old_xyz = scene.point_xyz
    xyz = old_xyz.copy()
    xyz[point_rows] = prob.variables["points"].values
    scene.point_xyz = xyz
    moved = {}
    for k, row in zip(pose_ids, vals):
        if k in spec.keyframes:
            new = SE3(Rot3(row[:4]), row[4:7])
            moved[k] = (scene.keyframes[k], new)
            scene.keyframes[k] = new
    _update_local_scale(scene, moved, old_xyz)
    for c in scene.geo_correspondences:
        if c.keyframe_id in moved:
            old, new = moved[c.keyframe_id]
            rel = (new @ old.inverse())
            c.map_pose = mf.Sim3(rel.rotation, rel.translation, 1.0) @ c.map_pose
    log.debug("ba window %s..%s: cost %.6g -> %.6g in %d it", spec.keyframes[0], spec.keyframes[-1],
              report.initial_cost, report.final_cost, report.iterations)
    return report
