"""Localisation of a geo-tagged image against the map (3D map point to 2D pixel)."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .ba import CHI2_2DOF_95, reprojection_jacobian, reprojection_residual
from .initialization import DegenerateGeometryError
from .manifold import SE3, Rot3, Sim3
from .scene import Camera, GeoCorrespondence, Scene
from .solver import Huber, Problem, SE3Manifold, SolverOptions, solve

log = logging.getLogger(__name__)


class PnPError(RuntimeError):
    """Localisation failed (too few inliers or divergence)."""


@dataclass
class MapGeoMatches:
    geo_id: str
    camera: Camera
    matches: list[tuple[int, np.ndarray]] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.matches)


@dataclass
class PnpOptions:
    inlier_threshold: float = CHI2_2DOF_95  # px^2
    min_inlier_ratio: float = 0.5
    min_matches: int = 4


def _pose_problem(camera: Camera, X: np.ndarray, px: np.ndarray, pose: SE3, loss):
    prob = Problem()
    prob.add_variables("pose", SE3Manifold(), [np.concatenate([pose.rotation.q, pose.translation])])
    slots = [("pose", np.zeros(len(X), dtype=np.int64))]

    def func(P):
        return reprojection_residual(camera, px, P, X)

    def jac(P):
        return [reprojection_jacobian(camera, px, P, X)[0]]

    prob.add_residuals("reprojection", func, slots, 2, loss=loss, jacobian=jac)
    return prob


def _pose_of(prob: Problem) -> SE3:
    row = prob.variables["pose"].values[0]
    return SE3(Rot3(row[:4]), row[4:7])


def reprojection_errors(camera: Camera, pose: SE3, X, px) -> np.ndarray:
    """Squared pixel error per match for world-from-camera ``pose`` (inf behind the camera)."""
    X = np.asarray(X, dtype=float).reshape(-1, 3)
    P = np.tile(np.concatenate([pose.rotation.q, pose.translation]), (len(X), 1))
    depth = pose.inverse().act(X)[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        r = reprojection_residual(camera, np.asarray(px, dtype=float).reshape(-1, 2), P, X)
        e = np.sum(r * r, axis=1)
    e[~(depth > 1e-9) | ~np.isfinite(e)] = np.inf
    return e


def _check_geometry(X: np.ndarray) -> None:
    sv = np.linalg.svd(X - X.mean(axis=0), compute_uv=False)
    if sv[0] <= 0 or sv[1] <= 1e-6 * sv[0]:
        raise DegenerateGeometryError("matched map points are collinear; pose is undetermined")


def localize_geo_image(scene: Scene, matches: MapGeoMatches, initial_guess: SE3,
                       options: PnpOptions | None = None,
                       solver_options: SolverOptions | None = None) -> tuple[SE3, int]:
    """World-from-camera pose of the geo image in the map frame, and its inlier count.

    A Huber-robust LM from ``initial_guess`` classifies inliers by squared
    reprojection error, then a plain least-squares LM polishes the pose on
    the inliers only.
    """
    opt = options or PnpOptions()
    n = len(matches.matches)
    if n < opt.min_matches:
        raise DegenerateGeometryError(f"localisation needs at least {opt.min_matches} matches, got {n}")
    # order-independent: sort matches by point id, then pixel
    order = sorted(range(n), key=lambda i: (int(matches.matches[i][0]), tuple(np.asarray(matches.matches[i][1]).tolist())))
    ids = np.array([int(matches.matches[i][0]) for i in order], dtype=np.int64)
    px = np.array([np.asarray(matches.matches[i][1], dtype=float) for i in order]).reshape(-1, 2)
    X = scene.point_xyz[scene.point_rows(ids)]
    _check_geometry(X)
    cam = matches.camera

    e0 = reprojection_errors(cam, initial_guess, X, px)
    front = np.isfinite(e0)
    if front.sum() < opt.min_matches:
        raise PnPError(f"{matches.geo_id}: only {int(front.sum())} matched points in front of the initial camera")
    delta = math.sqrt(opt.inlier_threshold)
    robust = _pose_problem(cam, X[front], px[front], initial_guess, Huber(delta))
    solve(robust, solver_options)
    pose = _pose_of(robust)

    err = reprojection_errors(cam, pose, X, px)
    inliers = err < opt.inlier_threshold
    if inliers.sum() < max(opt.min_matches, math.ceil(opt.min_inlier_ratio * n)):
        raise PnPError(f"{matches.geo_id}: inlier ratio {inliers.sum()}/{n} below {opt.min_inlier_ratio:.0%}")
    _check_geometry(X[inliers])

    plain = _pose_problem(cam, X[inliers], px[inliers], pose, None)
    solve(plain, solver_options)
    refined = _pose_of(plain)
    err2 = reprojection_errors(cam, refined, X, px)
    if np.sum(err2[inliers]) <= np.sum(err[inliers]):
        pose, err = refined, err2
    inliers = err < opt.inlier_threshold
    if not np.all(np.isfinite(pose.translation)):
        raise PnPError(f"{matches.geo_id}: pose diverged")
    if inliers.sum() < opt.min_inlier_ratio * n:
        raise PnPError(f"{matches.geo_id}: inlier ratio {inliers.sum()}/{n} below {opt.min_inlier_ratio:.0%}")
    return pose, int(inliers.sum())


def make_geo_correspondence(pose_map: SE3, geotag, keyframe_id: int, geo_id: str | None = None) -> GeoCorrespondence:
    """Pair a map-frame localisation with the world pose of its geo-tag.

    ``geotag`` may be a :class:`~scaledrift.io.geodesy.GeoAnchor` or an
    :class:`SE3` world pose.
    """
    if isinstance(geotag, SE3):
        world = geotag
        gid = geo_id if geo_id is not None else ""
    else:
        world = geotag.world_pose()
        gid = geo_id if geo_id is not None else geotag.id
    return GeoCorrespondence(gid, int(keyframe_id), Sim3(pose_map.rotation, pose_map.translation, 1.0), world)
