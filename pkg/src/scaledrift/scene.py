"""Reconstruction state shared by initialisation, PGO, BA and the driver."""

from __future__ import annotations

import copy
from dataclasses import dataclass
from typing import Iterator

import numpy as np

from .manifold import SE3, Sim3, Rot3


@dataclass(frozen=True)
class Camera:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int = 0
    height: int = 0

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")

    def in_image(self, uv: np.ndarray, margin: float = 0.0) -> np.ndarray:
        uv = np.asarray(uv, dtype=float)
        if self.width <= 0 or self.height <= 0:
            return np.ones(uv.shape[:-1], dtype=bool)
        return (
            (uv[..., 0] >= margin) & (uv[..., 0] <= self.width - margin)
            & (uv[..., 1] >= margin) & (uv[..., 1] <= self.height - margin)
        )


@dataclass(frozen=True)
class Observation:
    keyframe_id: int
    point_id: int
    pixel: np.ndarray


@dataclass
class GeoCorrespondence:
    """A geo-tagged image localised in the map, paired with its world pose."""

    geo_id: str
    keyframe_id: int
    map_pose: Sim3
    world_pose: SE3

    @property
    def map_point(self) -> np.ndarray:
        return np.array(self.map_pose.translation)

    @property
    def world_point(self) -> np.ndarray:
        return np.array(self.world_pose.translation)


class Scene:
    """Keyframes, map points, 2D observations and geo correspondences.

    Map points and observations are kept as parallel arrays so the
    optimisers can gather them without Python loops.  Keyframe poses are
    world-from-camera; ``keyframe_scale`` tracks how much each keyframe's
    local map scale has been changed relative to the raw reconstruction.
    """

    def __init__(self, camera: Camera):
        self.camera = camera
        self.keyframes: dict[int, SE3] = {}
        self.keyframe_scale: dict[int, float] = {}
        self.point_ids = np.zeros(0, dtype=np.int64)
        self.point_xyz = np.zeros((0, 3))
        self.point_ref = np.zeros(0, dtype=np.int64)
        self._point_row: dict[int, int] = {}
        self.obs_keyframe = np.zeros(0, dtype=np.int64)
        self.obs_point = np.zeros(0, dtype=np.int64)
        self.obs_pixel = np.zeros((0, 2))
        self.geo_correspondences: list[GeoCorrespondence] = []
        self.initialized = False

    # -- keyframes ---------------------------------------------------------

    def add_keyframe(self, kf_id: int, pose: SE3, scale: float = 1.0) -> None:
        kf_id = int(kf_id)
        if self.keyframes and kf_id <= next(reversed(self.keyframes)):
            raise ValueError(f"keyframe id {kf_id} is not greater than the last id {next(reversed(self.keyframes))}")
        self.keyframes[kf_id] = pose
        self.keyframe_scale[kf_id] = float(scale)

    @property
    def keyframe_ids(self) -> list[int]:
        return list(self.keyframes)

    def keyframe_positions(self, ids=None) -> np.ndarray:
        ids = self.keyframe_ids if ids is None else ids
        return np.array([self.keyframes[i].translation for i in ids]).reshape(-1, 3)

    # -- map points --------------------------------------------------------

    def add_points(self, ids, xyz, ref) -> None:
        ids = np.asarray(ids, dtype=np.int64).reshape(-1)
        xyz = np.asarray(xyz, dtype=float).reshape(-1, 3)
        ref = np.broadcast_to(np.asarray(ref, dtype=np.int64), ids.shape)
        if len(ids) == 0:
            return
        for i in ids.tolist():
            if i in self._point_row:
                raise ValueError(f"duplicate map point id {i}")
        if len(np.unique(ids)) != len(ids):
            raise ValueError("duplicate map point ids in batch")
        missing = set(ref.tolist()) - set(self.keyframes)
        if missing:
            raise ValueError(f"map points reference unknown keyframes {sorted(missing)}")
        start = len(self.point_ids)
        self.point_ids = np.concatenate([self.point_ids, ids])
        self.point_xyz = np.concatenate([self.point_xyz, xyz])
        self.point_ref = np.concatenate([self.point_ref, ref])
        for k, i in enumerate(ids.tolist()):
            self._point_row[i] = start + k

    def point_rows(self, ids) -> np.ndarray:
        ids = np.asarray(ids, dtype=np.int64).reshape(-1)
        try:
            return np.array([self._point_row[i] for i in ids.tolist()], dtype=np.int64)
        except KeyError as exc:
            raise KeyError(f"unknown map point id {exc.args[0]}") from None

    def has_point(self, pid: int) -> bool:
        return int(pid) in self._point_row

    def point(self, pid: int) -> np.ndarray:
        return self.point_xyz[self._point_row[int(pid)]]

    # -- observations ------------------------------------------------------

    def add_observations(self, kf_ids, point_ids, pixels) -> None:
        kf_ids = np.broadcast_to(np.asarray(kf_ids, dtype=np.int64), np.shape(point_ids)).reshape(-1)
        point_ids = np.asarray(point_ids, dtype=np.int64).reshape(-1)
        pixels = np.asarray(pixels, dtype=float).reshape(-1, 2)
        if len(point_ids) == 0:
            return
        unknown_kf = set(kf_ids.tolist()) - set(self.keyframes)
        if unknown_kf:
            raise ValueError(f"observations reference unknown keyframes {sorted(unknown_kf)}")
        self.point_rows(point_ids)
        self.obs_keyframe = np.concatenate([self.obs_keyframe, kf_ids])
        self.obs_point = np.concatenate([self.obs_point, point_ids])
        self.obs_pixel = np.concatenate([self.obs_pixel, pixels])

    @property
    def observations(self) -> Iterator[Observation]:
        for k, p, px in zip(self.obs_keyframe.tolist(), self.obs_point.tolist(), self.obs_pixel):
            yield Observation(k, p, px.copy())

    # -- geo correspondences ----------------------------------------------

    def add_geo_correspondence(self, corr: GeoCorrespondence) -> None:
        if corr.keyframe_id not in self.keyframes:
            raise ValueError(f"geo correspondence references unknown keyframe {corr.keyframe_id}")
        self.geo_correspondences.append(corr)
        self.geo_correspondences.sort(key=lambda c: c.keyframe_id)

    # -- whole-scene ops ---------------------------------------------------

    def transform(self, G: Sim3) -> None:
        """Apply a world-side similarity to every pose and point.

        Keyframe poses keep rotation and camera centre; the scale factor is
        folded into ``keyframe_scale``.
        """
        for kf, pose in self.keyframes.items():
            S = G @ Sim3(pose.rotation, pose.translation, 1.0)
            self.keyframes[kf] = S.to_se3()
            self.keyframe_scale[kf] *= G.scale
        if len(self.point_xyz):
            self.point_xyz = G.act(self.point_xyz)
        for c in self.geo_correspondences:
            c.map_pose = Sim3(*_drop_scale(G @ c.map_pose))

    def copy(self) -> Scene:
        return copy.deepcopy(self)

    def __repr__(self) -> str:
        return (
            f"Scene({len(self.keyframes)} keyframes, {len(self.point_ids)} points, "
            f"{len(self.obs_point)} observations, {len(self.geo_correspondences)} geo, "
            f"initialized={self.initialized})"
        )


def _drop_scale(S: Sim3) -> tuple[Rot3, np.ndarray, float]:
    return S.rotation, S.translation, 1.0
