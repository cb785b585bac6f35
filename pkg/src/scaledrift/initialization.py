"""One-shot geo-registration of the raw map.

Two linear transforms are applied, once: a rotation that lays the
best-fit plane of the keyframe positions onto the world xz-plane, then a
four-parameter planar similarity (x/z offsets, uniform scale, yaw about y)
fitted to the map/world point pairs with RANSAC and refined with LM.
"""

from __future__ import annotations

import itertools
import logging
import math
from dataclasses import dataclass

import numpy as np

from .manifold import Rot3, Sim3
from .scene import GeoCorrespondence, Scene
from .solver import Euclidean, Problem, SolverOptions, solve

log = logging.getLogger(__name__)


class DegenerateGeometryError(ValueError):
    """Input geometry does not determine the requested quantity."""


@dataclass(frozen=True)
class PlanarSimilarity:
    a: float = 0.0
    b: float = 0.0
    s: float = 1.0
    theta: float = 0.0
    height_offset: float = 0.0

    def __post_init__(self):
        if not self.s > 0:
            raise ValueError("planar similarity scale must be positive")
        object.__setattr__(self, "theta", _wrap_angle(self.theta))

    def matrix(self) -> np.ndarray:
        c, sn = math.cos(self.theta), math.sin(self.theta)
        return np.array(
            [
                [self.s * c, 0.0, -self.s * sn, self.a],
                [0.0, self.s, 0.0, self.height_offset],
                [self.s * sn, 0.0, self.s * c, self.b],
                [0.0, 0.0, 0.0, 1.0],
            ]
        )

    def apply(self, p: np.ndarray) -> np.ndarray:
        M = self.matrix()
        return np.asarray(p, dtype=float) @ M[:3, :3].T + M[:3, 3]

    def to_sim3(self) -> Sim3:
        # rotation by theta in the xz sense above is a rotation of -theta about +y
        R = Rot3.exp([0.0, -self.theta, 0.0])
        return Sim3(R, [self.a, self.height_offset, self.b], self.s)


@dataclass
class RansacOptions:
    iterations: int = 1000
    threshold: float = 5.0
    min_sample: int = 2
    seed: int = 0


def _wrap_angle(t: float) -> float:
    t = math.remainder(float(t), 2.0 * math.pi)
    return math.pi if t == -math.pi else t


# ---------------------------------------------------------------------------
# plane alignment
# ---------------------------------------------------------------------------


def _rotation_between(a: np.ndarray, b: np.ndarray) -> Rot3:
    """Smallest rotation taking unit vector ``a`` onto unit vector ``b``."""
    a = a / np.linalg.norm(a)
    b = b / np.linalg.norm(b)
    axis = np.cross(a, b)
    s = np.linalg.norm(axis)
    c = float(np.clip(a @ b, -1.0, 1.0))
    if s < 1e-15:
        if c > 0:
            return Rot3.identity()
        perp = np.cross(a, [1.0, 0.0, 0.0])
        if np.linalg.norm(perp) < 1e-6:
            perp = np.cross(a, [0.0, 0.0, 1.0])
        return Rot3.exp(math.pi * perp / np.linalg.norm(perp))
    return Rot3.exp(axis / s * math.atan2(s, c))


def fit_ground_plane(points, up_hint=None, rank_tol: float = 1e-9) -> Rot3:
    """Rotation taking the PCA plane normal of ``points`` onto world +y.

    The normal sign is chosen so that the rotation angle is smallest, or,
    when ``up_hint`` (a map-frame "up" direction) is given, so that the
    normal agrees with it.  With ``up_hint`` a collinear point set is
    accepted and the normal is taken as the part of the hint orthogonal to
    the line.
    """
    P = np.asarray(points, dtype=float).reshape(-1, 3)
    if len(P) < 3 and up_hint is None:
        raise DegenerateGeometryError("plane fit needs at least 3 points")
    X = P - P.mean(axis=0)
    cov = X.T @ X / max(len(P), 1)
    evals, evecs = np.linalg.eigh(cov)
    scale = max(evals[-1], 1e-300)
    y = np.array([0.0, 1.0, 0.0])
    if evals[1] <= rank_tol * scale or evals[-1] <= 0:
        if up_hint is None or evals[-1] <= 0:
            raise DegenerateGeometryError("positions are collinear; ground plane is undetermined")
        line = evecs[:, -1]
        hint = np.asarray(up_hint, dtype=float)
        normal = hint - (hint @ line) * line
        if np.linalg.norm(normal) < 1e-9:
            raise DegenerateGeometryError("up hint is parallel to the trajectory")
        return _rotation_between(normal, y)
    normal = evecs[:, 0]
    if up_hint is not None:
        if normal @ np.asarray(up_hint, dtype=float) < 0:
            normal = -normal
        return _rotation_between(normal, y)
    r1 = _rotation_between(normal, y)
    r2 = _rotation_between(-normal, y)
    return r1 if r1.angle() <= r2.angle() else r2


# ---------------------------------------------------------------------------
# planar similarity
# ---------------------------------------------------------------------------


def _minimal_solve(src: np.ndarray, dst: np.ndarray, height_offset: float):
    """Two xz correspondences fix ``(a, b, s, theta)`` exactly."""
    u = src[:, 0] + 1j * src[:, 2]
    w = dst[:, 0] + 1j * dst[:, 2]
    du = u[1] - u[0]
    if abs(du) < 1e-9 * max(1.0, abs(u[0]), abs(u[1])):
        return None
    k = (w[1] - w[0]) / du
    if abs(k) == 0:
        return None
    t = w[0] - k * u[0]
    return PlanarSimilarity(t.real, t.imag, abs(k), math.atan2(k.imag, k.real), height_offset)


def _residuals(sim: PlanarSimilarity, src, dst) -> np.ndarray:
    return dst - sim.apply(src)


def planar_problem(sim: PlanarSimilarity, src, dst) -> Problem:
    """Least-squares problem over ``(a, b, log s, theta)`` for the planar fit."""
    src = np.asarray(src, dtype=float).reshape(-1, 3)
    dst = np.asarray(dst, dtype=float).reshape(-1, 3)
    h = sim.height_offset

    def func(p):
        a, b, log_s, th = p[:, 0:1], p[:, 1:2], p[:, 2:3], p[:, 3:4]
        s = np.exp(log_s)
        c, sn = np.cos(th), np.sin(th)
        x = s * (c * src[:, 0:1] - sn * src[:, 2:3]) + a
        y = s * src[:, 1:2] + h
        z = s * (sn * src[:, 0:1] + c * src[:, 2:3]) + b
        return dst - np.hstack([x, y, z])

    def jac(p):
        log_s, th = p[:, 2:3], p[:, 3:4]
        s = np.exp(log_s)
        c, sn = np.cos(th), np.sin(th)
        n = len(src)
        J = np.zeros((n, 3, 4))
        J[:, 0, 0] = -1.0
        J[:, 2, 1] = -1.0
        rx = (c * src[:, 0:1] - sn * src[:, 2:3])[:, 0]
        rz = (sn * src[:, 0:1] + c * src[:, 2:3])[:, 0]
        s = s[:, 0]
        J[:, 0, 2] = -s * rx
        J[:, 1, 2] = -s * src[:, 1]
        J[:, 2, 2] = -s * rz
        J[:, 0, 3] = s * rz
        J[:, 2, 3] = -s * rx
        return [J]

    prob = Problem()
    prob.add_variables("sim", Euclidean(4), [[sim.a, sim.b, math.log(sim.s), sim.theta]])
    prob.add_residuals("planar", func, [("sim", np.zeros(len(src), dtype=int))], 3, jacobian=jac)
    return prob


def _refine(sim: PlanarSimilarity, src, dst, options: SolverOptions | None) -> PlanarSimilarity:
    h = sim.height_offset
    prob = planar_problem(sim, src, dst)
    solve(prob, options)
    a, b, log_s, th = prob.variables["sim"].values[0]
    return PlanarSimilarity(a, b, math.exp(log_s), th, h)


def planar_cost(sim: PlanarSimilarity, src, dst) -> float:
    r = _residuals(sim, np.asarray(src, dtype=float), np.asarray(dst, dtype=float))
    return float(np.sum(r * r))


def fit_planar_similarity(
    corrs,
    ransac: RansacOptions | None = None,
    height_offset: float = 0.0,
    solver_options: SolverOptions | None = None,
):
    """RANSAC over two-point samples, then LM over the inliers.

    ``corrs`` is a sequence of :class:`GeoCorrespondence` or of
    ``(map_point, world_point)`` pairs.  Returns ``(PlanarSimilarity,
    inlier_mask)``.  When the number of distinct pairs does not exceed the
    iteration budget every pair is tried, which makes small problems
    deterministic regardless of seed.
    """
    opt = ransac or RansacOptions()
    src, dst = _split(corrs)
    n = len(src)
    if n < 2:
        raise DegenerateGeometryError(f"planar similarity needs at least 2 correspondences, got {n}")

    n_pairs = n * (n - 1) // 2
    if n_pairs <= opt.iterations:
        samples = itertools.combinations(range(n), 2)
    else:
        rng = np.random.default_rng(opt.seed)
        samples = (tuple(rng.choice(n, 2, replace=False)) for _ in range(opt.iterations))

    thr2 = opt.threshold**2
    best = None
    best_key = None
    for i, j in samples:
        idx = [i, j]
        cand = _minimal_solve(src[idx], dst[idx], height_offset)
        if cand is None:
            continue
        r2 = np.sum(_residuals(cand, src, dst) ** 2, axis=1)
        mask = r2 < thr2
        key = (int(mask.sum()), -float(np.sum(r2[mask])))
        if best_key is None or key > best_key:
            best, best_key, best_mask = cand, key, mask
    if best is None:
        raise DegenerateGeometryError("all samples degenerate (coincident xz projections)")
    if best_mask.sum() < opt.min_sample:
        raise DegenerateGeometryError("no consensus set of minimal size")

    refined = _refine(best, src[best_mask], dst[best_mask], solver_options)
    if planar_cost(refined, src[best_mask], dst[best_mask]) > planar_cost(best, src[best_mask], dst[best_mask]):
        refined = best
    r2 = np.sum(_residuals(refined, src, dst) ** 2, axis=1)
    mask = r2 < thr2
    if mask.sum() > best_mask.sum():
        again = _refine(refined, src[mask], dst[mask], solver_options)
        if planar_cost(again, src[mask], dst[mask]) <= planar_cost(refined, src[mask], dst[mask]):
            refined = again
        mask = np.sum(_residuals(refined, src, dst) ** 2, axis=1) < thr2
    else:
        mask = best_mask
    return refined, mask


def _split(corrs):
    src, dst = [], []
    for c in corrs:
        if isinstance(c, GeoCorrespondence):
            src.append(c.map_point)
            dst.append(c.world_point)
        else:
            p, q = c
            src.append(p)
            dst.append(q)
    return np.asarray(src, dtype=float).reshape(-1, 3), np.asarray(dst, dtype=float).reshape(-1, 3)


# ---------------------------------------------------------------------------
# application
# ---------------------------------------------------------------------------


def initialization_transform(R_plane: Rot3, sim: PlanarSimilarity) -> Sim3:
    return sim.to_sim3() @ Sim3(R_plane, np.zeros(3), 1.0)


def apply_initialization(scene: Scene, R_plane: Rot3, sim: PlanarSimilarity) -> Scene:
    """Transform keyframes, geo-image map poses and points by ``sim o R_plane``."""
    if scene.initialized:
        raise RuntimeError("initialization has already been applied to this scene")
    scene.transform(initialization_transform(R_plane, sim))
    scene.initialized = True
    return scene


def initialize_scene(scene: Scene, ransac: RansacOptions | None = None, height_offset: float = 0.0,
                     up_hint=None, solver_options: SolverOptions | None = None):
    """Plane fit on keyframe positions, similarity fit on the correspondences, apply.

    Returns ``(R_plane, PlanarSimilarity, inlier_mask)``.
    """
    R_plane = fit_ground_plane(scene.keyframe_positions(), up_hint=up_hint)
    pairs = [(R_plane.act(c.map_point), c.world_point) for c in scene.geo_correspondences]
    sim, mask = fit_planar_similarity(pairs, ransac, height_offset, solver_options)
    apply_initialization(scene, R_plane, sim)
    log.info("initialized: s=%.4f theta=%.4f a=%.3f b=%.3f inliers=%d/%d",
             sim.s, sim.theta, sim.a, sim.b, int(mask.sum()), len(mask))
    return R_plane, sim, mask
