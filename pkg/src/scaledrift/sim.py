"""Synthetic street scenarios with injected monocular scale drift.

The generator builds a ground-truth camera path in world coordinates
(x east, y height, z north), a corridor of map points beside it and
pixel observations, then produces what a drifting monocular tracker would
have reported: the same relative rotations with translations stretched by
a cumulative scale factor, expressed in the first camera's frame.

Also here: brute-force evaluators of the pose-graph and bundle-adjustment
costs built from dense 4x4 matrices, used as oracles by the tests.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields

import numpy as np
from scipy.linalg import logm

from .manifold import SE3, Rot3, Sim3, se3_to_sim3
from .pipeline import GeoObservation, KeyframeInput
from .pnp import MapGeoMatches
from .scene import Camera, GeoCorrespondence, Scene

SHAPES = ("straight", "arc", "city-grid")


@dataclass
class ScenarioSpec:
    shape: str = "city-grid"
    n_keyframes: int = 200
    spacing: float = 2.0
    drift_factor: float = 2.0
    drift_multipliers: tuple | None = None
    points_per_keyframe: int = 15
    pixel_noise: float = 1.0
    anchor_interval: int = 10
    anchor_noise: float = 1.0
    rotation_noise: float = 0.0
    translation_noise: float = 0.0
    matches_per_anchor: int = 40
    outlier_fraction: float = 0.0
    block_length: float = 50.0
    turn_radius: float = 8.0
    arc_turn: float = math.pi / 2
    camera_height: float = 1.5
    max_depth: float = 60.0
    fx: float = 500.0
    fy: float = 500.0
    cx: float = 320.0
    cy: float = 240.0
    width: int = 640
    height: int = 480
    seed: int = 0

    def __post_init__(self):
        if self.shape not in SHAPES:
            raise ValueError(f"unknown trajectory shape {self.shape!r}; expected one of {SHAPES}")
        for name in ("n_keyframes", "points_per_keyframe", "anchor_interval", "matches_per_anchor"):
            if int(getattr(self, name)) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.n_keyframes < 2:
            raise ValueError("a scenario needs at least 2 keyframes")
        if not self.spacing > 0:
            raise ValueError("keyframe spacing must be positive")
        if not self.drift_factor > 0:
            raise ValueError("drift factor must be positive")
        if self.drift_multipliers is not None:
            m = np.asarray(self.drift_multipliers, dtype=float)
            if m.shape != (self.n_keyframes - 1,):
                raise ValueError(f"drift_multipliers needs {self.n_keyframes - 1} entries, got {m.size}")
            if not np.all(m > 0):
                raise ValueError("drift multipliers must be positive")
            self.drift_multipliers = tuple(float(x) for x in m)
        if not 0.0 <= self.outlier_fraction < 1.0:
            raise ValueError("outlier_fraction must be in [0, 1)")

    @property
    def camera(self) -> Camera:
        return Camera(self.fx, self.fy, self.cx, self.cy, self.width, self.height)

    def multipliers(self) -> np.ndarray:
        """Per-step scale multipliers (length ``n_keyframes - 1``)."""
        if self.drift_multipliers is not None:
            return np.array(self.drift_multipliers, dtype=float)
        step = self.drift_factor ** (1.0 / (self.n_keyframes - 1))
        return np.full(self.n_keyframes - 1, step)

    def cumulative_scale(self) -> np.ndarray:
        return np.concatenate([[1.0], np.cumprod(self.multipliers())])

    def to_dict(self) -> dict:
        d = asdict(self)
        if d["drift_multipliers"] is not None:
            d["drift_multipliers"] = list(d["drift_multipliers"])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> ScenarioSpec:
        known = {f.name: f for f in fields(cls)}
        unknown = set(d) - set(known)
        if unknown:
            raise KeyError(f"unknown scenario keys {sorted(unknown)}")
        defaults = cls()
        kw = {}
        for k, v in d.items():
            if k == "drift_multipliers":
                kw[k] = None if v is None else tuple(v)
            else:
                kw[k] = type(getattr(defaults, k))(v)
        return cls(**kw)


@dataclass
class Scenario:
    spec: ScenarioSpec
    ground_truth: Scene
    drifted: Scene
    stream: list[KeyframeInput]
    geo_truth: dict[str, SE3] = field(default_factory=dict)
    geo_map_truth: dict[str, Sim3] = field(default_factory=dict)

    def __iter__(self):
        return iter((self.ground_truth, self.drifted, self.stream))

    @property
    def ground_truth_positions(self) -> dict[int, np.ndarray]:
        return {k: np.array(T.translation) for k, T in self.ground_truth.keyframes.items()}


# ---------------------------------------------------------------------------
# trajectory
# ---------------------------------------------------------------------------


def _heading_rate(spec: ScenarioSpec, length: float, ds: float) -> np.ndarray:
    n = int(math.ceil(length / ds)) + 1
    s = np.arange(n) * ds
    if spec.shape == "straight":
        return np.zeros(n)
    if spec.shape == "arc":
        return np.full(n, spec.arc_turn / max(length, 1e-9))
    # city grid: straight blocks joined by quarter turns, alternating left/right
    turn_len = 0.5 * math.pi * spec.turn_radius
    period = spec.block_length + turn_len
    phase = np.mod(s, period)
    block = np.floor_divide(s, period).astype(int)
    sign = np.where(block % 2 == 0, 1.0, -1.0)
    return np.where(phase >= spec.block_length, sign / spec.turn_radius, 0.0)


def trajectory(spec: ScenarioSpec) -> list[SE3]:
    """Ground-truth world-from-camera poses at arc length ``k * spacing``."""
    length = spec.spacing * (spec.n_keyframes - 1)
    ds = min(0.01, spec.spacing / 10)
    rate = _heading_rate(spec, length, ds)
    heading = np.concatenate([[0.0], np.cumsum(0.5 * (rate[1:] + rate[:-1]) * ds)])
    # heading measured from north (+z) toward east (+x)
    dx, dz = np.sin(heading), np.cos(heading)
    x = np.concatenate([[0.0], np.cumsum(0.5 * (dx[1:] + dx[:-1]) * ds)])
    z = np.concatenate([[0.0], np.cumsum(0.5 * (dz[1:] + dz[:-1]) * ds)])
    s = np.arange(len(rate)) * ds
    sk = np.arange(spec.n_keyframes) * spec.spacing
    xk, zk, hk = np.interp(sk, s, x), np.interp(sk, s, z), np.interp(sk, s, heading)
    return [camera_pose([xk[i], spec.camera_height, zk[i]], hk[i]) for i in range(spec.n_keyframes)]


def camera_pose(center, heading: float, pitch: float = 0.0) -> SE3:
    """Level camera (x right, y down, z forward) looking along ``heading``."""
    fwd = np.array([math.sin(heading) * math.cos(pitch), -math.sin(pitch), math.cos(heading) * math.cos(pitch)])
    down = np.array([0.0, -1.0, 0.0])
    down = down - (down @ fwd) * fwd
    down /= np.linalg.norm(down)
    right = np.cross(down, fwd)
    R = np.column_stack([right, down, fwd])
    return SE3(Rot3.from_matrix(R), np.asarray(center, dtype=float))


# ---------------------------------------------------------------------------
# generation
# ---------------------------------------------------------------------------


def _project(camera: Camera, T: SE3, X: np.ndarray):
    """Pixels and depth of world points in a world-from-camera pose."""
    p = T.inverse().act(X)
    z = p[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        uv = np.column_stack([camera.fx * p[:, 0] / z + camera.cx, camera.fy * p[:, 1] / z + camera.cy])
    return uv, z


def _visible(camera: Camera, uv, z, max_depth, margin=2.0):
    return (z > 1.0) & (z < max_depth) & camera.in_image(uv, margin)


def _sample_points(spec: ScenarioSpec, T: SE3, rng: np.random.Generator) -> np.ndarray:
    cam = spec.camera
    R = T.rotation.matrix()
    fwd = R[:, 2] * np.array([1.0, 0.0, 1.0])
    fwd /= np.linalg.norm(fwd)
    left = np.array([-fwd[2], 0.0, fwd[0]])
    out = []
    need = spec.points_per_keyframe
    for _ in range(50):
        m = 4 * need
        ahead = rng.uniform(8.0, spec.max_depth - 5.0, m)
        lateral = rng.uniform(5.0, 30.0, m) * rng.choice([-1.0, 1.0], m)
        h = rng.uniform(0.0, 10.0, m)
        X = T.translation + ahead[:, None] * fwd + lateral[:, None] * left
        X[:, 1] = h
        uv, z = _project(cam, T, X)
        ok = _visible(cam, uv, z, spec.max_depth, margin=10.0)
        out.extend(X[ok][: need - len(out)])
        if len(out) >= need:
            break
    if len(out) < need:
        raise ValueError("could not place enough visible map points; check camera and corridor settings")
    return np.array(out)


def drifted_poses(gt: list[SE3], cumulative: np.ndarray, rng=None, rotation_noise=0.0,
                  translation_noise=0.0) -> list[SE3]:
    """Chain ground-truth relative motions with translations scaled by ``cumulative[k]``."""
    out = [SE3.identity()]
    for k in range(1, len(gt)):
        rel = gt[k - 1].inverse() @ gt[k]
        R, t = rel.rotation, np.array(rel.translation)
        if rng is not None and rotation_noise > 0:
            R = Rot3.exp(rng.normal(0.0, rotation_noise, 3)) @ R
        if rng is not None and translation_noise > 0:
            t = t + rng.normal(0.0, translation_noise, 3)
        out.append(out[-1] @ SE3(R, cumulative[k] * t))
    return out


def local_map_transform(T_gt: SE3, D: SE3, scale: float) -> Sim3:
    """World-to-map similarity implied at one keyframe: ``D * scale * T_gt^-1``."""
    return se3_to_sim3(D) @ Sim3(Rot3.identity(), np.zeros(3), scale) @ se3_to_sim3(T_gt).inverse()


def triangulate(camera: Camera, poses: list[SE3], obs_k, obs_p, obs_px, n_points: int,
                min_views: int = 2, min_parallax: float = math.radians(1.0)):
    """Least-squares ray intersection of each point's viewing rays.

    Returns ``(xyz, ok)``; ``ok`` is False for points with fewer than
    ``min_views`` rays or too little angular spread to be located.
    """
    Rk = np.array([P.rotation.matrix() for P in poses])[obs_k]
    Ck = np.array([P.translation for P in poses])[obs_k]
    rays = np.column_stack([(obs_px[:, 0] - camera.cx) / camera.fx, (obs_px[:, 1] - camera.cy) / camera.fy,
                            np.ones(len(obs_px))])
    b = np.einsum("nij,nj->ni", Rk, rays)
    b /= np.linalg.norm(b, axis=1, keepdims=True)
    M = np.eye(3)[None] - b[:, :, None] * b[:, None, :]
    A = np.zeros((n_points, 3, 3))
    r = np.zeros((n_points, 3))
    np.add.at(A, obs_p, M)
    np.add.at(r, obs_p, np.einsum("nij,nj->ni", M, Ck))
    count = np.bincount(obs_p, minlength=n_points)
    ev = np.linalg.eigvalsh(A)
    ok = (count >= min_views) & (ev[:, 0] > np.maximum(count, 1) * math.sin(min_parallax) ** 2 / 2)
    X = np.zeros((n_points, 3))
    X[ok] = np.linalg.solve(A[ok], r[ok][:, :, None])[:, :, 0]
    return X, ok


def generate(spec: ScenarioSpec) -> Scenario:
    """Ground truth, drifted raw scene and the per-keyframe input stream."""
    rng = np.random.default_rng(spec.seed)
    cam = spec.camera
    N = spec.n_keyframes
    gt = trajectory(spec)
    cum = spec.cumulative_scale()
    noise_rng = np.random.default_rng([spec.seed, 1])
    D = drifted_poses(gt, cum, noise_rng, spec.rotation_noise, spec.translation_noise)
    A = [local_map_transform(gt[k], D[k], cum[k]) for k in range(N)]

    # map points in the world, each created (first seen) at one keyframe
    Xw, ref = [], []
    for k in range(N):
        P = _sample_points(spec, gt[k], rng)
        Xw.append(P)
        ref.append(np.full(len(P), k))
    Xw = np.concatenate(Xw)
    ref = np.concatenate(ref)

    # observations: every keyframe at or after a point's creation that sees it
    obs_k, obs_p, obs_px = [], [], []
    idx = np.arange(len(Xw))
    for k in range(N):
        alive = ref <= k
        uv, z = _project(cam, gt[k], Xw[alive])
        vis = _visible(cam, uv, z, spec.max_depth)
        ids = idx[alive][vis]
        px = uv[vis] + rng.normal(0.0, spec.pixel_noise, (len(ids), 2)) if spec.pixel_noise > 0 else uv[vis]
        obs_k.append(np.full(len(ids), k))
        obs_p.append(ids)
        obs_px.append(px)
    obs_k, obs_p, obs_px = np.concatenate(obs_k), np.concatenate(obs_p), np.concatenate(obs_px)

    # raw map points are triangulated from the drifted cameras, as a tracker would
    Xm, ok = triangulate(cam, D, obs_k, obs_p, obs_px, len(Xw))
    keep = np.flatnonzero(ok)
    remap = np.full(len(Xw), -1, dtype=np.int64)
    remap[keep] = np.arange(len(keep))
    Xw, Xm, ref = Xw[keep], Xm[keep], ref[keep]
    pid = np.arange(len(keep), dtype=np.int64)
    o = remap[obs_p] >= 0
    obs_k, obs_p, obs_px = obs_k[o], remap[obs_p[o]], obs_px[o]

    truth = Scene(cam)
    raw = Scene(cam)
    for k in range(N):
        truth.add_keyframe(k, gt[k])
        raw.add_keyframe(k, D[k])
    truth.add_points(pid, Xw, ref)
    raw.add_points(pid, Xm, ref)
    truth.add_observations(obs_k, obs_p, obs_px)
    raw.add_observations(obs_k, obs_p, obs_px)
    truth.initialized = True

    # geo-tagged images near every anchor_interval-th keyframe
    geo_rng = np.random.default_rng([spec.seed, 2])
    geo = {}
    geo_truth, geo_map_truth = {}, {}
    first = spec.anchor_interval // 2
    for k in range(first, N, spec.anchor_interval):
        gid = f"geo{k:05d}"
        R = gt[k].rotation.matrix()
        fwd = R[:, 2]
        right = R[:, 0]
        heading = math.atan2(fwd[0], fwd[2]) + geo_rng.uniform(-0.08, 0.08)
        center = gt[k].translation + geo_rng.uniform(-2.0, 2.0) * fwd + geo_rng.uniform(-1.0, 1.0) * right
        G = camera_pose(center, heading)
        alive = ref <= k
        uv, z = _project(cam, G, Xw[alive])
        vis = np.flatnonzero(_visible(cam, uv, z, spec.max_depth, margin=5.0))
        if len(vis) < 8:
            continue
        pick = np.sort(geo_rng.choice(vis, min(spec.matches_per_anchor, len(vis)), replace=False))
        px = uv[pick] + (geo_rng.normal(0.0, spec.pixel_noise, (len(pick), 2)) if spec.pixel_noise > 0 else 0.0)
        n_out = int(round(spec.outlier_fraction * len(pick)))
        if n_out:
            bad = geo_rng.choice(len(pick), n_out, replace=False)
            px[bad] = geo_rng.uniform([0, 0], [spec.width, spec.height], (n_out, 2))
        ids = pid[alive][pick]
        tag = SE3(G.rotation, G.translation + geo_rng.normal(0.0, spec.anchor_noise, 3))
        geo[k] = GeoObservation(MapGeoMatches(gid, cam, [(int(i), p) for i, p in zip(ids, px)]), tag)
        geo_truth[gid] = G
        geo_map_truth[gid] = A[k] @ se3_to_sim3(G)
        truth.add_geo_correspondence(GeoCorrespondence(gid, k, se3_to_sim3(G), tag))
        raw.add_geo_correspondence(GeoCorrespondence(gid, k, geo_map_truth[gid], tag))

    stream = []
    for k in range(N):
        new = ref == k
        o = obs_k == k
        stream.append(KeyframeInput(k, D[k], pid[new], Xm[new], obs_p[o], obs_px[o], geo.get(k)))
    return Scenario(spec, truth, raw, stream, geo_truth, geo_map_truth)


# ---------------------------------------------------------------------------
# brute-force cost oracles
# ---------------------------------------------------------------------------


def _quat_matrix(q) -> np.ndarray:
    w, x, y, z = np.asarray(q, dtype=float) / np.linalg.norm(q)
    return np.array(
        [
            [w * w + x * x - y * y - z * z, 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), w * w - x * x + y * y - z * z, 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), w * w - x * x - y * y + z * z],
        ]
    )


def _sim_matrix(S) -> np.ndarray:
    M = np.eye(4)
    M[:3, :3] = S.scale * _quat_matrix(S.rotation.q) if hasattr(S, "scale") else _quat_matrix(S.rotation.q)
    M[:3, 3] = S.translation
    return M


def _sim3_log_parts(M: np.ndarray):
    L = np.real(logm(M))
    A = L[:3, :3]
    sigma = np.trace(A) / 3.0
    W = 0.5 * (A - A.T)
    omega = np.array([W[2, 1], W[0, 2], W[1, 0]])
    return omega, sigma, L[:3, 3]


def _sim3_log_norm2(M: np.ndarray) -> float:
    omega, sigma, nu = _sim3_log_parts(M)
    return float(omega @ omega + sigma * sigma + nu @ nu)


def oracle_cost_pgo(graph) -> float:
    """E_PGO of a pose graph evaluated with dense matrices and a matrix logarithm."""
    kf = {k: _sim_matrix(S) for k, S in graph.keyframe_nodes.items()}
    geo = {k: _sim_matrix(S) for k, S in graph.geo_nodes.items()}
    total = 0.0
    for i, j, dS in graph.rel_edges_kf:
        M = _sim_matrix(dS) @ np.linalg.inv(kf[i]) @ kf[j]
        total += graph.lambda1 * _sim3_log_norm2(M)
    for i, j, dS in graph.boundary_edges:
        omega = _sim3_log_parts(_sim_matrix(dS) @ np.linalg.inv(kf[i]) @ kf[j])[0]
        total += graph.lambda1 * float(omega @ omega)
    for k, l, dS in graph.rel_edges_geo:
        M = _sim_matrix(dS) @ np.linalg.inv(kf[k]) @ geo[l]
        total += graph.lambda2 * _sim3_log_norm2(M)
    for m, y in graph.anchor_edges:
        d = geo[m][:3, 3] - np.asarray(y, dtype=float)
        total += graph.lambda3 * float(d @ d)
    return total


def oracle_cost_ba(scene: Scene, spec) -> float:
    """E_BA for a problem spec, one observation at a time in homogeneous coordinates."""
    cam = scene.camera
    K = np.array([[cam.fx, 0.0, cam.cx], [0.0, cam.fy, cam.cy], [0.0, 0.0, 1.0]])
    d = spec.huber_delta
    wanted = set(int(p) for p in np.asarray(spec.points).tolist())
    total = 0.0
    for k, p, px in zip(scene.obs_keyframe.tolist(), scene.obs_point.tolist(), scene.obs_pixel):
        if p not in wanted:
            continue
        T = np.linalg.inv(_sim_matrix(scene.keyframes[k]))
        Xh = np.append(scene.point(p), 1.0)
        h = K @ (T @ Xh)[:3]
        if h[2] <= 1e-6:
            continue  # behind the camera: not part of the problem
        r = px - h[:2] / h[2]
        s = float(r @ r)
        total += s if s <= d * d else 2.0 * d * math.sqrt(s) - d * d
    for k, offset, y, _ in spec.anchors:
        w = _sim_matrix(scene.keyframes[k]) @ np.append(offset, 1.0)
        e = w[:3] - np.asarray(y, dtype=float)
        total += spec.weight * float(e @ e)
    return total
