"""Incremental driver: localise geo images, initialise once, then correct per correspondence.

For each incoming keyframe the driver appends it (with its new map points
and observations) to the scene, tries to localise an attached geo-tagged
image, and on success records a map/world correspondence.  The
``init_index``-th correspondence triggers the one-off initialisation;
every later one triggers pose graph optimisation on the newest window,
then geo-constrained bundle adjustment.

Incoming keyframes are expressed in the raw (uncorrected) map.  The
driver carries the most recent correction forward so that new keyframes
and points land next to the already corrected part of the map.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.transform import Rotation

from .ba import BaOptions, optimize_ba
from .initialization import DegenerateGeometryError, RansacOptions, initialize_scene
from .manifold import SE3, Rot3, Sim3, se3_to_sim3
from .pgo import PgoOptions, build_window, optimize_window
from .pnp import MapGeoMatches, PnPError, PnpOptions, localize_geo_image, make_geo_correspondence
from .scene import Camera, Scene
from .solver import SolveReport, SolverOptions

log = logging.getLogger(__name__)

MODES = ("init", "init+pgo", "init+ba", "full")


@dataclass
class PipelineConfig:
    init_index: int = 4
    window_size: int = 3
    mode: str = "full"
    pgo: PgoOptions = field(default_factory=PgoOptions)
    ba: BaOptions = field(default_factory=BaOptions)
    ransac: RansacOptions = field(default_factory=RansacOptions)
    pnp: PnpOptions = field(default_factory=PnpOptions)
    solver: SolverOptions = field(default_factory=SolverOptions)
    camera_up: tuple = (0.0, -1.0, 0.0)
    height_offset: float = 0.0

    def __post_init__(self):
        if self.init_index < 2:
            raise ValueError("init_index must be at least 2")
        if self.window_size < 2:
            raise ValueError("window_size must be at least 2")
        if self.mode not in MODES:
            raise ValueError(f"unknown pipeline mode {self.mode!r}; expected one of {MODES}")

    @property
    def runs_pgo(self) -> bool:
        return self.mode in ("init+pgo", "full")

    @property
    def runs_ba(self) -> bool:
        return self.mode in ("init+ba", "full")


@dataclass
class GeoObservation:
    """A geo-tagged image seen from a keyframe: its pixel matches and its geo-tag pose."""

    matches: MapGeoMatches
    geotag: object  # SE3 world pose or GeoAnchor


@dataclass
class KeyframeInput:
    keyframe_id: int
    pose: SE3
    point_ids: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    point_xyz: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    obs_point_ids: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    obs_pixels: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))
    geo: GeoObservation | None = None


@dataclass
class CorrectionEvent:
    keyframe_id: int
    kind: str  # none | localized | initialized | corrected
    geo_id: str | None = None
    inliers: int | None = None
    window: list[int] | None = None
    pgo: SolveReport | None = None
    ba: SolveReport | None = None
    note: str = ""

    def as_dict(self) -> dict:
        d = {"keyframe": self.keyframe_id, "event": self.kind}
        if self.geo_id is not None:
            d["geo_id"] = self.geo_id
        if self.inliers is not None:
            d["inliers"] = self.inliers
        if self.window is not None:
            d["window"] = list(self.window)
        if self.pgo is not None:
            d["pgo"] = self.pgo.as_dict()
        if self.ba is not None:
            d["ba"] = self.ba.as_dict()
        if self.note:
            d["note"] = self.note
        return d


class Pipeline:
    """Owns one scene and mutates it as keyframes arrive."""

    def __init__(self, camera: Camera, config: PipelineConfig | None = None):
        self.config = config or PipelineConfig()
        self.scene = Scene(camera)
        self.events: list[CorrectionEvent] = []
        self._raw_last: SE3 | None = None
        self._raw_xyz = np.zeros((0, 3))  # raw position of every scene point, by row

    def _carry(self) -> Sim3:
        """Similarity taking the raw map onto the corrected map near the newest keyframe.

        Fitted to the points the newest keyframe observes (raw vs current
        position); falls back to the keyframe's pose and scale when it
        sees fewer than three points.
        """
        if self._raw_last is None:
            return Sim3.identity()
        scene = self.scene
        k = next(reversed(scene.keyframes))
        if not scene.initialized:
            return Sim3.identity()
        rows = scene.point_rows(scene.obs_point[scene.obs_keyframe == k])
        if len(rows) >= 3:
            try:
                return fit_similarity(self._raw_xyz[rows], scene.point_xyz[rows], trim=True)
            except DegenerateGeometryError:
                pass
        P = scene.keyframes[k]
        cur = Sim3(P.rotation, P.translation, scene.keyframe_scale[k])
        return cur @ se3_to_sim3(self._raw_last).inverse()

    def _up_hint(self) -> np.ndarray:
        up = np.asarray(self.config.camera_up, dtype=float)
        v = sum(P.rotation.act(up) for P in self.scene.keyframes.values())
        return v / np.linalg.norm(v)

    def ingest_keyframe(self, kf: KeyframeInput) -> CorrectionEvent:
        scene = self.scene
        k = int(kf.keyframe_id)
        if scene.keyframes and k <= next(reversed(scene.keyframes)):
            raise ValueError(f"keyframe {k} arrived out of order (last is {next(reversed(scene.keyframes))})")
        C = self._carry()
        S = C @ se3_to_sim3(kf.pose)
        scene.add_keyframe(k, S.to_se3(), S.scale)
        self._raw_last = kf.pose
        if len(kf.point_ids):
            raw = np.asarray(kf.point_xyz, dtype=float).reshape(-1, 3)
            scene.add_points(kf.point_ids, C.act(raw), k)
            self._raw_xyz = np.concatenate([self._raw_xyz, raw])
        if len(kf.obs_point_ids):
            scene.add_observations(k, kf.obs_point_ids, kf.obs_pixels)

        if kf.geo is None:
            return self._emit(CorrectionEvent(k, "none"))
        ev = self._localize(k, kf.geo)
        if ev.kind == "none":
            return self._emit(ev)

        n = len(scene.geo_correspondences)
        cfg = self.config
        if not scene.initialized:
            if n >= cfg.init_index:
                try:
                    initialize_scene(scene, cfg.ransac, cfg.height_offset, self._up_hint(), cfg.solver)
                    ev.kind = "initialized"
                except DegenerateGeometryError as exc:
                    log.info("initialisation deferred at keyframe %d: %s", k, exc)
                    ev.note = f"initialization deferred: {exc}"
            return self._emit(ev)

        if not (cfg.runs_pgo or cfg.runs_ba):
            return self._emit(ev)
        window = self._window()
        ev.window = list(window.keyframe_range)
        if cfg.runs_pgo:
            ev.pgo = optimize_window(scene, window, cfg.pgo, cfg.solver)
        if cfg.runs_ba:
            if cfg.runs_pgo:
                window = self._window()
            backup = scene.copy()
            try:
                ev.ba = optimize_ba(scene, window, cfg.ba, cfg.solver)
            except (ValueError, FloatingPointError) as exc:
                # keep the pose-graph result, drop the BA step
                log.warning("bundle adjustment skipped at keyframe %d: %s", k, exc)
                self.scene = scene = backup
                ev.note = f"ba skipped: {exc}"
        ev.kind = "corrected"
        return self._emit(ev)

    def _window(self):
        cfg = self.config
        return build_window(self.scene, cfg.window_size, cfg.pgo.covisibility_threshold, cfg.pgo.full_history,
                            cfg.pgo.fix_boundary)

    def _localize(self, k: int, geo: GeoObservation) -> CorrectionEvent:
        scene = self.scene
        gid = geo.matches.geo_id
        try:
            pose, inliers = localize_geo_image(scene, geo.matches, scene.keyframes[k], self.config.pnp, self.config.solver)
        except (PnPError, DegenerateGeometryError, KeyError) as exc:
            log.info("geo image %s dropped at keyframe %d: %s", gid, k, exc)
            return CorrectionEvent(k, "none", geo_id=gid, note=f"localization failed: {exc}")
        scene.add_geo_correspondence(make_geo_correspondence(pose, geo.geotag, k, gid))
        return CorrectionEvent(k, "localized", geo_id=gid, inliers=inliers)

    def _emit(self, ev: CorrectionEvent) -> CorrectionEvent:
        self.events.append(ev)
        return ev


def fit_similarity(src, dst, trim: bool = False) -> Sim3:
    """Least-squares similarity with ``dst ~ S * src`` (closed form, Umeyama).

    With ``trim`` the fit is repeated once without points whose residual
    exceeds three times the median residual.
    """
    src = np.asarray(src, dtype=float).reshape(-1, 3)
    dst = np.asarray(dst, dtype=float).reshape(-1, 3)
    S = _umeyama(src, dst)
    if trim and len(src) > 6:
        r = np.linalg.norm(S.act(src) - dst, axis=1)
        keep = r <= 3.0 * np.median(r) + 1e-12
        if 3 <= keep.sum() < len(src):
            S = _umeyama(src[keep], dst[keep])
    return S


def _umeyama(src: np.ndarray, dst: np.ndarray) -> Sim3:
    mu_s, mu_d = src.mean(axis=0), dst.mean(axis=0)
    a, b = src - mu_s, dst - mu_d
    var = float(np.sum(a * a))
    if var <= 1e-300:
        raise DegenerateGeometryError("similarity fit needs spread-out points")
    rot, _ = Rotation.align_vectors(b, a)
    R = Rot3(np.roll(rot.as_quat(), 1))
    s = float(np.sum(b * R.act(a)) / var)
    if not (s > 0 and np.isfinite(s)):
        raise DegenerateGeometryError("similarity fit produced a non-positive scale")
    return Sim3(R, mu_d - s * R.act(mu_s), s)


def run(stream, camera: Camera, config: PipelineConfig | None = None) -> Pipeline:
    """Feed a whole keyframe stream through a fresh pipeline."""
    p = Pipeline(camera, config)
    for kf in stream:
        p.ingest_keyframe(kf)
    return p


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------


def _positions(source) -> dict[int, np.ndarray]:
    if isinstance(source, Scene):
        return {k: np.array(T.translation) for k, T in source.keyframes.items()}
    out = {}
    for k, v in dict(source).items():
        out[int(k)] = np.array(v.translation) if hasattr(v, "translation") else np.asarray(v, dtype=float).reshape(3)
    return out


def scale_factor_trace(scene, ground_truth, window: int = 5) -> list[tuple[int, float]]:
    """Estimated over true inter-keyframe step length, median-filtered over ``window`` steps.

    Each factor is attributed to the later keyframe of its step.  Steps
    whose true length is below 1e-6 m are skipped.  The median window is
    centred and shrinks symmetrically near the ends.
    """
    est = _positions(scene)
    gt = _positions(ground_truth)
    ids = sorted(set(est) & set(gt))
    raw = []
    for a, b in zip(ids[:-1], ids[1:]):
        g = np.linalg.norm(gt[b] - gt[a])
        if g < 1e-6:
            continue
        raw.append((b, float(np.linalg.norm(est[b] - est[a]) / g)))
    if not raw:
        return []
    vals = np.array([r[1] for r in raw])
    h = window // 2
    n = len(vals)
    out = []
    for i, (k, _) in enumerate(raw):
        r = min(h, i, n - 1 - i)
        out.append((k, float(np.median(vals[i - r: i + r + 1]))))
    return out


def ate2d_errors(scene, ground_truth) -> dict[int, float]:
    """Per-keyframe distance in the xz ground plane."""
    est = _positions(scene)
    gt = _positions(ground_truth)
    ids = sorted(set(est) & set(gt))
    if not ids:
        raise ValueError("estimate and ground truth share no keyframe ids")
    return {k: float(np.hypot(est[k][0] - gt[k][0], est[k][2] - gt[k][2])) for k in ids}


def evaluate_ate2d(scene, ground_truth) -> tuple[float, float]:
    """Mean and (population) standard deviation of the 2D keyframe position error."""
    e = np.array(list(ate2d_errors(scene, ground_truth).values()))
    return float(e.mean()), float(e.std())
