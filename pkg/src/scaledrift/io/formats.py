"""On-disk formats: scene JSON, keyframe stream JSON-lines, trajectories, config.

Every JSON document and JSON-lines header carries ``schema`` and
``version`` keys; CSV outputs start with a ``# schema ...`` comment line.
All writes go to a temporary file in the target directory and are then
renamed into place.
"""

from __future__ import annotations

import csv
import dataclasses
import io
import json
import math
import os
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..manifold import SE3, Rot3, Sim3
from ..pipeline import CorrectionEvent, GeoObservation, KeyframeInput, PipelineConfig
from ..pnp import MapGeoMatches
from ..scene import Camera, GeoCorrespondence, Scene
from .geodesy import GeoAnchor, LocalOrigin

SCHEMA_VERSION = 1


class FormatError(ValueError):
    """Malformed input; carries the file, line and column when known."""

    def __init__(self, message: str, path=None, line: int | None = None, column: int | None = None):
        self.path, self.line, self.column = path, line, column
        where = str(path) if path is not None else "<input>"
        if line is not None:
            where += f":{line}"
            if column is not None:
                where += f":{column}"
        super().__init__(f"{where}: {message}")


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------


def atomic_write_text(path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _read_text(path) -> str:
    try:
        return Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise FormatError(f"cannot read file ({exc.strerror or exc})", path) from None


def _parse_json(text: str, path, line_offset: int = 0):
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise FormatError(exc.msg, path, exc.lineno + line_offset, exc.colno) from None


def _check_header(doc, schema: str, path, line: int | None = None) -> None:
    if not isinstance(doc, dict) or doc.get("schema") != schema:
        raise FormatError(f"not a {schema} document (missing or wrong 'schema' key)", path, line)
    v = doc.get("version")
    if v != SCHEMA_VERSION:
        raise FormatError(f"{schema} version {v!r} is not supported (expected {SCHEMA_VERSION})", path, line)


def _pose_to_list(T) -> list[float]:
    return [float(x) for x in np.concatenate([T.rotation.q, T.translation])]


def _pose_from_list(v, path=None, line=None) -> SE3:
    a = np.asarray(v, dtype=float)
    if a.shape != (7,) or not np.all(np.isfinite(a)):
        raise FormatError("pose must be 7 finite numbers (qw qx qy qz tx ty tz)", path, line)
    return SE3(Rot3(a[:4]), a[4:])


def _camera_to_dict(cam: Camera) -> dict:
    return dataclasses.asdict(cam)


def _camera_from_dict(d: dict, path=None, line=None) -> Camera:
    try:
        return Camera(float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]),
                      int(d.get("width", 0)), int(d.get("height", 0)))
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"bad camera record: {exc}", path, line) from None


# ---------------------------------------------------------------------------
# scene
# ---------------------------------------------------------------------------


def scene_to_dict(scene: Scene) -> dict:
    return {
        "schema": "scaledrift.scene",
        "version": SCHEMA_VERSION,
        "camera": _camera_to_dict(scene.camera),
        "initialized": bool(scene.initialized),
        "keyframes": [
            {"id": k, "pose": _pose_to_list(T), "scale": float(scene.keyframe_scale[k])}
            for k, T in scene.keyframes.items()
        ],
        "points": {
            "ids": scene.point_ids.tolist(),
            "xyz": scene.point_xyz.tolist(),
            "ref": scene.point_ref.tolist(),
        },
        "observations": {
            "keyframe": scene.obs_keyframe.tolist(),
            "point": scene.obs_point.tolist(),
            "pixel": scene.obs_pixel.tolist(),
        },
        "geo_correspondences": [
            {
                "geo_id": c.geo_id,
                "keyframe": c.keyframe_id,
                "map_pose": _pose_to_list(c.map_pose) + [float(c.map_pose.scale)],
                "world_pose": _pose_to_list(c.world_pose),
            }
            for c in scene.geo_correspondences
        ],
    }


def scene_from_dict(doc: dict, path=None) -> Scene:
    _check_header(doc, "scaledrift.scene", path)
    try:
        scene = Scene(_camera_from_dict(doc["camera"], path))
        for kf in doc["keyframes"]:
            scene.add_keyframe(int(kf["id"]), _pose_from_list(kf["pose"], path), float(kf.get("scale", 1.0)))
        pts = doc["points"]
        scene.add_points(np.asarray(pts["ids"], dtype=np.int64), np.asarray(pts["xyz"], dtype=float).reshape(-1, 3),
                         np.asarray(pts["ref"], dtype=np.int64))
        obs = doc["observations"]
        scene.add_observations(np.asarray(obs["keyframe"], dtype=np.int64), np.asarray(obs["point"], dtype=np.int64),
                               np.asarray(obs["pixel"], dtype=float).reshape(-1, 2))
        for c in doc.get("geo_correspondences", []):
            m = np.asarray(c["map_pose"], dtype=float)
            map_pose = Sim3(Rot3(m[:4]), m[4:7], float(m[7]))
            scene.add_geo_correspondence(
                GeoCorrespondence(str(c["geo_id"]), int(c["keyframe"]), map_pose, _pose_from_list(c["world_pose"], path)))
        scene.initialized = bool(doc.get("initialized", False))
    except FormatError:
        raise
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"invalid scene content: {exc}", path) from None
    return scene


def save_scene(scene: Scene, path) -> None:
    atomic_write_text(path, json.dumps(scene_to_dict(scene), indent=1) + "\n")


def load_scene(path) -> Scene:
    return scene_from_dict(_parse_json(_read_text(path), path), path)


# ---------------------------------------------------------------------------
# keyframe stream (JSON lines)
# ---------------------------------------------------------------------------


@dataclass
class StreamFile:
    camera: Camera
    keyframes: list[KeyframeInput]
    origin: LocalOrigin | None = None

    def __iter__(self):
        return iter(self.keyframes)


def _geotag_to_dict(geotag, geo_id: str, origin: LocalOrigin | None) -> dict:
    if isinstance(geotag, GeoAnchor):
        a = geotag
    else:
        if origin is None:
            raise ValueError("writing an SE3 geo-tag needs a local origin")
        a = GeoAnchor.from_world_pose(geo_id, geotag, origin)
    d = {"id": a.id, "easting": a.easting, "northing": a.northing, "zone": a.zone, "height": a.height}
    for key in ("heading", "pitch", "roll"):
        if getattr(a, key) is not None:
            d[key] = getattr(a, key)
    return d


def keyframe_to_record(kf: KeyframeInput, origin: LocalOrigin | None = None) -> dict:
    rec = {
        "keyframe": int(kf.keyframe_id),
        "pose": _pose_to_list(kf.pose),
        "new_points": {"ids": np.asarray(kf.point_ids).tolist(), "xyz": np.asarray(kf.point_xyz).tolist()},
        "observations": {"point": np.asarray(kf.obs_point_ids).tolist(), "pixel": np.asarray(kf.obs_pixels).tolist()},
    }
    if kf.geo is not None:
        m = kf.geo.matches
        rec["geo"] = {
            "geo_id": m.geo_id,
            "geotag": _geotag_to_dict(kf.geo.geotag, m.geo_id, origin),
            "matches": [[int(pid), float(px[0]), float(px[1])] for pid, px in m.matches],
        }
    return rec


def keyframe_from_record(rec: dict, camera: Camera, origin: LocalOrigin | None, path=None, line=None) -> KeyframeInput:
    try:
        np_ = rec.get("new_points", {})
        ob = rec.get("observations", {})
        geo = None
        if rec.get("geo") is not None:
            g = rec["geo"]
            tag = GeoAnchor.from_dict(g["geotag"], origin)
            matches = [(int(m[0]), np.array([float(m[1]), float(m[2])])) for m in g["matches"]]
            geo = GeoObservation(MapGeoMatches(str(g["geo_id"]), camera, matches), tag)
        return KeyframeInput(
            int(rec["keyframe"]),
            _pose_from_list(rec["pose"], path, line),
            np.asarray(np_.get("ids", []), dtype=np.int64).reshape(-1),
            np.asarray(np_.get("xyz", []), dtype=float).reshape(-1, 3),
            np.asarray(ob.get("point", []), dtype=np.int64).reshape(-1),
            np.asarray(ob.get("pixel", []), dtype=float).reshape(-1, 2),
            geo,
        )
    except FormatError:
        raise
    except (KeyError, TypeError, ValueError, IndexError) as exc:
        raise FormatError(f"invalid keyframe record: {exc}", path, line) from None


def save_stream(path, camera: Camera, keyframes, origin: LocalOrigin | None = None) -> None:
    head = {"schema": "scaledrift.stream", "version": SCHEMA_VERSION, "camera": _camera_to_dict(camera)}
    if origin is not None:
        head["origin"] = origin.to_dict()
    lines = [json.dumps(head)]
    lines += [json.dumps(keyframe_to_record(kf, origin)) for kf in keyframes]
    atomic_write_text(path, "\n".join(lines) + "\n")


def load_stream(path) -> StreamFile:
    text = _read_text(path)
    lines = text.split("\n")
    if text and not text.endswith("\n"):
        raise FormatError("file is truncated (last line has no newline)", path, len(lines))
    head = None
    keyframes: list[KeyframeInput] = []
    camera = origin = None
    last = None
    for i, raw in enumerate(lines, start=1):
        if not raw.strip():
            continue
        doc = _parse_json(raw, path, i - 1)
        if head is None:
            _check_header(doc, "scaledrift.stream", path, i)
            head = doc
            if "camera" not in doc:
                raise FormatError("stream header has no camera", path, i)
            camera = _camera_from_dict(doc["camera"], path, i)
            origin = LocalOrigin.from_dict(doc["origin"]) if doc.get("origin") else None
            continue
        if not isinstance(doc, dict):
            raise FormatError("record must be a JSON object", path, i)
        kf = keyframe_from_record(doc, camera, origin, path, i)
        if last is not None and kf.keyframe_id <= last:
            raise FormatError(f"keyframe {kf.keyframe_id} is out of order (previous {last})", path, i)
        last = kf.keyframe_id
        keyframes.append(kf)
    if head is None:
        raise FormatError("empty stream (no header line)", path, 1)
    return StreamFile(camera, keyframes, origin)


def load_correspondences(path) -> dict[int, GeoObservation]:
    """Geo observations of a stream file, keyed by keyframe id."""
    return {kf.keyframe_id: kf.geo for kf in load_stream(path).keyframes if kf.geo is not None}


def save_events(path, events) -> None:
    head = {"schema": "scaledrift.events", "version": SCHEMA_VERSION}
    lines = [json.dumps(head)] + [json.dumps(e.as_dict() if isinstance(e, CorrectionEvent) else e) for e in events]
    atomic_write_text(path, "\n".join(lines) + "\n")


def load_events(path) -> list[dict]:
    out = []
    for i, raw in enumerate(_read_text(path).splitlines(), start=1):
        if not raw.strip():
            continue
        doc = _parse_json(raw, path, i - 1)
        if i == 1:
            _check_header(doc, "scaledrift.events", path, i)
        else:
            out.append(doc)
    return out


# ---------------------------------------------------------------------------
# trajectories
# ---------------------------------------------------------------------------


@dataclass
class Trajectory:
    """Ordered world-from-camera poses keyed by keyframe id (TUM: the timestamp)."""

    ids: list[int]
    poses: list[SE3]
    timestamps: list[float] | None = None

    def as_dict(self) -> dict[int, SE3]:
        return dict(zip(self.ids, self.poses))

    @classmethod
    def from_scene(cls, scene: Scene) -> "Trajectory":
        return cls(list(scene.keyframes), list(scene.keyframes.values()))


def _g(x: float) -> str:
    return repr(float(x))


def format_trajectory(traj: Trajectory, fmt: str = "tum") -> str:
    out = io.StringIO()
    if fmt == "kitti":
        for T in traj.poses:
            M = np.column_stack([T.rotation.matrix(), T.translation])
            out.write(" ".join(_g(v) for v in M.ravel()) + "\n")
    elif fmt == "tum":
        stamps = traj.timestamps if traj.timestamps is not None else [float(i) for i in traj.ids]
        for t, T in zip(stamps, traj.poses):
            w, x, y, z = T.rotation.q
            vals = [t, *T.translation, x, y, z, w]
            out.write(" ".join(_g(v) for v in vals) + "\n")
    else:
        raise ValueError(f"unknown trajectory format {fmt!r}; expected 'kitti' or 'tum'")
    return out.getvalue()


def save_trajectory(path, traj: Trajectory, fmt: str = "tum") -> None:
    atomic_write_text(path, format_trajectory(traj, fmt))


def load_trajectory(path, fmt: str | None = None) -> Trajectory:
    """Read KITTI (12 numbers per line) or TUM (8 numbers per line); ``fmt=None`` detects."""
    ids, poses, stamps = [], [], []
    for i, raw in enumerate(_read_text(path).splitlines(), start=1):
        s = raw.strip()
        if not s or s.startswith("#"):
            continue
        parts = s.split()
        try:
            vals = [float(p) for p in parts]
        except ValueError:
            bad = next(p for p in parts if not _is_float(p))
            raise FormatError(f"not a number: {bad!r}", path, i, raw.index(bad) + 1) from None
        kind = fmt or {12: "kitti", 8: "tum"}.get(len(vals))
        if kind == "kitti" and len(vals) == 12:
            M = np.array(vals).reshape(3, 4)
            poses.append(SE3(Rot3.from_matrix(M[:, :3]), M[:, 3]))
            ids.append(len(ids))
        elif kind == "tum" and len(vals) == 8:
            t, tx, ty, tz, qx, qy, qz, qw = vals
            poses.append(SE3(Rot3([qw, qx, qy, qz]), [tx, ty, tz]))
            stamps.append(t)
            ids.append(int(t) if float(t).is_integer() else len(ids))
        else:
            raise FormatError(f"expected 12 (KITTI) or 8 (TUM) numbers, got {len(vals)}", path, i, 1)
        if not all(math.isfinite(v) for v in vals):
            raise FormatError("non-finite value", path, i, 1)
    return Trajectory(ids, poses, stamps or None)


def _is_float(s: str) -> bool:
    try:
        float(s)
        return True
    except ValueError:
        return False


def write_csv(path, schema: str, header: list[str], rows) -> None:
    buf = io.StringIO()
    buf.write(f"# schema {schema} version {SCHEMA_VERSION}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([repr(v) if isinstance(v, float) else v for v in r])
    atomic_write_text(path, buf.getvalue())


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------


def config_items(config=None, prefix: str = "") -> dict[str, object]:
    """Flat ``dotted.key -> value`` view of a (nested) options dataclass."""
    config = PipelineConfig() if config is None else config
    out = {}
    for f in dataclasses.fields(config):
        v = getattr(config, f.name)
        if dataclasses.is_dataclass(v):
            out.update(config_items(v, f"{prefix}{f.name}."))
        else:
            out[f"{prefix}{f.name}"] = v
    return out


def _coerce(text: str, like, key: str):
    text = text.strip()
    if isinstance(like, bool):
        low = text.lower()
        if low in ("true", "yes", "on", "1"):
            return True
        if low in ("false", "no", "off", "0"):
            return False
        raise ValueError(f"{key}: expected a boolean, got {text!r}")
    if isinstance(like, int):
        return int(text)
    if isinstance(like, float):
        return float(text)
    if isinstance(like, tuple):
        parts = [p for p in text.replace(",", " ").split() if p]
        return tuple(float(p) for p in parts)
    if hasattr(like, "value"):  # enum
        return type(like)(text)
    return text


def _set_dotted(obj, key: str, text: str):
    head, _, rest = key.partition(".")
    names = {f.name for f in dataclasses.fields(obj)}
    if head not in names:
        raise KeyError(key)
    cur = getattr(obj, head)
    if rest:
        if not dataclasses.is_dataclass(cur):
            raise KeyError(key)
        return dataclasses.replace(obj, **{head: _set_dotted(cur, rest, text)})
    if dataclasses.is_dataclass(cur):
        raise KeyError(key)
    return dataclasses.replace(obj, **{head: _coerce(text, cur, key)})


def parse_config(text: str, path=None, overrides=(), base: PipelineConfig | None = None) -> PipelineConfig:
    """``key = value`` lines (``#`` comments) over the defaults, then ``key=value`` overrides."""
    cfg = base or PipelineConfig()
    entries = []
    for i, raw in enumerate(text.splitlines(), start=1):
        s = raw.split("#", 1)[0].strip()
        if not s:
            continue
        if "=" not in s:
            raise FormatError("expected 'key = value'", path, i, 1)
        k, v = s.split("=", 1)
        entries.append((k.strip(), v, path, i, raw.index(k.strip()) + 1))
    for o in overrides:
        if "=" not in o:
            raise FormatError(f"override {o!r} is not key=value")
        k, v = o.split("=", 1)
        entries.append((k.strip(), v, "<override>", None, None))
    for k, v, p, line, col in entries:
        try:
            cfg = _set_dotted(cfg, k, v)
        except KeyError:
            raise FormatError(f"unknown config key {k!r}", p, line, col) from None
        except ValueError as exc:
            raise FormatError(f"bad value for {k!r}: {exc}", p, line, col) from None
    return cfg


def load_config(path=None, overrides=()) -> PipelineConfig:
    text = _read_text(path) if path is not None else ""
    return parse_config(text, path, overrides)


def format_config(config: PipelineConfig | None = None) -> str:
    lines = []
    for k, v in config_items(config).items():
        if isinstance(v, tuple):
            v = " ".join(repr(float(x)) for x in v)
        elif hasattr(v, "value"):
            v = v.value
        lines.append(f"{k} = {v}")
    return "\n".join(lines) + "\n"
