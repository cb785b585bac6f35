"""WGS84 latitude/longitude to UTM and back, and geo-tag poses.

The projection uses the Krueger series to sixth order in the third
flattening, which is accurate to well under a millimetre inside a zone.
Zones follow the plain 6-degree rule; the Norway and Svalbard exceptions
are not applied.

World frame used everywhere downstream: x = easting, y = height,
z = northing, all in metres relative to a local origin.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass

import numpy as np

from ..manifold import SE3, Rot3

A_WGS84 = 6378137.0
F_WGS84 = 1.0 / 298.257223563
K0 = 0.9996
FALSE_EASTING = 500000.0
FALSE_NORTHING_SOUTH = 10000000.0
MAX_ABS_LAT = 84.0

_N = F_WGS84 / (2.0 - F_WGS84)
_E2 = F_WGS84 * (2.0 - F_WGS84)
_E = math.sqrt(_E2)
_RECT = A_WGS84 / (1.0 + _N) * (1.0 + _N**2 / 4.0 + _N**4 / 64.0 + _N**6 / 256.0)


def _series():
    n = _N
    alpha = [
        n / 2 - 2 * n**2 / 3 + 5 * n**3 / 16 + 41 * n**4 / 180 - 127 * n**5 / 288 + 7891 * n**6 / 37800,
        13 * n**2 / 48 - 3 * n**3 / 5 + 557 * n**4 / 1440 + 281 * n**5 / 630 - 1983433 * n**6 / 1935360,
        61 * n**3 / 240 - 103 * n**4 / 140 + 15061 * n**5 / 26880 + 167603 * n**6 / 181440,
        49561 * n**4 / 161280 - 179 * n**5 / 168 + 6601661 * n**6 / 7257600,
        34729 * n**5 / 80640 - 3418889 * n**6 / 1995840,
        212378941 * n**6 / 319334400,
    ]
    beta = [
        n / 2 - 2 * n**2 / 3 + 37 * n**3 / 96 - n**4 / 360 - 81 * n**5 / 512 + 96199 * n**6 / 604800,
        n**2 / 48 + n**3 / 15 - 437 * n**4 / 1440 + 46 * n**5 / 105 - 1118711 * n**6 / 3870720,
        17 * n**3 / 480 - 37 * n**4 / 840 - 209 * n**5 / 4480 + 5569 * n**6 / 90720,
        4397 * n**4 / 161280 - 11 * n**5 / 504 - 830251 * n**6 / 7257600,
        4583 * n**5 / 161280 - 108847 * n**6 / 3991680,
        20648693 * n**6 / 638668800,
    ]
    return np.array(alpha), np.array(beta)


_ALPHA, _BETA = _series()
_J2 = 2.0 * np.arange(1, 7)


class PolarRegionError(ValueError):
    """Latitude outside the band covered by UTM."""


def zone_number(lon: float) -> int:
    lon = (float(lon) + 180.0) % 360.0 - 180.0
    return min(int((lon + 180.0) // 6.0) + 1, 60)


def central_meridian(zone: int) -> float:
    return 6.0 * zone - 183.0


_ZONE_RE = re.compile(r"^\s*(\d{1,2})\s*([NnSs])\s*$")


def parse_zone(zone) -> tuple[int, bool]:
    """``"30N"`` -> ``(30, True)``; ``"56S"`` -> ``(56, False)``."""
    m = _ZONE_RE.match(str(zone))
    if not m or not 1 <= int(m.group(1)) <= 60:
        raise ValueError(f"bad UTM zone {zone!r}; expected e.g. '30N' or '56S'")
    return int(m.group(1)), m.group(2).upper() == "N"


def _conformal_tau(tau: float) -> float:
    sig = math.sinh(_E * math.atanh(_E * tau / math.hypot(1.0, tau)))
    return tau * math.hypot(1.0, sig) - sig * math.hypot(1.0, tau)


def latlon_to_utm(lat: float, lon: float, zone: int | None = None) -> tuple[float, float, str]:
    """Geodetic degrees to ``(easting, northing, zone)``, zone as e.g. ``"30N"``.

    ``zone`` forces the zone number (useful near a zone edge).
    """
    lat, lon = float(lat), float(lon)
    if not (math.isfinite(lat) and math.isfinite(lon)):
        raise ValueError("latitude and longitude must be finite")
    if abs(lat) >= MAX_ABS_LAT:
        raise PolarRegionError(f"latitude {lat:.6f} deg is outside the UTM band (|lat| < {MAX_ABS_LAT})")
    zn = zone_number(lon) if zone is None else int(zone)
    dlon = math.radians((lon - central_meridian(zn) + 180.0) % 360.0 - 180.0)
    tau_p = _conformal_tau(math.tan(math.radians(lat)))
    xi_p = math.atan2(tau_p, math.cos(dlon))
    eta_p = math.asinh(math.sin(dlon) / math.hypot(tau_p, math.cos(dlon)))
    xi = xi_p + float(np.sum(_ALPHA * np.sin(_J2 * xi_p) * np.cosh(_J2 * eta_p)))
    eta = eta_p + float(np.sum(_ALPHA * np.cos(_J2 * xi_p) * np.sinh(_J2 * eta_p)))
    easting = FALSE_EASTING + K0 * _RECT * eta
    northing = K0 * _RECT * xi
    north = lat >= 0.0
    if not north:
        northing += FALSE_NORTHING_SOUTH
    return easting, northing, f"{zn}{'N' if north else 'S'}"


def utm_to_latlon(easting: float, northing: float, zone) -> tuple[float, float]:
    """Inverse of :func:`latlon_to_utm`; returns geodetic degrees."""
    zn, north = parse_zone(zone)
    y = float(northing) - (0.0 if north else FALSE_NORTHING_SOUTH)
    xi = y / (K0 * _RECT)
    eta = (float(easting) - FALSE_EASTING) / (K0 * _RECT)
    xi_p = xi - float(np.sum(_BETA * np.sin(_J2 * xi) * np.cosh(_J2 * eta)))
    eta_p = eta - float(np.sum(_BETA * np.cos(_J2 * xi) * np.sinh(_J2 * eta)))
    tau_p = math.sin(xi_p) / math.hypot(math.sinh(eta_p), math.cos(xi_p))
    dlon = math.atan2(math.sinh(eta_p), math.cos(xi_p))
    # Newton on tau'(tau) = tau_p
    tau = tau_p
    for _ in range(8):
        tp = _conformal_tau(tau)
        step = (tau_p - tp) / math.hypot(1.0, tp) * (1.0 + (1.0 - _E2) * tau * tau) / (
            (1.0 - _E2) * math.hypot(1.0, tau))
        tau += step
        if abs(step) < 1e-15 * max(1.0, abs(tau)):
            break
    lat = math.degrees(math.atan(tau))
    if abs(lat) >= MAX_ABS_LAT:
        raise PolarRegionError(f"latitude {lat:.6f} deg is outside the UTM band (|lat| < {MAX_ABS_LAT})")
    lon = central_meridian(zn) + math.degrees(dlon)
    return lat, (lon + 180.0) % 360.0 - 180.0


# ---------------------------------------------------------------------------
# geo-tags
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LocalOrigin:
    """UTM point that maps to the world origin; world coordinates stay small."""

    easting: float
    northing: float
    zone: str
    height: float = 0.0

    def __post_init__(self):
        parse_zone(self.zone)

    def to_dict(self) -> dict:
        return {"easting": self.easting, "northing": self.northing, "zone": self.zone, "height": self.height}

    @classmethod
    def from_dict(cls, d: dict) -> "LocalOrigin":
        return cls(float(d["easting"]), float(d["northing"]), str(d["zone"]), float(d.get("height", 0.0)))


def attitude_matrix(heading: float, pitch: float = 0.0, roll: float = 0.0) -> np.ndarray:
    """World-from-camera rotation for a camera (x right, y down, z forward).

    ``heading`` runs from north toward east, ``pitch`` is positive nose-up
    and ``roll`` turns the camera about its optical axis.
    """
    ch, sh, cp, sp = math.cos(heading), math.sin(heading), math.cos(pitch), math.sin(pitch)
    fwd = np.array([sh * cp, sp, ch * cp])
    down = np.array([0.0, -1.0, 0.0]) - (-sp) * fwd
    down /= np.linalg.norm(down)
    right = np.cross(down, fwd)
    level = np.column_stack([right, down, fwd])
    cr, sr = math.cos(roll), math.sin(roll)
    return level @ np.array([[cr, -sr, 0.0], [sr, cr, 0.0], [0.0, 0.0, 1.0]])


def attitude_angles(R: np.ndarray) -> tuple[float, float, float]:
    """``(heading, pitch, roll)`` of a world-from-camera rotation (inverse of :func:`attitude_matrix`)."""
    R = np.asarray(R, dtype=float)
    fwd = R[:, 2]
    heading = math.atan2(fwd[0], fwd[2])
    pitch = math.asin(max(-1.0, min(1.0, fwd[1])))
    level = attitude_matrix(heading, pitch, 0.0)
    M = level.T @ R
    roll = math.atan2(M[1, 0], M[0, 0])
    return heading, pitch, roll


@dataclass
class GeoAnchor:
    """A geo-tag: world position (lat/lon or UTM) plus optional attitude.

    Construct with either ``lat``/``lon`` or ``easting``/``northing``/``zone``;
    the other pair is filled in on construction.
    """

    id: str
    lat: float | None = None
    lon: float | None = None
    easting: float | None = None
    northing: float | None = None
    zone: str | None = None
    height: float = 0.0
    heading: float | None = None
    pitch: float | None = None
    roll: float | None = None
    origin: LocalOrigin | None = None

    def __post_init__(self):
        has_ll = self.lat is not None and self.lon is not None
        has_utm = self.easting is not None and self.northing is not None and self.zone is not None
        if not (has_ll or has_utm):
            raise ValueError(f"geo anchor {self.id!r} needs lat/lon or easting/northing/zone")
        if has_ll and not has_utm:
            zn = parse_zone(self.origin.zone)[0] if self.origin is not None else None
            self.easting, self.northing, self.zone = latlon_to_utm(self.lat, self.lon, zn)
        elif has_utm and not has_ll:
            self.lat, self.lon = utm_to_latlon(self.easting, self.northing, self.zone)

    def world_position(self, origin: LocalOrigin | None = None) -> np.ndarray:
        o = origin or self.origin
        if o is None:
            return np.array([self.easting, self.height, self.northing], dtype=float)
        if parse_zone(o.zone)[0] != parse_zone(self.zone)[0]:
            raise ValueError(f"geo anchor {self.id!r} is in zone {self.zone}, origin in {o.zone}")
        # both hemispheres measured from the equator
        n_self = self.northing - (0.0 if parse_zone(self.zone)[1] else FALSE_NORTHING_SOUTH)
        n_orig = o.northing - (0.0 if parse_zone(o.zone)[1] else FALSE_NORTHING_SOUTH)
        return np.array([self.easting - o.easting, self.height - o.height, n_self - n_orig], dtype=float)

    def world_pose(self, origin: LocalOrigin | None = None) -> SE3:
        """World-from-camera pose; a missing attitude is taken as level, facing north."""
        R = attitude_matrix(self.heading or 0.0, self.pitch or 0.0, self.roll or 0.0)
        return SE3(Rot3.from_matrix(R), self.world_position(origin))

    def to_dict(self) -> dict:
        d = {"id": self.id, "lat": self.lat, "lon": self.lon, "height": self.height}
        for key in ("heading", "pitch", "roll"):
            v = getattr(self, key)
            if v is not None:
                d[key] = v
        return d

    @classmethod
    def from_dict(cls, d: dict, origin: LocalOrigin | None = None) -> "GeoAnchor":
        keys = ("lat", "lon", "easting", "northing", "heading", "pitch", "roll")
        kw = {k: (float(d[k]) if d.get(k) is not None else None) for k in keys}
        return cls(str(d["id"]), zone=d.get("zone"), height=float(d.get("height", 0.0)), origin=origin, **kw)

    @classmethod
    def from_world_pose(cls, id: str, pose: SE3, origin: LocalOrigin) -> "GeoAnchor":
        c = np.asarray(pose.translation, dtype=float)
        h, p, r = attitude_angles(pose.rotation.matrix())
        return cls(id, easting=origin.easting + c[0], northing=origin.northing + c[2], zone=origin.zone,
                   height=origin.height + c[1], heading=h, pitch=p, roll=r, origin=origin)
