"""File formats, geodesy and the command-line interface."""

from .formats import FormatError, Trajectory, load_config, load_scene, load_stream, load_trajectory, save_scene
from .geodesy import GeoAnchor, LocalOrigin, PolarRegionError, latlon_to_utm, utm_to_latlon

__all__ = [
    "FormatError",
    "GeoAnchor",
    "LocalOrigin",
    "PolarRegionError",
    "Trajectory",
    "latlon_to_utm",
    "load_config",
    "load_scene",
    "load_stream",
    "load_trajectory",
    "save_scene",
    "utm_to_latlon",
]
