"""Geo-registration and scale-drift correction for monocular SLAM maps."""

from .manifold import SE3, Rot3, Sim3, Sim3Tangent, exp_sim3, log_sim3
from .scene import Camera, GeoCorrespondence, Observation, Scene

__version__ = "0.1.0"

__all__ = [
    "Camera",
    "GeoCorrespondence",
    "Observation",
    "Rot3",
    "SE3",
    "Scene",
    "Sim3",
    "Sim3Tangent",
    "exp_sim3",
    "log_sim3",
]
