"""Equitable geodesic power-diagram partitioning and persistent coverage planning for robot teams."""

from .environment import Environment, InfeasibleGeometryError, MapFormatError, load_environment

__version__ = "0.1.0"

__all__ = ["Environment", "InfeasibleGeometryError", "MapFormatError", "load_environment", "__version__"]
