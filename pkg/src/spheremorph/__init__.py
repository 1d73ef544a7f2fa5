"""Spherical diffeomorphic registration on equirectangular grids."""

from .fields import DeformationField, FeatureMap, LabelMap, VelocityField
from .grid import SphereGrid, make_grid, polar_to_cartesian, wrap_longitude

__version__ = "0.1.0"

__all__ = [
    "DeformationField",
    "FeatureMap",
    "LabelMap",
    "SphereGrid",
    "VelocityField",
    "make_grid",
    "polar_to_cartesian",
    "wrap_longitude",
]
