"""Applying deformations and rigid rotations to maps on the grid."""

from __future__ import annotations

import numpy as np

from ..fields import DeformationField, FeatureMap, LabelMap, check_same_grid
from ..grid import _cartesian_to_polar
from ..sampler import absolute_stencil, displacement_stencil, interp, interp_nearest


def warp_labels(labels: LabelMap, phi: DeformationField) -> LabelMap:
    """Nearest-neighbor pull-back of integer labels through ``phi``."""
    grid = check_same_grid(labels, phi)
    st = displacement_stencil(grid, phi.data)
    out = interp_nearest(labels.labels[None].astype(np.float64), st)[0]
    return LabelMap(grid, np.rint(out).astype(np.int64))


def warp_features(fmap: FeatureMap, phi: DeformationField) -> FeatureMap:
    grid = check_same_grid(fmap, phi)
    return FeatureMap(grid, interp(fmap.data, displacement_stencil(grid, phi.data)))


def rotation_matrix(z_angle: float, y_angle: float) -> np.ndarray:
    """``Rz(z_angle) @ Ry(y_angle)``."""
    cz, sz = np.cos(z_angle), np.sin(z_angle)
    cy, sy = np.cos(y_angle), np.sin(y_angle)
    rz = np.array([[cz, -sz, 0.0], [sz, cz, 0.0], [0.0, 0.0, 1.0]])
    ry = np.array([[cy, 0.0, sy], [0.0, 1.0, 0.0], [-sy, 0.0, cy]])
    return rz @ ry


def rotation_angle(R: np.ndarray) -> float:
    return float(np.arccos(np.clip((np.trace(R) - 1.0) / 2.0, -1.0, 1.0)))


def pull_back_coords(grid, R: np.ndarray):
    """Polar coordinates of ``R^T p`` for every cell center ``p``."""
    xyz = grid.xyz().reshape(3, -1)
    th, ph = _cartesian_to_polar(R.T @ xyz)
    return th.reshape(grid.shape), ph.reshape(grid.shape)


def rotate_array(data: np.ndarray, grid, R: np.ndarray, nearest: bool = False) -> np.ndarray:
    """Content rotated by ``R``: ``out(p) = data(R^T p)``."""
    th, ph = pull_back_coords(grid, R)
    st = absolute_stencil(grid, th, ph)
    return interp_nearest(data, st) if nearest else interp(data, st)


def rotate_map(fmap: FeatureMap, R: np.ndarray) -> FeatureMap:
    return FeatureMap(fmap.grid, rotate_array(fmap.data, fmap.grid, R))


def rotate_labels(labels: LabelMap, R: np.ndarray) -> LabelMap:
    out = rotate_array(labels.labels[None].astype(np.float64), labels.grid, R, nearest=True)[0]
    return LabelMap(labels.grid, np.rint(out).astype(np.int64))


def pole_rotation(theta: float, phi: float) -> np.ndarray:
    """Rotation taking the north pole to the direction ``(theta, phi)``."""
    return rotation_matrix(theta, phi)
