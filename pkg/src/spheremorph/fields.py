"""Typed containers for data living on a :class:`SphereGrid`."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .grid import SphereGrid


class GridMismatchError(ValueError):
    """Two fields that must share a grid do not."""


def check_same_grid(*items) -> SphereGrid:
    grid = items[0].grid
    for it in items[1:]:
        if it.grid != grid:
            raise GridMismatchError(f"grid {it.grid.shape} does not match {grid.shape}")
    return grid


def _as_data(grid: SphereGrid, data, channels: int | None, name: str) -> np.ndarray:
    a = np.asarray(data, dtype=np.float64)
    if a.ndim == 2:
        a = a[None]
    if a.ndim != 3 or a.shape[1:] != grid.shape:
        raise ValueError(f"{name} data of shape {a.shape} does not fit grid {grid.shape}")
    if channels is not None and a.shape[0] != channels:
        raise ValueError(f"{name} needs {channels} channels, got {a.shape[0]}")
    if not np.all(np.isfinite(a)):
        raise ValueError(f"{name} contains non-finite values")
    return a


@dataclass(eq=False)
class FeatureMap:
    grid: SphereGrid
    data: np.ndarray

    def __post_init__(self):
        self.data = _as_data(self.grid, self.data, None, "FeatureMap")

    @property
    def channels(self) -> int:
        return self.data.shape[0]


class _TwoChannel:
    grid: SphereGrid
    data: np.ndarray

    @classmethod
    def zeros(cls, grid: SphereGrid):
        return cls(grid, np.zeros((2,) + grid.shape))

    def max_magnitude(self) -> float:
        """Largest on-sphere speed ``sqrt((sin(phi) u_theta)^2 + u_phi^2)``."""
        s = self.grid.sin_lat[:, None]
        return float(np.max(np.hypot(s * self.data[0], self.data[1])))


@dataclass(eq=False)
class VelocityField(_TwoChannel):
    """Stationary velocity in radians per unit time, channels (theta, phi)."""

    grid: SphereGrid
    data: np.ndarray

    def __post_init__(self):
        self.data = _as_data(self.grid, self.data, 2, "VelocityField")

    @property
    def u_theta(self) -> np.ndarray:
        return self.data[0]

    @property
    def u_phi(self) -> np.ndarray:
        return self.data[1]


@dataclass(eq=False)
class DeformationField(_TwoChannel):
    """Displacement in radians; target of cell (i, j) is
    ``(theta_j + d_theta, phi_i + d_phi)`` with longitude wrapped."""

    grid: SphereGrid
    data: np.ndarray

    def __post_init__(self):
        self.data = _as_data(self.grid, self.data, 2, "DeformationField")

    @property
    def d_theta(self) -> np.ndarray:
        return self.data[0]

    @property
    def d_phi(self) -> np.ndarray:
        return self.data[1]

    def targets(self) -> tuple[np.ndarray, np.ndarray]:
        """Absolute ``(theta, phi)`` targets, longitude unwrapped."""
        theta, phi = self.grid.mesh()
        return theta + self.data[0], phi + self.data[1]


@dataclass(eq=False)
class LabelMap:
    """Integer parcel labels; 0 is background."""

    grid: SphereGrid
    labels: np.ndarray

    def __post_init__(self):
        lab = np.asarray(self.labels)
        if lab.shape != self.grid.shape:
            raise ValueError(f"labels of shape {lab.shape} do not fit grid {self.grid.shape}")
        if lab.dtype.kind not in "iu":
            if not np.all(lab == np.round(lab)):
                raise ValueError("labels must be integers")
        lab = lab.astype(np.int64)
        if lab.min(initial=0) < 0:
            raise ValueError("labels must be nonnegative")
        self.labels = lab

    def regions(self) -> np.ndarray:
        r = np.unique(self.labels)
        return r[r != 0]
