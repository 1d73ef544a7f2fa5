"""Equirectangular parameterization of the unit sphere.

Rows index colatitude ``phi`` (north pole at 0), columns index longitude
``theta``.  Latitudes are sampled at cell centers so the poles themselves are
never grid points and ``sin(phi)`` is strictly positive on every row.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

TWO_PI = 2.0 * np.pi


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a, dtype=np.float64)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class SphereGrid:
    """An ``M x N`` latitude-major grid over the sphere."""

    rows: int
    cols: int
    latitudes: np.ndarray = field(repr=False)
    longitudes: np.ndarray = field(repr=False)
    sin_lat: np.ndarray = field(repr=False)
    area_weights: np.ndarray = field(repr=False)

    @property
    def shape(self) -> tuple[int, int]:
        return (self.rows, self.cols)

    @property
    def size(self) -> int:
        return self.rows * self.cols

    @property
    def dtheta(self) -> float:
        return TWO_PI / self.cols

    @property
    def dphi(self) -> float:
        return np.pi / self.rows

    @property
    def cell_area(self) -> np.ndarray:
        """Solid angle of every cell as an ``M x N`` array."""
        return np.broadcast_to(
            (self.area_weights * self.dtheta * self.dphi)[:, None], self.shape
        )

    def mesh(self) -> tuple[np.ndarray, np.ndarray]:
        """Return ``(theta, phi)`` coordinate arrays of shape ``M x N``."""
        phi, theta = np.meshgrid(self.latitudes, self.longitudes, indexing="ij")
        return theta, phi

    def xyz(self) -> np.ndarray:
        """Unit vectors of every cell center, shape ``3 x M x N``."""
        theta, phi = self.mesh()
        return polar_to_cartesian(theta, phi)

    def coarsen(self, factor: int = 2) -> "SphereGrid":
        # pooled grids may fall below make_grid's minimum size
        if self.rows % factor or self.cols % factor:
            raise ValueError(f"cannot coarsen a {self.rows}x{self.cols} grid by {factor}")
        return _build(self.rows // factor, self.cols // factor)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, SphereGrid):
            return NotImplemented
        return self.shape == other.shape

    def __hash__(self) -> int:
        return hash(self.shape)


def make_grid(M: int, N: int) -> SphereGrid:
    """Build the cell-centered grid with ``M`` latitude rows and ``N`` columns."""
    if int(M) != M or int(N) != N:
        raise ValueError(f"grid dimensions must be integers, got {M}x{N}")
    M, N = int(M), int(N)
    if M < 2:
        raise ValueError(f"need at least 2 latitude rows, got {M}")
    if N < 4 or N % 2:
        raise ValueError(f"need an even number of columns >= 4, got {N}")
    return _build(M, N)


def _build(M: int, N: int) -> SphereGrid:
    lat = (np.arange(M) + 0.5) * (np.pi / M)
    lon = np.arange(N) * (TWO_PI / N)
    s = np.sin(lat)
    return SphereGrid(M, N, _frozen(lat), _frozen(lon), _frozen(s), _frozen(s.copy()))


def polar_to_cartesian(theta, phi) -> np.ndarray:
    """Map longitude/colatitude to unit vectors; leading axis holds x, y, z."""
    theta = np.asarray(theta, dtype=np.float64)
    phi = np.asarray(phi, dtype=np.float64)
    sp = np.sin(phi)
    return np.stack([sp * np.cos(theta), sp * np.sin(theta), np.cos(phi)])


def _cartesian_to_polar(xyz) -> tuple[np.ndarray, np.ndarray]:
    xyz = np.asarray(xyz, dtype=np.float64)
    x, y, z = xyz[0], xyz[1], xyz[2]
    r = np.sqrt(x * x + y * y + z * z)
    theta = wrap_longitude(np.arctan2(y, x))
    phi = np.arccos(np.clip(z / r, -1.0, 1.0))
    return theta, phi


def wrap_longitude(theta):
    """Reduce angles to ``[0, 2*pi)``."""
    theta = np.asarray(theta, dtype=np.float64)
    if not np.all(np.isfinite(theta)):
        raise ValueError("longitude must be finite")
    out = np.mod(theta, TWO_PI)
    # np.mod rounds tiny negatives up to exactly 2*pi
    out = np.where(out >= TWO_PI, 0.0, out)
    return out if out.ndim else float(out)


def great_circle(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Angle between unit vectors stored along axis 0."""
    cross = np.cross(a, b, axis=0)
    return np.arctan2(np.linalg.norm(cross, axis=0), np.sum(a * b, axis=0))
