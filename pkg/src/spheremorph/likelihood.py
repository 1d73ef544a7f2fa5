"""Distortion-corrected Gaussian data term."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .fields import FeatureMap, GridMismatchError


@dataclass(eq=False)
class Atlas:
    """Mean feature map with a diagonal per-vertex variance.

    Variances below ``variance_floor`` are raised to it; the floor defaults to
    ``1e-4`` times the largest variance.  ``mask`` marks cells that take part
    in the data term (``True``) and defaults to all cells.
    """

    mean: FeatureMap
    variance: FeatureMap
    variance_floor: float | None = None
    mask: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.mean.grid != self.variance.grid:
            raise GridMismatchError("atlas mean and variance grids differ")
        if self.mean.channels != self.variance.channels:
            raise ValueError("atlas mean and variance channel counts differ")
        var = self.variance.data
        if self.variance_floor is None:
            vmax = float(var.max())
            self.variance_floor = 1e-4 * vmax if vmax > 0 else 1e-8
        if self.variance_floor <= 0:
            raise ValueError("variance floor must be positive")
        self.variance = FeatureMap(self.variance.grid, np.maximum(var, self.variance_floor))
        if self.mask is not None:
            m = np.asarray(self.mask, dtype=bool)
            if m.shape != self.grid.shape:
                raise ValueError("mask shape does not match the grid")
            self.mask = m

    @property
    def grid(self):
        return self.mean.grid

    def weights(self, distortion: bool = True) -> np.ndarray:
        """Per-cell ``S / sigma^2`` with masked cells zeroed; ``C x M x N``."""
        s = self.grid.sin_lat[:, None] if distortion else np.ones((self.grid.rows, 1))
        w = s[None] / self.variance.data
        if self.mask is not None:
            w = w * self.mask[None]
        return w


def _check(warped: FeatureMap, atlas: Atlas) -> None:
    if warped.grid != atlas.grid:
        raise GridMismatchError(f"warped grid {warped.grid.shape} != atlas grid {atlas.grid.shape}")
    if warped.channels != atlas.mean.channels:
        raise ValueError("warped map and atlas have different channel counts")


def data_array(warped: np.ndarray, mean: np.ndarray, weights: np.ndarray):
    """Value and gradient of ``0.5 * sum(w * (mean - warped)^2)``."""
    r = mean - warped
    wr = weights * r
    return 0.5 * float(np.sum(wr * r)), -wr


def data_term(warped: FeatureMap, atlas: Atlas, distortion: bool = True) -> float:
    _check(warped, atlas)
    return data_array(warped.data, atlas.mean.data, atlas.weights(distortion))[0]


def data_term_grad(warped: FeatureMap, atlas: Atlas, distortion: bool = True) -> FeatureMap:
    _check(warped, atlas)
    return FeatureMap(warped.grid, data_array(warped.data, atlas.mean.data, atlas.weights(distortion))[1])
