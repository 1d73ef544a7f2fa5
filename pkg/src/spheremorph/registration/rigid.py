"""Rigid pre-alignment by exhaustive search over two rotation angles."""

from __future__ import annotations

import numpy as np

from ..fields import FeatureMap, LabelMap, check_same_grid
from ..likelihood import Atlas, data_array
from ..sphconv import pool2_array
from .warp import rotate_array, rotation_angle, rotation_matrix


def align_array(data: np.ndarray, grid, z_angle: float, y_angle: float, nearest: bool = False) -> np.ndarray:
    """``out(p) = data(R p)`` with ``R = Rz(z) Ry(y)``, i.e. undo a rotation by R."""
    if y_angle == 0.0:
        k = z_angle / grid.dtheta
        if k == np.round(k):
            return np.roll(data, -int(np.round(k)), axis=2)
    return rotate_array(data, grid, rotation_matrix(z_angle, y_angle).T, nearest)


def align_labels(labels: LabelMap, angles: tuple[float, float]) -> LabelMap:
    """Apply a rigid result from :func:`rigid_align` to a label map (nearest neighbor)."""
    out = align_array(labels.labels[None].astype(np.float64), labels.grid, *angles, nearest=True)[0]
    return LabelMap(labels.grid, out.astype(np.int64))


def _score(data, grid, mean, weights, z, y) -> float:
    return data_array(align_array(data, grid, z, y), mean, weights)[0]


def _best(cands, scores) -> tuple[float, float]:
    scores = np.asarray(scores)
    mags = np.array([rotation_angle(rotation_matrix(z, y)) for z, y in cands])
    best = np.lexsort((mags, scores))[0]
    return cands[best]


def rigid_align(moving: FeatureMap, atlas: Atlas, coarse_step: float = np.pi / 36,
                coarse_rows: int = 32) -> tuple[tuple[float, float], FeatureMap]:
    """Find ``(z, y)`` minimizing the data term of the un-rotated moving map.

    The coarse pass scans z over ``[0, 2 pi)`` and y over ``[-pi/2, pi/2]``
    at ``coarse_step`` on maps pooled down to at most ``coarse_rows`` rows; a
    refinement pass at ``coarse_step / 8`` runs at full resolution.  Ties go
    to the smallest rotation.
    """
    grid = check_same_grid(moving, atlas.mean)
    weights = atlas.weights()

    cdata, cmean, cvar = moving.data, atlas.mean.data, atlas.variance.data
    cgrid = grid
    while cgrid.rows > coarse_rows and cgrid.rows % 2 == 0 and cgrid.cols % 4 == 0:
        cdata, cmean, cvar = pool2_array(cdata), pool2_array(cmean), pool2_array(cvar)
        cgrid = cgrid.coarsen(2)
    cweights = cgrid.sin_lat[None, :, None] / cvar

    nz = int(np.ceil(2 * np.pi / coarse_step - 1e-9))
    ny = int(np.floor(np.pi / coarse_step + 1e-9))
    zs = [k * coarse_step for k in range(nz)]
    ys = [-np.pi / 2 + k * coarse_step for k in range(ny + 1)]
    if 0.0 not in ys:
        ys.append(0.0)
    cands = [(z, y) for z in zs for y in ys]
    scores = [_score(cdata, cgrid, cmean, cweights, z, y) for z, y in cands]
    z0, y0 = _best(cands, scores)

    fine = coarse_step / 8
    cands = []
    for a in range(-8, 9):
        for b in range(-8, 9):
            y = y0 + b * fine
            if -np.pi / 2 - 1e-12 <= y <= np.pi / 2 + 1e-12:
                cands.append(((z0 + a * fine) % (2 * np.pi), y))
    scores = [_score(moving.data, grid, atlas.mean.data, weights, z, y) for z, y in cands]
    z, y = _best(cands, scores)
    return (float(z), float(y)), FeatureMap(grid, align_array(moving.data, grid, z, y))
