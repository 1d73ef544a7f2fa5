"""Longitude-periodic bilinear resampling (spatial transformer) and its adjoint.

Coordinates are converted to fractional pixel indices: column ``c`` is
``theta / dtheta`` taken modulo ``N``, row ``r`` is ``phi / dphi - 0.5``
clamped to ``[0, M-1]``.  Row clamping is where the poles are handled; the
clamped direction carries no coordinate gradient.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .fields import DeformationField, FeatureMap, check_same_grid
from .grid import SphereGrid


@dataclass
class Stencil:
    """Bilinear corner indices and weights for a batch of sample points."""

    shape: tuple[int, int]
    idx: np.ndarray  # 4 x K flat indices: 00, 01, 10, 11 (row, col)
    fr: np.ndarray
    fc: np.ndarray
    clamped: np.ndarray
    out_shape: tuple

    @property
    def weights(self) -> np.ndarray:
        fr, fc = self.fr, self.fc
        return np.stack([(1 - fr) * (1 - fc), (1 - fr) * fc, fr * (1 - fc), fr * fc])

    @property
    def n_clamped(self) -> int:
        return int(np.count_nonzero(self.clamped))


def stencil(shape: tuple[int, int], c, r, c_base=None) -> Stencil:
    """Bilinear stencil at fractional pixel coordinates ``(c, r)``.

    With an integer ``c_base`` the column is ``c_base + c``; the weights then
    depend on ``c`` alone, which keeps column shifts bit-exact.
    """
    M, N = shape
    c = np.asarray(c, dtype=np.float64)
    r = np.asarray(r, dtype=np.float64)
    shapes = [c.shape, r.shape] + ([np.shape(c_base)] if c_base is not None else [])
    out_shape = np.broadcast_shapes(*shapes)
    c = np.broadcast_to(c, out_shape).ravel()
    r = np.broadcast_to(r, out_shape).ravel()

    if c_base is None:
        c = np.mod(c, N)
        c0 = np.floor(c)
        fc = c - c0
        c0 = c0.astype(np.int64) % N
    else:
        base = np.broadcast_to(np.asarray(c_base, dtype=np.int64), out_shape).ravel()
        c0 = np.floor(c)
        fc = c - c0
        c0 = (base + np.mod(c0, N).astype(np.int64)) % N
    c1 = (c0 + 1) % N

    lo, hi = 0.0, float(M - 1)
    clamped = (r < lo) | (r > hi)
    r = np.clip(r, lo, hi)
    if M == 1:
        r0 = np.zeros(r.shape, dtype=np.int64)
        r1 = r0
        fr = np.zeros_like(r)
    else:
        r0 = np.minimum(np.floor(r).astype(np.int64), M - 2)
        r1 = r0 + 1
        fr = r - r0

    idx = np.stack([r0 * N + c0, r0 * N + c1, r1 * N + c0, r1 * N + c1])
    return Stencil((M, N), idx, fr, fc, clamped, out_shape)


def displacement_stencil(grid: SphereGrid, d: np.ndarray) -> Stencil:
    """Stencil for targets ``grid + d`` with ``d`` a ``2 x M x N`` displacement."""
    M, N = grid.shape
    jj = np.arange(N, dtype=np.int64)[None, :]
    ii = np.arange(M, dtype=np.float64)[:, None]
    # cell index kept separate so zero displacement lands exactly on nodes
    # and the column weights do not depend on the column
    r = ii + d[1] / grid.dphi
    return stencil(grid.shape, d[0] / grid.dtheta, r, c_base=jj)


def absolute_stencil(grid: SphereGrid, theta, phi) -> Stencil:
    return stencil(grid.shape, np.asarray(theta) / grid.dtheta, np.asarray(phi) / grid.dphi - 0.5)


def interp(data: np.ndarray, st: Stencil) -> np.ndarray:
    """Evaluate ``C x M x N`` data on the stencil; returns ``C x out_shape``."""
    C = data.shape[0]
    flat = data.reshape(C, -1)
    w = st.weights
    out = (
        w[0] * flat[:, st.idx[0]]
        + w[1] * flat[:, st.idx[1]]
        + w[2] * flat[:, st.idx[2]]
        + w[3] * flat[:, st.idx[3]]
    )
    return out.reshape((C,) + st.out_shape)


def interp_nearest(data: np.ndarray, st: Stencil) -> np.ndarray:
    M, N = st.shape
    col = np.where(st.fc >= 0.5, st.idx[1], st.idx[0]) % N
    row = np.where(st.fr >= 0.5, st.idx[2], st.idx[0]) // N
    flat = data.reshape(data.shape[0], -1)
    return flat[:, row * N + col].reshape((data.shape[0],) + st.out_shape)


def interp_vjp_data(g: np.ndarray, st: Stencil) -> np.ndarray:
    """Adjoint of :func:`interp` with respect to the data values."""
    M, N = st.shape
    C = g.shape[0]
    g = g.reshape(C, -1)
    w = st.weights
    K = g.shape[1]
    offs = (np.arange(C) * (M * N))[:, None]
    idx = np.concatenate([(st.idx[k][None, :] + offs).ravel() for k in range(4)])
    vals = np.concatenate([(w[k][None, :] * g).ravel() for k in range(4)])
    out = np.bincount(idx, weights=vals, minlength=C * M * N)
    assert K == st.idx.shape[1]
    return out.reshape(C, M, N)


def interp_vjp_coords(data: np.ndarray, g: np.ndarray, st: Stencil) -> tuple[np.ndarray, np.ndarray]:
    """Adjoint with respect to fractional pixel coordinates ``(c, r)``.

    Gradients are summed over channels; the clamped row direction gets zero.
    """
    C = data.shape[0]
    flat = data.reshape(C, -1)
    g = g.reshape(C, -1)
    v00, v01, v10, v11 = (flat[:, st.idx[k]] for k in range(4))
    fr, fc = st.fr, st.fc
    dc = (1 - fr) * (v01 - v00) + fr * (v11 - v10)
    dr = (1 - fc) * (v10 - v00) + fc * (v11 - v01)
    gc = np.sum(g * dc, axis=0)
    gr = np.sum(g * dr, axis=0)
    gr = np.where(st.clamped, 0.0, gr)
    return gc.reshape(st.out_shape), gr.reshape(st.out_shape)


def warp_array(data: np.ndarray, grid: SphereGrid, d: np.ndarray) -> tuple[np.ndarray, Stencil]:
    st = displacement_stencil(grid, d)
    return interp(data, st), st


def warp_vjp(data: np.ndarray, grid: SphereGrid, g: np.ndarray, st: Stencil):
    """Gradients of a warp w.r.t. data and the ``2 x M x N`` displacement."""
    gdata = interp_vjp_data(g, st)
    gc, gr = interp_vjp_coords(data, g, st)
    gd = np.stack([gc / grid.dtheta, gr / grid.dphi])
    return gdata, gd


def sample_periodic(fmap: FeatureMap, coords: DeformationField, interp_mode: str = "bilinear") -> FeatureMap:
    """Resample ``fmap`` at ``(wrap(theta + d_theta), clamp(phi + d_phi))``."""
    grid = check_same_grid(fmap, coords)
    st = displacement_stencil(grid, coords.data)
    if interp_mode == "bilinear":
        out = interp(fmap.data, st)
    elif interp_mode == "nearest":
        out = interp_nearest(fmap.data, st)
    else:
        raise ValueError(f"unknown interpolation {interp_mode!r}")
    return FeatureMap(grid, out)


def sample_periodic_vjp(
    fmap: FeatureMap, coords: DeformationField, upstream: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(d/d map values, d/d displacement)`` for a bilinear sample."""
    grid = check_same_grid(fmap, coords)
    upstream = np.asarray(upstream, dtype=np.float64)
    if upstream.shape != fmap.data.shape:
        raise ValueError(f"upstream gradient shape {upstream.shape} != {fmap.data.shape}")
    st = displacement_stencil(grid, coords.data)
    return warp_vjp(fmap.data, grid, upstream, st)


def clamp_count(coords: DeformationField) -> int:
    """Number of targets whose latitude fell outside the sampled rows."""
    return displacement_stencil(coords.grid, coords.data).n_clamped
