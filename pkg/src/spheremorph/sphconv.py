"""Gnomonic 3x3 convolution, pooling and upsampling on the sphere grid.

Each output cell gathers nine bilinear samples placed by inverse gnomonic
projection of a planar 3x3 stencil onto the sphere.  The tap positions only
depend on the row, so a gather is a fixed sparse matrix per grid shape.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
import scipy.sparse as sp

from .fields import FeatureMap
from .grid import SphereGrid, _build, make_grid
from .sampler import stencil


@dataclass(frozen=True, eq=False)
class GnomonicKernelOffsets:
    """Per-row tap table of shape ``M x 9 x 2`` holding (theta offset, phi)."""

    grid: SphereGrid
    table: np.ndarray

    @property
    def spacing(self) -> float:
        return self.grid.dtheta

    def matrix(self) -> sp.csr_matrix:
        return _gather_matrix(self.grid.rows, self.grid.cols)


def inverse_gnomonic(x, y, colat0):
    """Sphere position of tangent-plane point ``(x, y)`` (y north) around a
    center at longitude 0 and colatitude ``colat0``; returns (dlon, colat)."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    lat0 = np.pi / 2 - colat0
    rho = np.hypot(x, y)
    c = np.arctan(rho)
    safe = np.where(rho > 0, rho, 1.0)
    sin_lat = np.cos(c) * np.sin(lat0) + np.where(rho > 0, y * np.sin(c) * np.cos(lat0) / safe, 0.0)
    lat = np.arcsin(np.clip(sin_lat, -1.0, 1.0))
    dlon = np.arctan2(x * np.sin(c), rho * np.cos(lat0) * np.cos(c) - y * np.sin(lat0) * np.sin(c))
    dlon = np.where(rho > 0, dlon, 0.0)
    return dlon, np.pi / 2 - lat


def gnomonic_offsets(grid: SphereGrid) -> GnomonicKernelOffsets:
    """Tap table for a 3x3 stencil with one equatorial pixel of arc spacing."""
    t = np.tan(grid.dtheta)
    a, b = np.meshgrid([-1.0, 0.0, 1.0], [-1.0, 0.0, 1.0], indexing="ij")
    # row offset a runs south (increasing colatitude), so the plane's y is -a
    x = (b * t).ravel()[None, :]
    y = (-a * t).ravel()[None, :]
    dlon, colat = inverse_gnomonic(x, y, grid.latitudes[:, None])
    table = np.stack([dlon, colat], axis=-1)
    table[:, 4, 0] = 0.0
    table[:, 4, 1] = grid.latitudes
    table.setflags(write=False)
    return GnomonicKernelOffsets(grid, table)


@lru_cache(maxsize=32)
def _gather_matrix(M: int, N: int) -> sp.csr_matrix:
    grid = make_grid(M, N)
    off = gnomonic_offsets(grid).table  # M x 9 x 2
    jj = np.arange(N, dtype=np.float64)
    # tap-major rows: t * MN + i * N + j
    c = off[:, :, 0].T[:, :, None] / grid.dtheta + jj[None, None, :]
    r = np.broadcast_to((off[:, :, 1].T / grid.dphi - 0.5)[:, :, None], c.shape)
    # the center tap sits exactly on its node
    c[4] = np.broadcast_to(jj, (M, N))
    r = r.copy()
    r[4] = np.arange(M, dtype=np.float64)[:, None]
    st = stencil((M, N), c, r)
    rows = np.broadcast_to(np.arange(9 * M * N), (4, 9 * M * N))
    mat = sp.csr_matrix((st.weights.ravel(), (rows.ravel(), st.idx.ravel())), shape=(9 * M * N, M * N))
    mat.sum_duplicates()
    return mat


@lru_cache(maxsize=32)
def _gather_matrix_t(M: int, N: int) -> sp.csr_matrix:
    return _gather_matrix(M, N).T.tocsr()


@lru_cache(maxsize=32)
def _gather_matrix_cells(M: int, N: int) -> sp.csr_matrix:
    """Same gather with cell-major rows ``m * 9 + t``, so taps land next to each other."""
    K = M * N
    perm = (np.arange(9)[None, :] * K + np.arange(K)[:, None]).ravel()
    return _gather_matrix(M, N)[perm]


@lru_cache(maxsize=32)
def _gather_matrix_cells_t(M: int, N: int) -> sp.csr_matrix:
    return _gather_matrix_cells(M, N).T.tocsr()


def _kernel_matrix(w: np.ndarray) -> np.ndarray:
    """``Cout x Cin x 3 x 3`` kernel as a ``9 Cin x Cout`` matrix, row ``t * Cin + c``."""
    Cout, Cin = w.shape[:2]
    return w.reshape(Cout, Cin, 9).transpose(2, 1, 0).reshape(9 * Cin, Cout)


def conv_forward_cl(h: np.ndarray, w: np.ndarray, b: np.ndarray, M: int, N: int):
    """Channel-last gnomonic convolution: ``h`` is ``MN x Cin``.

    Returns ``(y, cols)`` with ``y`` of shape ``MN x Cout`` and ``cols`` the
    gathered samples ``MN x 9 Cin`` needed by the backward pass.
    """
    Cout, Cin = w.shape[:2]
    if h.shape != (M * N, Cin):
        raise ValueError(f"kernel expects {Cin} input channels on {M}x{N}, got {h.shape}")
    cols = (_gather_matrix_cells(M, N) @ h).reshape(M * N, 9 * Cin)
    y = cols @ _kernel_matrix(w)
    y += b
    return y, cols


def conv_backward_cl(gy: np.ndarray, w: np.ndarray, cols: np.ndarray, M: int, N: int):
    """Gradients ``(dh, dw, db)`` of :func:`conv_forward_cl`."""
    Cout, Cin = w.shape[:2]
    dwm = cols.T @ gy  # 9 Cin x Cout
    dw = dwm.reshape(9, Cin, Cout).transpose(2, 1, 0).reshape(w.shape)
    gcols = gy @ _kernel_matrix(w).T
    dh = _gather_matrix_cells_t(M, N) @ gcols.reshape(9 * M * N, Cin)
    return dh, dw, gy.sum(axis=0)


def conv_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray):
    """Gnomonic convolution of ``Cin x M x N`` data; returns (y, cols)."""
    Cin, M, N = x.shape
    if w.shape[1] != Cin:
        raise ValueError(f"kernel expects {w.shape[1]} input channels, got {Cin}")
    y, cols = conv_forward_cl(np.ascontiguousarray(x.reshape(Cin, -1).T), w, b, M, N)
    return np.ascontiguousarray(y.T).reshape(-1, M, N), cols


def conv_backward(gy: np.ndarray, x_shape, w: np.ndarray, cols: np.ndarray):
    """Returns gradients ``(dx, dw, db)``."""
    Cin, M, N = x_shape
    gy2 = np.ascontiguousarray(gy.reshape(gy.shape[0], -1).T)
    dh, dw, db = conv_backward_cl(gy2, w, cols, M, N)
    return np.ascontiguousarray(dh.T).reshape(Cin, M, N), dw, db


def spherical_conv(inp: FeatureMap, weights, bias, offsets: GnomonicKernelOffsets | None = None) -> FeatureMap:
    weights = np.asarray(weights, dtype=np.float64)
    bias = np.asarray(bias, dtype=np.float64)
    if weights.ndim != 4 or weights.shape[2:] != (3, 3):
        raise ValueError(f"kernel must be Cout x Cin x 3 x 3, got {weights.shape}")
    if weights.shape[1] != inp.channels:
        raise ValueError(f"kernel expects {weights.shape[1]} channels, input has {inp.channels}")
    if bias.shape != (weights.shape[0],):
        raise ValueError("bias must have one entry per output channel")
    if offsets is not None and offsets.grid != inp.grid:
        raise ValueError("offset table built for a different grid")
    y, _ = conv_forward(inp.data, weights, bias)
    return FeatureMap(inp.grid, y)


def pool2_array(x: np.ndarray) -> np.ndarray:
    C, M, N = x.shape
    if M % 2 or N % 2:
        raise ValueError(f"cannot pool a {M}x{N} map by 2")
    return x.reshape(C, M // 2, 2, N // 2, 2).mean(axis=(2, 4))


def pool2_backward(g: np.ndarray) -> np.ndarray:
    return np.repeat(np.repeat(g, 2, axis=1), 2, axis=2) * 0.25


@lru_cache(maxsize=32)
def _upsample_matrix(M: int, N: int) -> sp.csr_matrix:
    """Bilinear map from an ``M x N`` grid to ``2M x 2N`` cell centers."""
    ii = np.arange(2 * M, dtype=np.float64)[:, None]
    jj = np.arange(2 * N, dtype=np.float64)[None, :]
    st = stencil((M, N), jj / 2.0 + 0.0 * ii, ii / 2.0 - 0.25 + 0.0 * jj)
    K = 4 * M * N
    rows = np.broadcast_to(np.arange(K), (4, K))
    mat = sp.csr_matrix((st.weights.ravel(), (rows.ravel(), st.idx.ravel())), shape=(K, M * N))
    mat.sum_duplicates()
    return mat


@lru_cache(maxsize=32)
def _upsample_matrix_t(M: int, N: int) -> sp.csr_matrix:
    return _upsample_matrix(M, N).T.tocsr()


def upsample2_array(x: np.ndarray) -> np.ndarray:
    C, M, N = x.shape
    return (_upsample_matrix(M, N) @ x.reshape(C, -1).T).T.reshape(C, 2 * M, 2 * N)


def upsample2_backward(g: np.ndarray) -> np.ndarray:
    C, M2, N2 = g.shape
    M, N = M2 // 2, N2 // 2
    return (_upsample_matrix_t(M, N) @ g.reshape(C, -1).T).T.reshape(C, M, N)


def pool2_cl(h: np.ndarray, M: int, N: int) -> np.ndarray:
    C = h.shape[1]
    return h.reshape(M // 2, 2, N // 2, 2, C).mean(axis=(1, 3)).reshape(-1, C)


def pool2_backward_cl(g: np.ndarray, M: int, N: int) -> np.ndarray:
    """``M x N`` is the fine (input) shape."""
    C = g.shape[1]
    g4 = np.broadcast_to(g.reshape(M // 2, 1, N // 2, 1, C), (M // 2, 2, N // 2, 2, C))
    return (0.25 * g4).reshape(-1, C)


def upsample2_cl(h: np.ndarray, M: int, N: int) -> np.ndarray:
    """``M x N`` is the coarse (input) shape."""
    return _upsample_matrix(M, N) @ h


def upsample2_backward_cl(g: np.ndarray, M: int, N: int) -> np.ndarray:
    return _upsample_matrix_t(M, N) @ g


def pool2(inp: FeatureMap) -> FeatureMap:
    return FeatureMap(inp.grid.coarsen(2), pool2_array(inp.data))


def upsample2(inp: FeatureMap) -> FeatureMap:
    return FeatureMap(_build(2 * inp.grid.rows, 2 * inp.grid.cols), upsample2_array(inp.data))
