"""Latitude-weighted graph Laplacian prior on geodesic (Cartesian) velocities."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .fields import DeformationField
from .grid import SphereGrid


@dataclass(frozen=True, eq=False)
class WeightedGraphLaplacian:
    grid: SphereGrid
    adjacency: sp.csr_matrix
    degree: np.ndarray
    laplacian: sp.csr_matrix
    weighted: bool = True
    #: signed edge-cell incidence ``B`` (one +1/-1 row per edge) and edge weights;
    #: ``L = B^T diag(w) B``, and ``B x`` is exactly zero for constant ``x``
    incidence: sp.csr_matrix | None = None
    edge_weights: np.ndarray | None = None

    def quadratic(self, x: np.ndarray) -> float:
        """``x^T L x = sum_e w_e (x_a - x_b)^2`` for a flattened grid signal."""
        x = np.asarray(x, dtype=np.float64).ravel()
        diff = self.incidence @ x
        return float(np.sum(self.edge_weights * diff * diff))


def grid_edges(grid: SphereGrid, weighted: bool = True):
    """Edge list ``(a, b, w)`` over flat cell indices.

    Horizontal edges wrap around in longitude and carry ``1/sin(phi)``;
    vertical edges carry 1.  With ``weighted=False`` every edge has weight 1.
    """
    M, N = grid.shape
    idx = np.arange(M * N).reshape(M, N)
    ha = idx.ravel()
    hb = np.roll(idx, -1, axis=1).ravel()
    if weighted:
        hw = np.repeat(1.0 / grid.sin_lat, N)
    else:
        hw = np.ones(M * N)
    va = idx[:-1].ravel()
    vb = idx[1:].ravel()
    vw = np.ones(va.size)
    return np.concatenate([ha, va]), np.concatenate([hb, vb]), np.concatenate([hw, vw])


def build_weighted_laplacian(grid: SphereGrid, weighted: bool = True) -> WeightedGraphLaplacian:
    a, b, w = grid_edges(grid, weighted)
    n = grid.size
    A = sp.coo_matrix((np.concatenate([w, w]), (np.concatenate([a, b]), np.concatenate([b, a]))), shape=(n, n)).tocsr()
    A.sum_duplicates()
    deg = np.asarray(A.sum(axis=1)).ravel()
    L = (sp.diags(deg) - A).tocsr()
    deg.setflags(write=False)
    e = np.arange(a.size)
    B = sp.csr_matrix((np.concatenate([np.ones(a.size), -np.ones(a.size)]),
                       (np.concatenate([e, e]), np.concatenate([a, b]))), shape=(a.size, n))
    w = np.asarray(w, dtype=np.float64)
    w.setflags(write=False)
    return WeightedGraphLaplacian(grid, A, deg, L, weighted, B, w)


@dataclass(eq=False)
class GeodesicVelocityField:
    grid: SphereGrid
    data: np.ndarray  # 3 x M x N

    @property
    def vx(self) -> np.ndarray:
        return self.data[0]

    @property
    def vy(self) -> np.ndarray:
        return self.data[1]

    @property
    def vz(self) -> np.ndarray:
        return self.data[2]


def geodesic_array(grid: SphereGrid, d: np.ndarray):
    """Chord displacement ``T(x + d) - T(x)`` and the Jacobian of ``T`` at the
    targets, returned as ``(vel, dT_dtheta, dT_dphi)``, each ``3 x M x N``."""
    theta, phi = grid.mesh()
    tt = theta + d[0]
    pt = phi + d[1]
    st, ct = np.sin(tt), np.cos(tt)
    sp_, cp = np.sin(pt), np.cos(pt)
    target = np.stack([sp_ * ct, sp_ * st, cp])
    vel = target - grid.xyz()
    dth = np.stack([-sp_ * st, sp_ * ct, np.zeros_like(tt)])
    dph = np.stack([cp * ct, cp * st, -sp_])
    return vel, dth, dph


def geodesic_velocity(d: DeformationField) -> GeodesicVelocityField:
    vel, _, _ = geodesic_array(d.grid, d.data)
    return GeodesicVelocityField(d.grid, vel)


def prior_terms(L: WeightedGraphLaplacian, lam: float, d: np.ndarray, logvar: np.ndarray | None):
    """KL bracket of the loss and its gradients.

    Returns ``(value, grad_d, grad_logvar)`` for
    ``0.5 * [lam * tr(D S) - sum(log S) + sum_c mu_c^T (lam L) mu_c]`` where
    ``mu = T(x + d) - T(x)`` and ``S = exp(logvar)`` is a ``3 x M x N``
    diagonal covariance.  ``logvar=None`` drops the covariance part.
    """
    grid = L.grid
    vel, dth, dph = geodesic_array(grid, d)
    flat = vel.reshape(3, -1)
    # edge differences vanish exactly for constant fields, so the null space costs exactly 0
    diff = L.incidence @ flat.T  # E x 3
    value = 0.5 * lam * float(np.sum(L.edge_weights[:, None] * diff * diff))
    Lmu = (L.incidence.T @ (L.edge_weights[:, None] * diff)).T  # 3 x MN
    gvel = (lam * Lmu).reshape(vel.shape)
    grad_d = np.stack([np.sum(gvel * dth, axis=0), np.sum(gvel * dph, axis=0)])
    grad_lv = None
    if logvar is not None:
        var = np.exp(logvar)
        deg = L.degree.reshape(grid.shape)
        value += 0.5 * float(np.sum(lam * deg[None] * var) - np.sum(logvar))
        grad_lv = 0.5 * (lam * deg[None] * var - 1.0)
    return value, grad_d, grad_lv


def prior_kl_term(mu: DeformationField, sigma_diag, L: WeightedGraphLaplacian, lam: float) -> float:
    """KL divergence to the Laplacian prior, additive constants dropped.

    ``sigma_diag`` holds per-vertex variances of the three Cartesian
    components, shape ``3 x M x N``.
    """
    if lam <= 0:
        raise ValueError("lambda must be positive")
    var = np.asarray(sigma_diag, dtype=np.float64)
    if var.shape != (3,) + mu.grid.shape:
        raise ValueError(f"sigma_diag must have shape {(3,) + mu.grid.shape}, got {var.shape}")
    if np.any(var <= 0) or not np.all(np.isfinite(var)):
        raise ValueError("variances must be positive and finite")
    if mu.grid != L.grid:
        raise ValueError("Laplacian built for a different grid")
    value, _, _ = prior_terms(L, lam, mu.data, np.log(var))
    return value
