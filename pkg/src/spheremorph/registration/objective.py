"""Full registration loss (data term + KL to the Laplacian prior) with gradients."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..grid import SphereGrid
from ..integrate import exp_array, exp_vjp
from ..likelihood import Atlas, data_array
from ..prior import WeightedGraphLaplacian, build_weighted_laplacian, prior_terms
from ..sampler import displacement_stencil, interp, interp_vjp_coords


@dataclass
class Problem:
    """One moving image against one atlas, flattened to arrays."""

    grid: SphereGrid
    moving: np.ndarray  # C x M x N
    mean: np.ndarray
    weights: np.ndarray
    laplacian: WeightedGraphLaplacian
    lam: float
    steps: int = 7

    @classmethod
    def build(cls, moving: np.ndarray, atlas: Atlas, lam: float, steps: int = 7,
              spherical: bool = True, laplacian: WeightedGraphLaplacian | None = None):
        if laplacian is None:
            laplacian = build_weighted_laplacian(atlas.grid, weighted=spherical)
        return cls(atlas.grid, np.asarray(moving, dtype=np.float64), atlas.mean.data,
                   atlas.weights(distortion=spherical), laplacian, float(lam), steps)


@dataclass
class Evaluation:
    loss: float
    data: float
    prior: float
    grad_mu: np.ndarray
    grad_logvar: np.ndarray | None
    phi: np.ndarray
    clamped: int


def tangent_basis(grid: SphereGrid):
    """Unit vectors along increasing theta and phi at every cell, ``3 x M x N``."""
    theta, phi = grid.mesh()
    e_t = np.stack([-np.sin(theta), np.cos(theta), np.zeros_like(theta)])
    e_p = np.stack([np.cos(phi) * np.cos(theta), np.cos(phi) * np.sin(theta), -np.sin(phi)])
    return e_t, e_p


def cartesian_to_polar_velocity(grid: SphereGrid, w: np.ndarray) -> np.ndarray:
    """Project a ``3 x M x N`` Cartesian perturbation onto (theta, phi) rates."""
    e_t, e_p = tangent_basis(grid)
    s = grid.sin_lat[:, None]
    return np.stack([np.sum(e_t * w, axis=0) / s, np.sum(e_p * w, axis=0)])


def polar_velocity_vjp(grid: SphereGrid, g: np.ndarray) -> np.ndarray:
    e_t, e_p = tangent_basis(grid)
    s = grid.sin_lat[:, None]
    return e_t * (g[0] / s)[None] + e_p * g[1][None]


def evaluate(prob: Problem, mu: np.ndarray, logvar: np.ndarray | None = None,
             eps: np.ndarray | None = None) -> Evaluation:
    """Loss and gradients at velocity mean ``mu``.

    With ``eps`` (standard normal, ``3 x M x N``) the warp uses the single
    reparameterized draw ``mu + sigma * eps``; otherwise ``mu`` itself.  The
    prior always acts on the geodesic velocity of the integrated mean.
    ``logvar=None`` means a fixed point estimate whose covariance terms are
    constant and left out.
    """
    grid, steps = prob.grid, prob.steps
    stochastic = eps is not None
    if stochastic:
        if logvar is None:
            raise ValueError("stochastic evaluation needs a log-variance")
        noise_cart = np.exp(0.5 * logvar) * eps
        v = mu + cartesian_to_polar_velocity(grid, noise_cart)
    else:
        v = mu
    phi, tape = exp_array(grid, v, steps, keep=True)
    st = displacement_stencil(grid, phi)
    warped = interp(prob.moving, st)
    data, gw = data_array(warped, prob.mean, prob.weights)
    gc, gr = interp_vjp_coords(prob.moving, gw, st)
    gphi = np.stack([gc / grid.dtheta, gr / grid.dphi])

    if stochastic:
        phi_mu, tape_mu = exp_array(grid, mu, steps, keep=True)
    else:
        phi_mu, tape_mu = phi, tape
    prior, gphi_mu, glv = prior_terms(prob.laplacian, prob.lam, phi_mu, logvar)

    if stochastic:
        gv = exp_vjp(grid, gphi, tape, steps)
        gmu = gv + exp_vjp(grid, gphi_mu, tape_mu, steps)
        gnoise = polar_velocity_vjp(grid, gv)
        glv = glv + 0.5 * gnoise * noise_cart
    else:
        gmu = exp_vjp(grid, gphi + gphi_mu, tape, steps)
        phi_mu = phi
    return Evaluation(data + prior, data, prior, gmu, glv, phi_mu, st.n_clamped)
