"""Finite-difference check of hand-written adjoints."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np


@dataclass
class DiffOp:
    """A forward map and its vector-Jacobian product at a point."""

    name: str
    forward: Callable[[np.ndarray], np.ndarray]
    vjp: Callable[[np.ndarray, np.ndarray], np.ndarray]


def grad_check(op: DiffOp, x: np.ndarray, step: float = 1e-6, directions: int = 32,
               seed: int = 0) -> float:
    """Largest relative error between central differences and the adjoint.

    For each random direction ``u`` and random cotangent ``w`` compares
    ``<w, (f(x + h u) - f(x - h u)) / 2h>`` with ``<vjp(x, w), u>``.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    rng = np.random.default_rng(seed)
    x = np.asarray(x, dtype=np.float64)
    y0 = np.asarray(op.forward(x))
    worst = 0.0
    for _ in range(max(directions, 1)):
        u = rng.standard_normal(x.shape)
        w = rng.standard_normal(y0.shape)
        fp = np.sum(w * op.forward(x + step * u))
        fm = np.sum(w * op.forward(x - step * u))
        fd = (fp - fm) / (2 * step)
        an = float(np.sum(op.vjp(x, w) * u))
        scale = max(abs(fd), abs(an), 1e-12)
        worst = max(worst, abs(fd - an) / scale)
    return worst


def standard_suite(seed: int = 0) -> dict[str, tuple[float, float]]:
    """Run every adjoint in the package; returns ``name -> (error, tolerance)``."""
    from .grid import make_grid
    from .integrate import exp_array, exp_vjp
    from .likelihood import data_array
    from .prior import build_weighted_laplacian, prior_terms
    from .registration.objective import Problem, evaluate
    from .registration.unet import build_unet, unet_gradcheck_op
    from .sampler import displacement_stencil, interp, interp_vjp_coords, interp_vjp_data
    from .sphconv import (conv_backward, conv_forward, pool2_array, pool2_backward,
                          upsample2_array, upsample2_backward)
    from .likelihood import Atlas
    from .fields import FeatureMap

    rng = np.random.default_rng(seed)
    grid = make_grid(8, 16)
    out: dict[str, tuple[float, float]] = {}
    smooth = _smooth_map(grid, 2, rng)

    # sampler, linear in the data
    d = _cell_interior_displacement(grid, rng)
    st = displacement_stencil(grid, d)
    op = DiffOp("sampler/data", lambda m: interp(m, st), lambda m, g: interp_vjp_data(g, st))
    out[op.name] = (grad_check(op, rng.standard_normal((2,) + grid.shape), 1e-3), 1e-9)

    def samp_fwd(dd):
        return interp(smooth, displacement_stencil(grid, dd))

    def samp_vjp(dd, g):
        gc, gr = interp_vjp_coords(smooth, g, displacement_stencil(grid, dd))
        return np.stack([gc / grid.dtheta, gr / grid.dphi])

    op = DiffOp("sampler/coords", samp_fwd, samp_vjp)
    out[op.name] = (grad_check(op, d, 1e-6), 1e-4)

    def exp_fwd(v):
        return exp_array(grid, v, 7)[0]

    def exp_bwd(v, g):
        _, tape = exp_array(grid, v, 7, keep=True)
        return exp_vjp(grid, g, tape, 7)

    v = 0.3 * _smooth_map(grid, 2, rng) * np.array([grid.dtheta, grid.dphi])[:, None, None]
    op = DiffOp("scaling_and_squaring", exp_fwd, exp_bwd)
    out[op.name] = (grad_check(op, v, 1e-6), 1e-4)

    mean = _smooth_map(grid, 1, rng)
    wts = grid.sin_lat[None, :, None] / (0.5 + rng.random((1,) + grid.shape))
    op = DiffOp("data_term", lambda m: np.array(data_array(m, mean, wts)[0]),
                lambda m, g: g * data_array(m, mean, wts)[1])
    out[op.name] = (grad_check(op, rng.standard_normal((1,) + grid.shape), 1e-4), 1e-6)

    L = build_weighted_laplacian(grid)
    op = DiffOp("prior/displacement", lambda dd: np.array(prior_terms(L, 3.0, dd, None)[0]),
                lambda dd, g: g * prior_terms(L, 3.0, dd, None)[1])
    out[op.name] = (grad_check(op, v, 1e-6), 1e-6)
    lv = rng.standard_normal((3,) + grid.shape) - 2
    op = DiffOp("prior/logvar", lambda x: np.array(prior_terms(L, 3.0, v, x)[0]),
                lambda x, g: g * prior_terms(L, 3.0, v, x)[2])
    out[op.name] = (grad_check(op, lv, 1e-5), 1e-6)

    x = rng.standard_normal((3,) + grid.shape)
    w = rng.standard_normal((4, 3, 3, 3))
    b = rng.standard_normal(4)
    _, cols = conv_forward(x, w, b)
    op = DiffOp("spherical_conv/input", lambda xx: conv_forward(xx, w, b)[0],
                lambda xx, g: conv_backward(g, xx.shape, w, cols)[0])
    out[op.name] = (grad_check(op, x, 1e-3), 1e-9)
    op = DiffOp("spherical_conv/weights", lambda ww: conv_forward(x, ww, b)[0],
                lambda ww, g: conv_backward(g, x.shape, ww, cols)[1])
    out[op.name] = (grad_check(op, w, 1e-3), 1e-9)
    op = DiffOp("pool2", pool2_array, lambda xx, g: pool2_backward(g))
    out[op.name] = (grad_check(op, x, 1e-3), 1e-9)
    op = DiffOp("upsample2", upsample2_array, lambda xx, g: upsample2_backward(g))
    out[op.name] = (grad_check(op, x, 1e-3), 1e-9)

    atlas = Atlas(FeatureMap(grid, mean), FeatureMap(grid, 0.5 + rng.random((1,) + grid.shape)))
    prob = Problem.build(smooth[:1] + 0.3 * mean, atlas, lam=2.0)
    op = DiffOp("loss/velocity", lambda vv: np.array(evaluate(prob, vv).loss),
                lambda vv, g: g * evaluate(prob, vv).grad_mu)
    out[op.name] = (grad_check(op, v, 1e-6), 1e-3)

    net = build_unet(make_grid(16, 32), in_channels=2, seed=seed, head_scale=0.1)
    op, x0 = unet_gradcheck_op(net, rng)
    # small step so no probe crosses a leaky-ReLU kink
    out[op.name] = (grad_check(op, x0, 1e-7, directions=32), 1e-3)
    return out


def _smooth_map(grid, channels: int, rng: np.random.Generator) -> np.ndarray:
    theta, phi = grid.mesh()
    maps = []
    for _ in range(channels):
        a, b, c = rng.standard_normal(3)
        maps.append(a * np.sin(phi) * np.cos(theta + b) + c * np.cos(2 * phi) + 0.5 * np.sin(2 * theta) * np.sin(phi))
    return np.stack(maps)


def _cell_interior_displacement(grid, rng: np.random.Generator) -> np.ndarray:
    """Displacements whose targets sit well inside bilinear cells."""
    M, N = grid.shape
    fc = rng.uniform(0.2, 0.8, grid.shape) + rng.integers(-2, 3, grid.shape)
    fr = rng.uniform(0.2, 0.8, grid.shape)
    ii = np.arange(M)[:, None]
    # keep row targets inside [0, M-1] so no sample is clamped
    fr = np.where(ii + fr > M - 1, fr - 1.0, fr)
    return np.stack([fc * grid.dtheta, fr * grid.dphi])
