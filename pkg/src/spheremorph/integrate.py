"""Group exponential of a stationary velocity field by scaling and squaring."""

from __future__ import annotations

import numpy as np

from .fields import DeformationField, VelocityField
from .grid import SphereGrid
from .sampler import displacement_stencil, interp, warp_vjp


class IntegrationError(FloatingPointError):
    pass


def exp_array(grid: SphereGrid, v: np.ndarray, steps: int = 7, keep: bool = False):
    """Integrate a ``2 x M x N`` velocity; returns ``(phi, tape)``.

    Each squaring is ``d <- d + d(x + d(x))``.  The theta channel is a
    residual angle, so resampling it never crosses the 0/2pi seam.
    """
    if steps < 1:
        raise ValueError("scaling and squaring needs at least one step")
    d = np.asarray(v, dtype=np.float64) / (2.0**steps)
    if not np.all(np.isfinite(d)):
        raise IntegrationError("velocity field is not finite")
    tape = []
    for k in range(steps):
        st = displacement_stencil(grid, d)
        if keep:
            tape.append((d, st))
        d = d + interp(d, st)
        if not np.all(np.isfinite(d)):
            raise IntegrationError(f"non-finite displacement after squaring step {k + 1}")
    return d, tape


def exp_vjp(grid: SphereGrid, g: np.ndarray, tape, steps: int) -> np.ndarray:
    """Pull a gradient on the integrated displacement back to the velocity."""
    g = np.asarray(g, dtype=np.float64)
    for d, st in reversed(tape):
        gdata, gd = warp_vjp(d, grid, g, st)
        g = g + gdata + gd
    return g / (2.0**steps)


def scaling_and_squaring(v: VelocityField, steps: int = 7) -> DeformationField:
    d, _ = exp_array(v.grid, v.data, steps)
    return DeformationField(v.grid, d)


def compose(grid: SphereGrid, outer: np.ndarray, inner: np.ndarray) -> np.ndarray:
    """Displacement of ``outer o inner``: ``inner(x) + outer(x + inner(x))``."""
    st = displacement_stencil(grid, inner)
    return inner + interp(outer, st)
