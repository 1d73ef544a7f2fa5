"""Per-pair variational MAP registration."""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from ..fields import DeformationField, FeatureMap, VelocityField, check_same_grid
from ..integrate import exp_array
from ..likelihood import Atlas
from ..metrics import jacobian_map
from ..sphconv import pool2_array, upsample2_array
from .config import RegistrationConfig
from .objective import Problem, evaluate
from .optim import Adam
from .rigid import rigid_align

FIXED_VARIANCE = 1e-8


class DivergenceError(FloatingPointError):
    def __init__(self, msg: str, trace: list[float]):
        super().__init__(msg)
        self.trace = trace


@dataclass(eq=False)
class RegistrationResult:
    mu: VelocityField
    sigma_diag: np.ndarray
    phi: DeformationField
    loss_trace: np.ndarray
    diagnostics: dict = field(default_factory=dict)

    @property
    def inverse_phi(self) -> DeformationField:
        d, _ = exp_array(self.mu.grid, -self.mu.data, self.diagnostics.get("steps", 7))
        return DeformationField(self.mu.grid, d)


def _coarsen_atlas(atlas: Atlas, level: int) -> Atlas:
    mean, var = atlas.mean.data, atlas.variance.data
    mask = None if atlas.mask is None else atlas.mask[None].astype(np.float64)
    grid = atlas.grid
    for _ in range(level):
        mean, var = pool2_array(mean), pool2_array(var)
        if mask is not None:
            mask = pool2_array(mask)
        grid = grid.coarsen(2)
    return Atlas(FeatureMap(grid, mean), FeatureMap(grid, var), atlas.variance_floor,
                 None if mask is None else mask[0] > 0)


def _optimize(prob: Problem, mu: np.ndarray, logvar: np.ndarray | None, cfg: RegistrationConfig,
              rng: np.random.Generator, trace: list[float]):
    stochastic = cfg.sample_stochastic
    params = [mu] if logvar is None else [mu, logvar]
    opt = Adam(params, cfg.learning_rate)
    lr = cfg.learning_rate

    def run(ps):
        eps = rng.standard_normal((3,) + prob.grid.shape) if stochastic else None
        ev = evaluate(prob, ps[0], ps[1] if len(ps) > 1 else None, eps)
        if not np.isfinite(ev.loss):
            raise DivergenceError("loss became non-finite", trace)
        grads = [ev.grad_mu] if len(ps) == 1 else [ev.grad_mu, ev.grad_logvar]
        return ev, grads

    ev, grads = run(params)
    start = len(trace)
    trace.append(ev.loss)
    for _ in range(cfg.iters):
        cand = opt.step(params, grads, lr)
        ev_c, grads_c = run(cand)
        if stochastic or ev_c.loss <= ev.loss:
            params, ev, grads = cand, ev_c, grads_c
            lr = min(lr * 1.1, cfg.learning_rate)
        else:
            # rejected step: keep the iterate, shrink the step
            lr *= 0.5
        trace.append(ev.loss)
        k = len(trace) - start
        if not stochastic and k > cfg.patience:
            old = trace[-1 - cfg.patience]
            if abs(old - trace[-1]) <= cfg.tol * max(abs(trace[-1]), 1e-300):
                break
    return params, ev


def register_instance(moving: FeatureMap, atlas: Atlas, cfg: RegistrationConfig | None = None) -> RegistrationResult:
    """Minimize data term + KL over a dense velocity mean (and log-variance)."""
    cfg = cfg or RegistrationConfig()
    grid = check_same_grid(moving, atlas.mean)
    t0 = time.perf_counter()
    rng = np.random.default_rng(cfg.seed)
    rotation = None
    data = moving.data
    if cfg.rigid:
        angles, rotated = rigid_align(moving, atlas, cfg.coarse_step)
        rotation = angles
        data = rotated.data

    levels = cfg.multires_levels
    trace: list[float] = []
    mu = None
    logvar = None
    for level in reversed(range(levels)):
        sub = data
        for _ in range(level):
            sub = pool2_array(sub)
        at = _coarsen_atlas(atlas, level) if level else atlas
        prob = Problem.build(sub, at, cfg.lam, cfg.steps, spherical=cfg.spherical)
        # coarse cells stand for 4**level fine cells in the data sum
        scale = 4.0**level
        prob.weights = prob.weights * scale
        if mu is None:
            mu = np.zeros((2,) + at.grid.shape)
            if cfg.sample_stochastic:
                logvar = np.full((3,) + at.grid.shape, cfg.logvar_init)
        else:
            mu = upsample2_array(mu)
            if logvar is not None:
                logvar = upsample2_array(logvar)
        params, ev = _optimize(prob, mu, logvar, cfg, rng, trace)
        mu = params[0]
        logvar = params[1] if len(params) > 1 else None

    phi, _ = exp_array(grid, mu, cfg.steps)
    phi_f = DeformationField(grid, phi)
    jac = jacobian_map(phi_f)[1]
    var = np.exp(logvar) if logvar is not None else np.full((3,) + grid.shape, FIXED_VARIANCE)
    diag = {
        "rigid_rotation": None if rotation is None else [float(a) for a in rotation],
        "fraction_nonpositive": jac["fraction_nonpositive"],
        "jacobian": jac,
        "clamped": int(ev.clamped),
        "wall_time": time.perf_counter() - t0,
        "iterations": len(trace) - 1,
        "steps": cfg.steps,
        "final_data": ev.data,
        "final_prior": ev.prior,
    }
    return RegistrationResult(VelocityField(grid, mu), var, phi_f, np.asarray(trace), diag)
