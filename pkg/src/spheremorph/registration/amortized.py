"""Amortized registration: a spherical U-Net trained over a corpus of pairs."""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from ..fields import DeformationField, FeatureMap, VelocityField, check_same_grid
from ..integrate import exp_array
from ..likelihood import Atlas
from ..metrics import jacobian_map
from ..prior import build_weighted_laplacian
from .config import RegistrationConfig
from .instance import FIXED_VARIANCE, DivergenceError, RegistrationResult
from .objective import Problem, evaluate
from .optim import Adam
from .unet import DEFAULT_CHANNELS, SphericalUNet, build_unet


@dataclass
class TrainHistory:
    epoch_loss: list[float] = field(default_factory=list)
    wall_time: float = 0.0

    def to_dict(self) -> dict:
        return {"epoch_loss": list(self.epoch_loss), "wall_time": self.wall_time}


def network_input(moving: FeatureMap, atlas: Atlas) -> np.ndarray:
    return np.concatenate([moving.data, atlas.mean.data], axis=0)


def train_amortized(subjects: list[FeatureMap], atlas: Atlas, cfg: RegistrationConfig | None = None,
                    epochs: int = 100, channels=DEFAULT_CHANNELS, net: SphericalUNet | None = None,
                    shuffle: bool = True, callback=None) -> tuple[SphericalUNet, TrainHistory]:
    """Fit network weights to minimize the mean registration loss over ``subjects``.

    One Adam step per subject; the epoch order is a seeded permutation, so a
    fixed ``cfg.seed`` reproduces the weights exactly.  ``callback(epoch, loss)``
    is called after every epoch.
    """
    cfg = cfg or RegistrationConfig(mode="amortized")
    if not subjects:
        raise ValueError("training needs at least one subject")
    if epochs < 1:
        raise ValueError("epochs must be positive")
    grid = check_same_grid(atlas.mean, *subjects)
    rng = np.random.default_rng(cfg.seed)
    channels_in = 2 * atlas.mean.channels
    if net is None:
        net = build_unet(grid, channels, in_channels=channels_in, seed=cfg.seed, logvar_init=cfg.logvar_init)
    elif net.grid != grid or net.in_channels != channels_in:
        raise ValueError("network does not match the data grid or channel count")
    lap = build_weighted_laplacian(grid, weighted=cfg.spherical)
    probs = [Problem.build(s.data, atlas, cfg.lam, cfg.steps, cfg.spherical, lap) for s in subjects]
    inputs = [network_input(s, atlas) for s in subjects]
    keys = net.param_keys()
    opt = Adam([net.params[k] for k in keys], cfg.learning_rate)
    hist = TrainHistory()
    t0 = time.perf_counter()
    for epoch in range(epochs):
        order = rng.permutation(len(subjects)) if shuffle else np.arange(len(subjects))
        losses = []
        for i in order:
            mu, lv, cache = net.forward(inputs[i])
            if cfg.sample_stochastic:
                eps = rng.standard_normal((3,) + grid.shape)
                ev = evaluate(probs[i], mu, lv, eps)
                grads = net.backward(cache, ev.grad_mu, ev.grad_logvar)
            else:
                ev = evaluate(probs[i], mu)
                grads = net.backward(cache, ev.grad_mu, None)
            if not np.isfinite(ev.loss):
                raise DivergenceError(f"non-finite training loss in epoch {epoch + 1}", hist.epoch_loss)
            losses.append(ev.loss)
            new = opt.step([net.params[k] for k in keys], [grads[k] for k in keys])
            for k, p in zip(keys, new):
                net.params[k] = p
        hist.epoch_loss.append(float(np.mean(losses)))
        if callback is not None:
            callback(epoch + 1, hist.epoch_loss[-1])
    hist.wall_time = time.perf_counter() - t0
    return net, hist


def predict_amortized(net: SphericalUNet, moving: FeatureMap, atlas: Atlas, steps: int = 7) -> RegistrationResult:
    """One forward pass plus integration; no optimization."""
    grid = check_same_grid(moving, atlas.mean)
    if net.grid != grid:
        raise ValueError(f"network was built for grid {net.grid.shape}, data is {grid.shape}")
    t0 = time.perf_counter()
    mu, lv = net.predict(network_input(moving, atlas))
    phi, _ = exp_array(grid, mu, steps)
    wall = time.perf_counter() - t0
    phi_f = DeformationField(grid, phi)
    jac = jacobian_map(phi_f)[1]
    var = np.exp(lv) if np.all(np.isfinite(lv)) else np.full((3,) + grid.shape, FIXED_VARIANCE)
    diag = {
        "rigid_rotation": None,
        "fraction_nonpositive": jac["fraction_nonpositive"],
        "jacobian": jac,
        "wall_time": wall,
        "iterations": 0,
        "steps": steps,
    }
    return RegistrationResult(VelocityField(grid, mu), var, phi_f, np.zeros(0), diag)
