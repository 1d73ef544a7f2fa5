"""Small spherical U-Net predicting the velocity posterior.

Four gnomonic-conv + pool blocks down, four upsample + gnomonic-conv blocks
up with skip connections, and two heads: the velocity mean (theta, phi) and
the log-variance of the three Cartesian components.  Forward and backward
passes are written out by hand on top of :mod:`spheremorph.sphconv`.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..grid import SphereGrid
from ..gradcheck import DiffOp
from ..sphconv import (conv_backward_cl, conv_forward_cl, pool2_backward_cl, pool2_cl,
                       upsample2_backward_cl, upsample2_cl)

LEAK = 0.2
DEPTH = 4
DEFAULT_CHANNELS = (16, 32, 32, 32)


def _lrelu(x):
    return np.where(x > 0, x, LEAK * x)


def _lrelu_grad(pre, g):
    return np.where(pre > 0, g, LEAK * g)


@dataclass(eq=False)
class SphericalUNet:
    grid: SphereGrid
    in_channels: int
    channels: tuple[int, ...]
    params: dict[str, np.ndarray] = field(repr=False)
    logvar_init: float = -10.0

    def layer_names(self) -> list[str]:
        names = [f"enc{l}" for l in range(DEPTH)] + [f"dec{l}" for l in reversed(range(DEPTH))]
        return names + ["head_mu", "head_logvar"]

    def param_keys(self) -> list[str]:
        return [f"{n}.{k}" for n in self.layer_names() for k in ("w", "b")]

    def _conv(self, name, h, M, N):
        return conv_forward_cl(h, self.params[name + ".w"], self.params[name + ".b"], M, N)

    def _shapes(self):
        M, N = self.grid.shape
        return [(M >> l, N >> l) for l in range(DEPTH + 1)]

    def forward(self, x: np.ndarray):
        """Returns ``(mu, logvar, cache)`` for input ``Cin x M x N``.

        Internally activations are channel-last, ``MN x C``.
        """
        if x.shape != (self.in_channels,) + self.grid.shape:
            raise ValueError(f"network expects input {(self.in_channels,) + self.grid.shape}, got {x.shape}")
        shapes = self._shapes()
        cache = {}
        h = np.ascontiguousarray(x.reshape(self.in_channels, -1).T)
        skips = []
        for l in range(DEPTH):
            pre, taps = self._conv(f"enc{l}", h, *shapes[l])
            cache[f"enc{l}"] = (taps, pre)
            h = _lrelu(pre)
            skips.append(h)
            h = pool2_cl(h, *shapes[l])
        for l in reversed(range(DEPTH)):
            up = upsample2_cl(h, *shapes[l + 1])
            cat = np.concatenate([up, skips[l]], axis=1)
            pre, taps = self._conv(f"dec{l}", cat, *shapes[l])
            cache[f"dec{l}"] = (taps, pre, up.shape[1])
            h = _lrelu(pre)
        mu, taps_mu = self._conv("head_mu", h, *shapes[0])
        lv, taps_lv = self._conv("head_logvar", h, *shapes[0])
        cache["head"] = (taps_mu, taps_lv)
        M, N = shapes[0]
        return mu.T.reshape(2, M, N), lv.T.reshape(3, M, N), cache

    def backward(self, cache, g_mu: np.ndarray, g_logvar: np.ndarray | None = None) -> dict[str, np.ndarray]:
        """Parameter gradients (and ``"input"``) for output cotangents in ``C x M x N`` layout."""
        shapes = self._shapes()
        M, N = shapes[0]
        grads: dict[str, np.ndarray] = {}
        taps_mu, taps_lv = cache["head"]
        gm = np.ascontiguousarray(g_mu.reshape(2, -1).T)
        gh, grads["head_mu.w"], grads["head_mu.b"] = conv_backward_cl(gm, self.params["head_mu.w"], taps_mu, M, N)
        if g_logvar is None:
            grads["head_logvar.w"] = np.zeros_like(self.params["head_logvar.w"])
            grads["head_logvar.b"] = np.zeros_like(self.params["head_logvar.b"])
        else:
            gl = np.ascontiguousarray(g_logvar.reshape(3, -1).T)
            gh2, grads["head_logvar.w"], grads["head_logvar.b"] = conv_backward_cl(
                gl, self.params["head_logvar.w"], taps_lv, M, N)
            gh = gh + gh2
        g_skips: list[np.ndarray | None] = [None] * DEPTH
        for l in range(DEPTH):
            taps, pre, n_up = cache[f"dec{l}"]
            gpre = _lrelu_grad(pre, gh)
            gcat, grads[f"dec{l}.w"], grads[f"dec{l}.b"] = conv_backward_cl(
                gpre, self.params[f"dec{l}.w"], taps, *shapes[l])
            g_skips[l] = gcat[:, n_up:]
            gh = upsample2_backward_cl(np.ascontiguousarray(gcat[:, :n_up]), *shapes[l + 1])
        for l in reversed(range(DEPTH)):
            taps, pre = cache[f"enc{l}"]
            g = pool2_backward_cl(gh, *shapes[l]) + g_skips[l]
            gpre = _lrelu_grad(pre, g)
            gh, grads[f"enc{l}.w"], grads[f"enc{l}.b"] = conv_backward_cl(
                gpre, self.params[f"enc{l}.w"], taps, *shapes[l])
        grads["input"] = gh.T.reshape(self.in_channels, M, N)
        return grads

    def predict(self, x: np.ndarray):
        mu, lv, _ = self.forward(x)
        return mu, lv

    def get_flat(self) -> np.ndarray:
        return np.concatenate([self.params[k].ravel() for k in self.param_keys()])

    def set_flat(self, vec: np.ndarray) -> None:
        i = 0
        for k in self.param_keys():
            p = self.params[k]
            self.params[k] = vec[i:i + p.size].reshape(p.shape).copy()
            i += p.size

    def architecture(self) -> dict:
        return {
            "grid": list(self.grid.shape),
            "in_channels": self.in_channels,
            "channels": list(self.channels),
            "logvar_init": self.logvar_init,
        }


def save_unet(net: SphericalUNet, path, meta: dict | None = None):
    """Weights go to a float64 tensor bundle, so a reload is bit-exact."""
    from ..io import write_tensors

    return write_tensors(path, net.params, dict(meta or {}, architecture=net.architecture()))


def load_unet(path) -> tuple[SphericalUNet, dict]:
    from ..grid import make_grid
    from ..io import FormatError, read_tensors

    tensors, meta = read_tensors(path)
    try:
        arch = meta["architecture"]
        net = SphericalUNet(make_grid(*arch["grid"]), int(arch["in_channels"]), tuple(arch["channels"]),
                            tensors, float(arch["logvar_init"]))
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"{path}: bad model metadata ({exc})") from None
    missing = set(net.param_keys()) - set(tensors)
    if missing:
        raise FormatError(f"{path}: missing tensors {sorted(missing)[:3]}")
    return net, meta


def build_unet(grid: SphereGrid, channels_per_level=DEFAULT_CHANNELS, in_channels: int = 2,
               seed: int = 0, head_scale: float = 0.0, logvar_init: float = -10.0) -> SphericalUNet:
    """He-initialized network; the heads start at zero (identity warp) unless
    ``head_scale`` is positive."""
    chans = tuple(int(c) for c in channels_per_level)
    if len(chans) != DEPTH:
        raise ValueError(f"need {DEPTH} channel widths, got {len(chans)}")
    f = 2**DEPTH
    if grid.rows % f or grid.cols % f:
        raise ValueError(f"grid {grid.shape} must be divisible by {f} in both dimensions")
    rng = np.random.default_rng(seed)

    def conv(cin, cout):
        w = rng.standard_normal((cout, cin, 3, 3)) * np.sqrt(2.0 / (cin * 9 * (1 + LEAK**2)))
        return w, np.zeros(cout)

    params: dict[str, np.ndarray] = {}
    cin = in_channels
    for l in range(DEPTH):
        params[f"enc{l}.w"], params[f"enc{l}.b"] = conv(cin, chans[l])
        cin = chans[l]
    h = chans[-1]
    for l in reversed(range(DEPTH)):
        params[f"dec{l}.w"], params[f"dec{l}.b"] = conv(h + chans[l], chans[l])
        h = chans[l]
    params["head_mu.w"] = rng.standard_normal((2, h, 3, 3)) * head_scale
    params["head_mu.b"] = np.zeros(2)
    params["head_logvar.w"] = rng.standard_normal((3, h, 3, 3)) * head_scale
    params["head_logvar.b"] = np.full(3, float(logvar_init))
    return SphericalUNet(grid, in_channels, chans, params, logvar_init)


def unet_gradcheck_op(net: SphericalUNet, rng: np.random.Generator) -> tuple[DiffOp, np.ndarray]:
    """Whole-network check over all parameters at a fixed random input."""
    x = rng.standard_normal((net.in_channels,) + net.grid.shape)

    def fwd(theta):
        net.set_flat(theta)
        mu, lv, _ = net.forward(x)
        return np.concatenate([mu.ravel(), lv.ravel()])

    def vjp(theta, g):
        net.set_flat(theta)
        mu, lv, cache = net.forward(x)
        gm = g[: mu.size].reshape(mu.shape)
        gl = g[mu.size:].reshape(lv.shape)
        grads = net.backward(cache, gm, gl)
        return np.concatenate([grads[k].ravel() for k in net.param_keys()])

    return DiffOp("unet/params", fwd, vjp), net.get_flat()
