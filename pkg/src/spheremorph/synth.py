"""Synthetic subjects with known warps, plus brute-force reference oracles.

Everything here favors clarity over speed: the Euler integrator and the
Monte-Carlo KL are the independent references the fast paths are checked
against, so they deliberately share no interpolation or algebra code with
them.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage
from scipy.special import sph_harm_y

from .fields import DeformationField, FeatureMap, LabelMap, VelocityField
from .grid import SphereGrid, great_circle, polar_to_cartesian
from .likelihood import Atlas
from .prior import WeightedGraphLaplacian, geodesic_array

TEMPLATE_DEGREE = 8
VELOCITY_DEGREE = 8
#: Amplitude of subject-specific feature variation relative to the unit-variance template.
FEATURE_NOISE = 0.02


def real_sph_harm_basis(theta, phi, lmax: int, lmin: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Real orthonormal spherical harmonics at (longitude, colatitude) points.

    Returns ``(basis, degree)`` with ``basis`` shaped ``K x points.shape``.
    """
    theta = np.asarray(theta, dtype=np.float64)
    phi = np.asarray(phi, dtype=np.float64)
    out, deg = [], []
    for l in range(lmin, lmax + 1):
        for m in range(-l, l + 1):
            y = sph_harm_y(l, abs(m), phi, theta)
            if m > 0:
                out.append(np.sqrt(2.0) * (-1) ** m * y.real)
            elif m < 0:
                out.append(np.sqrt(2.0) * (-1) ** m * y.imag)
            else:
                out.append(y.real)
            deg.append(l)
    return np.stack(out), np.asarray(deg)


def random_sh_field(theta, phi, lmax: int, rng: np.random.Generator, lmin: int = 1, slope: float = 0.0) -> np.ndarray:
    """Gaussian random field band-limited to degrees ``lmin..lmax``.

    Each degree carries power ``l**-slope`` spread evenly over its orders.
    """
    basis, deg = real_sph_harm_basis(theta, phi, lmax, lmin)
    std = np.sqrt(deg.astype(np.float64) ** (-slope) / (2 * deg + 1))
    coef = rng.standard_normal(len(deg)) * std
    return np.tensordot(coef, basis, axes=1)


def _normalize(grid: SphereGrid, f: np.ndarray) -> np.ndarray:
    w = grid.cell_area
    mean = np.sum(w * f) / np.sum(w)
    f = f - mean
    var = np.sum(w * f * f) / np.sum(w)
    return f / np.sqrt(var)


def _centroids(n: int, rng: np.random.Generator) -> np.ndarray:
    # rejection keeps every Voronoi cell wide enough to own grid cells
    min_sep = 0.6 * np.sqrt(4 * np.pi / n)
    pts: list[np.ndarray] = []
    while len(pts) < n:
        p = rng.standard_normal(3)
        p /= np.linalg.norm(p)
        if all(np.arccos(np.clip(p @ q, -1, 1)) >= min_sep for q in pts):
            pts.append(p)
    return np.stack(pts)


def voronoi_labels(centroids: np.ndarray, xyz: np.ndarray) -> np.ndarray:
    """Label 1..n of the nearest centroid for unit vectors ``3 x ...``."""
    dots = np.tensordot(centroids, xyz, axes=(1, 0))
    return np.argmax(dots, axis=0) + 1


def make_template(grid: SphereGrid, n_regions: int, seed: int,
                  lmax: int = TEMPLATE_DEGREE) -> tuple[FeatureMap, LabelMap]:
    """Pseudo-convexity pattern and a Voronoi parcellation of the sphere."""
    if n_regions < 2:
        raise ValueError("need at least two regions")
    rng = np.random.default_rng(seed)
    theta, phi = grid.mesh()
    f = _normalize(grid, random_sh_field(theta, phi, lmax, rng, lmin=1))
    cents = _centroids(n_regions, rng)
    labels = voronoi_labels(cents, grid.xyz())
    missing = set(range(1, n_regions + 1)) - set(np.unique(labels).tolist())
    if missing:
        raise RuntimeError(f"regions {sorted(missing)} own no cells at this resolution")
    return FeatureMap(grid, f), LabelMap(grid, labels)


def latitude_window(grid: SphereGrid, cut: float = np.pi / 3, width: float = 0.08) -> np.ndarray:
    """Smooth ``M x 1`` step: ~0 for ``|phi - pi/2| < cut``, ~1 beyond."""
    x = (np.abs(grid.latitudes - np.pi / 2) - cut) / width
    return (0.5 * (1 + np.tanh(x)))[:, None]


def make_polar_template(grid: SphereGrid, n_regions: int, seed: int, cut: float = np.pi / 3,
                        lmax: int = TEMPLATE_DEGREE) -> tuple[FeatureMap, LabelMap]:
    """Like :func:`make_template` but with the pattern confined to high latitudes."""
    template, labels = make_template(grid, n_regions, seed, lmax)
    win = latitude_window(grid, cut)
    f = template.data[0] * win
    # unit area-weighted variance, no mean removal: the equator stays flat
    f = f / np.sqrt(np.sum(grid.cell_area * f * f) / np.sum(grid.cell_area))
    return FeatureMap(grid, f), labels


def gen_smooth_velocity(grid: SphereGrid, amplitude: float, smoothness: int = VELOCITY_DEGREE,
                        seed: int = 0, pole_cap: float = 0.25, slope: float = 3.0) -> VelocityField:
    """Random band-limited velocity with peak on-sphere speed ``amplitude``.

    Both channels are tapered by ``sin(phi)^2 / (sin(phi)^2 + pole_cap^2)``
    and the theta channel is further divided by ``sin(phi)``, so the physical
    speed ``sin(phi) * u_theta`` stays bounded and the poles are fixed points
    (no trajectory crosses a pole).
    """
    if amplitude < 0:
        raise ValueError("amplitude must be nonnegative")
    if amplitude == 0:
        return VelocityField.zeros(grid)
    rng = np.random.default_rng(seed)
    theta, phi = grid.mesh()
    ut = random_sh_field(theta, phi, smoothness, rng, lmin=1, slope=slope)
    up = random_sh_field(theta, phi, smoothness, rng, lmin=1, slope=slope)
    s = np.sin(phi)
    taper = s * s / (s * s + pole_cap**2)
    ut = ut * taper / s
    up = up * taper
    speed = np.hypot(s * ut, up)
    k = amplitude / speed.max()
    return VelocityField(grid, np.stack([ut * k, up * k]))


def euler_integrate(v: VelocityField, nsteps: int = 1024) -> DeformationField:
    """Forward-Euler flow of a stationary field over unit time."""
    if nsteps < 1:
        raise ValueError("nsteps must be at least 1")
    grid = v.grid
    M, N = grid.shape
    pad = 2
    padded = np.pad(v.data, ((0, 0), (0, 0), (pad, pad)), mode="wrap")
    theta0, phi0 = grid.mesh()
    th, ph = theta0.copy(), phi0.copy()
    h = 1.0 / nsteps
    for _ in range(nsteps):
        col = np.mod(th, 2 * np.pi) / grid.dtheta + pad
        row = np.clip(ph / grid.dphi - 0.5, 0, M - 1)
        coords = np.stack([row, col])
        vt = ndimage.map_coordinates(padded[0], coords, order=1, mode="nearest")
        vp = ndimage.map_coordinates(padded[1], coords, order=1, mode="nearest")
        th = th + h * vt
        ph = ph + h * vp
    return DeformationField(grid, np.stack([th - theta0, ph - phi0]))


def target_points(d: DeformationField) -> np.ndarray:
    th, ph = d.targets()
    return polar_to_cartesian(th, ph)


def endpoint_error(recovered: DeformationField, truth: DeformationField) -> float:
    """Area-weighted mean great-circle distance between target points."""
    w = recovered.grid.cell_area
    dist = great_circle(target_points(recovered), target_points(truth))
    return float(np.sum(w * dist) / np.sum(w))


def mean_displacement(d: DeformationField) -> float:
    return endpoint_error(d, DeformationField.zeros(d.grid))


@dataclass(eq=False)
class SyntheticSubject:
    """``features`` equal ``native`` resampled through ``true_phi``.

    ``native`` is the subject's own pattern in template coordinates (template
    plus subject-specific variation); ``true_phi = exp(velocity)`` maps template
    to subject.  Registering the subject back to the template should recover
    the inverse warp, available as :attr:`registration_truth`.
    """

    features: FeatureMap
    labels: LabelMap
    true_phi: DeformationField
    seed: int
    native: FeatureMap
    velocity: VelocityField
    _truth: DeformationField | None = field(default=None, repr=False)

    @property
    def registration_truth(self) -> DeformationField:
        if self._truth is None:
            self._truth = euler_integrate(VelocityField(self.velocity.grid, -self.velocity.data), 1024)
        return self._truth


def make_subject(template: FeatureMap, labels: LabelMap, amplitude: float, seed: int,
                 feature_noise: float = FEATURE_NOISE, envelope: np.ndarray | None = None,
                 smoothness: int = VELOCITY_DEGREE) -> SyntheticSubject:
    from .sampler import sample_periodic
    from .registration.warp import warp_labels

    grid = template.grid
    rng = np.random.default_rng([seed, 1])
    theta, phi = grid.mesh()
    var = np.zeros_like(template.data)
    if feature_noise > 0:
        for c in range(template.channels):
            var[c] = _normalize(grid, random_sh_field(theta, phi, TEMPLATE_DEGREE, rng, lmin=1))
        env = 1.0 if envelope is None else envelope
        var = feature_noise * env * var
    native = FeatureMap(grid, template.data + var)
    vel = gen_smooth_velocity(grid, amplitude, smoothness, seed=int(rng.integers(2**31)))
    phi_true = euler_integrate(vel, 1024)
    feats = sample_periodic(native, phi_true)
    labs = warp_labels(labels, phi_true)
    return SyntheticSubject(feats, labs, phi_true, seed, native, vel)


def noise_envelope(grid: SphereGrid, seed: int, lmax: int = 3) -> np.ndarray:
    """Smooth positive map (geometric mean 1) modulating subject variability."""
    rng = np.random.default_rng([seed, 7])
    theta, phi = grid.mesh()
    g = _normalize(grid, random_sh_field(theta, phi, lmax, rng, lmin=1))
    return np.exp(0.5 * g)


def make_subjects(template: FeatureMap, labels: LabelMap, n: int, amplitude: float, seed: int,
                  feature_noise: float = FEATURE_NOISE, smoothness: int = VELOCITY_DEGREE) -> list[SyntheticSubject]:
    env = noise_envelope(template.grid, seed)
    return [
        make_subject(template, labels, amplitude, seed * 1000 + k, feature_noise, env, smoothness)
        for k in range(n)
    ]


def make_atlas(subjects: list[SyntheticSubject], variance_floor: float | None = None) -> Atlas:
    """Mean and variance of the subjects' patterns in template coordinates."""
    stack = np.stack([s.native.data for s in subjects])
    grid = subjects[0].native.grid
    return Atlas(FeatureMap(grid, stack.mean(axis=0)), FeatureMap(grid, stack.var(axis=0)), variance_floor)


def dense_kl(mu: DeformationField, sigma_diag: np.ndarray, L: WeightedGraphLaplacian, lam: float) -> float:
    """Closed-form KL bracket evaluated with dense matrices."""
    vel, _, _ = geodesic_array(mu.grid, mu.data)
    Ld = L.laplacian.toarray()
    lap = lam * Ld
    var = np.asarray(sigma_diag, dtype=np.float64).reshape(3, -1)
    total = 0.0
    for c in range(3):
        m = vel[c].ravel()
        total += np.trace(lap @ np.diag(var[c])) - np.sum(np.log(var[c])) + m @ lap @ m
    return 0.5 * total


def mc_kl(mu: DeformationField, sigma_diag: np.ndarray, L: WeightedGraphLaplacian, lam: float,
          nsamples: int = 1_000_000, seed: int = 0, chunk: int = 20_000) -> tuple[float, float]:
    """Monte-Carlo estimate of ``E_q[log q - log p]`` and its standard error.

    ``p`` is the improper Gaussian with precision ``lam * L``; its
    normalizer and the ``-n/2 (1 + log 2 pi)`` part of ``log q`` are added
    back so the estimate targets the same constant-free value as
    :func:`spheremorph.prior.prior_kl_term`.
    """
    if nsamples < 10_000:
        raise ValueError("use at least 1e4 samples")
    vel, _, _ = geodesic_array(mu.grid, mu.data)
    m = vel.reshape(3, -1)
    var = np.asarray(sigma_diag, dtype=np.float64).reshape(3, -1)
    sd = np.sqrt(var)
    n = m.size
    Ld = L.laplacian.toarray()
    rng = np.random.default_rng(seed)
    const = -0.5 * np.sum(np.log(var)) + 0.5 * n
    total = 0.0
    total_sq = 0.0
    done = 0
    while done < nsamples:
        k = min(chunk, nsamples - done)
        z = rng.standard_normal((k, 3, m.shape[1]))
        x = m[None] + sd[None] * z
        quad = np.einsum("kci,ij,kcj->k", x, Ld, x)
        vals = const - 0.5 * np.sum(z * z, axis=(1, 2)) + 0.5 * lam * quad
        total += vals.sum()
        total_sq += np.sum(vals * vals)
        done += k
    mean = total / nsamples
    var_s = max(total_sq / nsamples - mean * mean, 0.0)
    return float(mean), float(np.sqrt(var_s / nsamples))
