"""Evaluation metrics: area-weighted Dice, boundary distance, Jacobian maps."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .fields import DeformationField, FeatureMap, LabelMap, check_same_grid

DEFAULT_RADIUS_MM = 100.0


def _area(labels: LabelMap) -> np.ndarray:
    return labels.grid.cell_area


def dice(a: LabelMap, b: LabelMap, region: int) -> float | None:
    """Solid-angle Dice overlap of one region; ``None`` if absent from both."""
    check_same_grid(a, b)
    w = _area(a)
    ma = a.labels == region
    mb = b.labels == region
    denom = np.sum(w[ma]) + np.sum(w[mb])
    if denom == 0:
        return None
    return float(2.0 * np.sum(w[ma & mb]) / denom)


def boundary_mask(labels: LabelMap, region: int | None = None) -> np.ndarray:
    """Cells with a 4-neighbor of a different label (longitude wraps, latitude does not).

    With ``region`` only that region's boundary cells are returned.
    """
    lab = labels.labels
    diff = (lab != np.roll(lab, 1, axis=1)) | (lab != np.roll(lab, -1, axis=1))
    diff[1:] |= lab[1:] != lab[:-1]
    diff[:-1] |= lab[:-1] != lab[1:]
    if region is not None:
        diff &= lab == region
    return diff


def boundary_distances(a: LabelMap, b: LabelMap, region: int) -> np.ndarray:
    """Great-circle distance from each boundary cell of ``a`` to the closest
    boundary cell of ``b`` for one region (radians, unit sphere)."""
    grid = check_same_grid(a, b)
    ba = boundary_mask(a, region)
    bb = boundary_mask(b, region)
    if not ba.any() or not bb.any():
        raise ValueError(f"region {region} has an empty boundary")
    xyz = grid.xyz().reshape(3, -1).T
    tree = cKDTree(xyz[bb.ravel()])
    chord, _ = tree.query(xyz[ba.ravel()])
    return 2.0 * np.arcsin(np.clip(chord / 2.0, 0.0, 1.0))


def mmd_directed(a: LabelMap, b: LabelMap, region: int) -> float:
    return float(np.mean(boundary_distances(a, b, region)))


def mmd(a: LabelMap, b: LabelMap, region: int) -> float:
    """Mean minimum boundary distance, averaged over both directions."""
    return 0.5 * (mmd_directed(a, b, region) + mmd_directed(b, a, region))


def jacobian_array(grid, d: np.ndarray) -> np.ndarray:
    """Areal distortion of ``x -> x + d`` by central differences."""
    dth, dph = d[0], d[1]
    dt_dth = (np.roll(dth, -1, axis=1) - np.roll(dth, 1, axis=1)) / (2 * grid.dtheta)
    dp_dth = (np.roll(dph, -1, axis=1) - np.roll(dph, 1, axis=1)) / (2 * grid.dtheta)
    dt_dph = np.gradient(dth, grid.dphi, axis=0)
    dp_dph = np.gradient(dph, grid.dphi, axis=0)
    det = (1 + dt_dth) * (1 + dp_dph) - dt_dph * dp_dth
    phi = grid.latitudes[:, None]
    return det * np.sin(phi + dph) / np.sin(phi)


def jacobian_map(phi: DeformationField) -> tuple[FeatureMap, dict]:
    det = jacobian_array(phi.grid, phi.data)
    stats = {
        "min": float(det.min()),
        "max": float(det.max()),
        "mean": float(det.mean()),
        "fraction_nonpositive": float(np.mean(det <= 0)),
    }
    return FeatureMap(phi.grid, det), stats


def group_stats(maps: list[FeatureMap]) -> tuple[FeatureMap, FeatureMap]:
    """Elementwise mean and population standard deviation."""
    if len(maps) < 2:
        raise ValueError("group statistics need at least two maps")
    grid = check_same_grid(*maps)
    stack = np.stack([m.data for m in maps])
    # deviations from the first map: identical maps give an exact zero std
    dev = stack - stack[0]
    return FeatureMap(grid, stack[0] + dev.mean(axis=0)), FeatureMap(grid, dev.std(axis=0))


@dataclass
class MetricReport:
    dice: dict[int, float]
    overall_dice: float
    mmd: dict[int, float]
    overall_mmd: float
    radius_mm: float | None = DEFAULT_RADIUS_MM
    mmd_forward: dict[int, float] = field(default_factory=dict)
    mmd_backward: dict[int, float] = field(default_factory=dict)
    jacobian: dict | None = None

    @property
    def overall_mmd_mm(self) -> float | None:
        return None if self.radius_mm is None else self.overall_mmd * self.radius_mm

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("dice", "mmd", "mmd_forward", "mmd_backward"):
            d[k] = {str(r): v for r, v in d[k].items()}
        d["overall_mmd_mm"] = self.overall_mmd_mm
        if self.radius_mm is not None:
            d["mmd_mm"] = {str(r): v * self.radius_mm for r, v in self.mmd.items()}
        return d


def evaluate_labels(a: LabelMap, b: LabelMap, phi: DeformationField | None = None,
                    radius_mm: float | None = DEFAULT_RADIUS_MM) -> MetricReport:
    """Per-region and overall Dice / MMD; overall values average the regions."""
    check_same_grid(a, b)
    regions = np.union1d(a.regions(), b.regions())
    dices: dict[int, float] = {}
    dists: dict[int, float] = {}
    fwd: dict[int, float] = {}
    bwd: dict[int, float] = {}
    for r in regions.tolist():
        d = dice(a, b, r)
        if d is not None:
            dices[r] = d
        try:
            f = mmd_directed(a, b, r)
            g = mmd_directed(b, a, r)
        except ValueError:
            continue
        fwd[r], bwd[r] = f, g
        dists[r] = 0.5 * (f + g)
    overall_d = float(np.mean(list(dices.values()))) if dices else float("nan")
    overall_m = float(np.mean(list(dists.values()))) if dists else float("nan")
    jac = jacobian_map(phi)[1] if phi is not None else None
    return MetricReport(dices, overall_d, dists, overall_m, radius_mm, fwd, bwd, jac)


def overall_dice(a: LabelMap, b: LabelMap) -> float:
    vals = [dice(a, b, r) for r in np.union1d(a.regions(), b.regions()).tolist()]
    vals = [v for v in vals if v is not None]
    return float(np.mean(vals)) if vals else float("nan")
