"""Re-projection of a whole dataset under a moved north pole."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..fields import FeatureMap, LabelMap
from ..likelihood import Atlas
from ..metrics import overall_dice
from .config import RegistrationConfig
from .instance import register_instance
from .warp import pole_rotation, rotate_array, warp_labels

#: Three longitudes times three colatitudes for the new north pole.
POLE_PLACEMENTS = tuple((t, p) for p in (np.pi / 6, np.pi / 3, np.pi / 2) for t in (0.0, np.pi / 2, np.pi))


def reproject(obj, theta: float, phi: float):
    """Resample so the grid's north pole sits at the old point ``(theta, phi)``.

    ``out(p) = old(R p)`` with ``R`` taking the north pole to ``(theta, phi)``;
    labels use nearest-neighbor lookup.
    """
    R = pole_rotation(theta, phi)
    if isinstance(obj, LabelMap):
        out = rotate_array(obj.labels[None].astype(np.float64), obj.grid, R.T, nearest=True)[0]
        return LabelMap(obj.grid, np.rint(out).astype(np.int64))
    return FeatureMap(obj.grid, rotate_array(obj.data, obj.grid, R.T))


@dataclass
class PoleStudy:
    placements: list[tuple[float, float]]
    dice: list[float]
    fraction_nonpositive: list[float]

    @property
    def std(self) -> float:
        return float(np.std(self.dice))

    def to_dict(self) -> dict:
        return {"placements": [list(p) for p in self.placements], "dice": self.dice,
                "fraction_nonpositive": self.fraction_nonpositive, "std": self.std}


def pole_study(features: FeatureMap, labels: LabelMap, atlas: Atlas, atlas_labels: LabelMap,
               cfg: RegistrationConfig | None = None, placements=POLE_PLACEMENTS) -> PoleStudy:
    """Register one subject under every pole placement; Dice in the re-projected frame."""
    cfg = cfg or RegistrationConfig()
    dice, folds = [], []
    for theta, phi in placements:
        at = Atlas(reproject(atlas.mean, theta, phi), reproject(atlas.variance, theta, phi),
                   atlas.variance_floor)
        res = register_instance(reproject(features, theta, phi), at, cfg)
        warped = warp_labels(reproject(labels, theta, phi), res.phi)
        dice.append(overall_dice(warped, reproject(atlas_labels, theta, phi)))
        folds.append(res.diagnostics["fraction_nonpositive"])
    return PoleStudy([tuple(p) for p in placements], dice, folds)
