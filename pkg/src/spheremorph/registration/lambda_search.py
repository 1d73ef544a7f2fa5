"""Grid search for the prior weight on held-out synthetic pairs."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from ..fields import FeatureMap, LabelMap
from ..likelihood import Atlas
from ..metrics import overall_dice
from .config import RegistrationConfig
from .instance import register_instance
from .warp import warp_labels

#: Five points, one per decade, bracketing the synthetic-benchmark optimum.
DEFAULT_GRID = (3e2, 3e3, 3e4, 3e5, 3e6)


@dataclass
class LambdaSearchResult:
    lambdas: list[float]
    dice: list[float]
    per_pair: list[list[float]]
    best: float

    def to_dict(self) -> dict:
        return {"lambdas": self.lambdas, "dice": self.dice, "per_pair": self.per_pair, "best": self.best}


def lambda_search(pairs: list[tuple[FeatureMap, LabelMap]], atlas: Atlas, atlas_labels: LabelMap,
                  lambdas=DEFAULT_GRID, cfg: RegistrationConfig | None = None) -> LambdaSearchResult:
    """Register every validation pair at each lambda; pick the highest mean Dice.

    Ties go to the larger lambda (the smoother field).
    """
    if not pairs:
        raise ValueError("need at least one validation pair")
    lambdas = [float(x) for x in lambdas]
    if len(lambdas) < 2 or any(not x > 0 for x in lambdas):
        raise ValueError("need at least two positive lambda values")
    cfg = cfg or RegistrationConfig()
    per_pair = []
    for lam in lambdas:
        c = replace(cfg, lam=lam)
        row = []
        for feat, lab in pairs:
            res = register_instance(feat, atlas, c)
            row.append(overall_dice(warp_labels(lab, res.phi), atlas_labels))
        per_pair.append(row)
    means = [float(np.mean(r)) for r in per_pair]
    best = max(range(len(lambdas)), key=lambda k: (means[k], lambdas[k]))
    return LambdaSearchResult(lambdas, means, per_pair, lambdas[best])
