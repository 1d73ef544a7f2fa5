"""Registration settings."""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields

MODES = ("instance", "amortized", "voxelmorph2d-ablation")

#: Prior weight of the original cortical-surface setting (its feature units and
#: grid).  It does not transfer to other grids or feature scalings.
REFERENCE_LAMBDA = 3e7
#: Adam step of the original cortical-surface network training.  Our synthetic features
#: are unit-variance and the heads output radians, which needs a larger step.
REFERENCE_AMORTIZED_LR = 1e-5
AMORTIZED_LR = 1e-3
#: Synthetic-benchmark default, picked by ``spheremorph lambda-search``.
DEFAULT_LAMBDA = 3e4


@dataclass
class RegistrationConfig:
    lam: float = DEFAULT_LAMBDA
    steps: int = 7
    iters: int = 400
    lr: float | None = None
    mode: str = "instance"
    sample_stochastic: bool = False
    seed: int = 0
    multires_levels: int = 1
    rigid: bool = False
    coarse_step: float = 0.08726646259971647  # pi / 36
    logvar_init: float = -10.0
    tol: float = 1e-6
    patience: int = 20

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if not self.lam > 0:
            raise ValueError("lambda must be positive")
        if self.steps < 1 or self.iters < 1 or self.multires_levels < 1:
            raise ValueError("steps, iters and multires_levels must be positive")
        if self.lr is not None and not self.lr > 0:
            raise ValueError("learning rate must be positive")
        if not self.coarse_step > 0:
            raise ValueError("coarse_step must be positive")

    @property
    def learning_rate(self) -> float:
        if self.lr is not None:
            return self.lr
        return AMORTIZED_LR if self.mode == "amortized" else 1e-2

    @property
    def spherical(self) -> bool:
        """False selects the flat baseline: uniform data weights, unit edges."""
        return self.mode != "voxelmorph2d-ablation"

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lambda"] = d.pop("lam")
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RegistrationConfig":
        d = dict(d)
        if "lambda" in d:
            d["lam"] = d.pop("lambda")
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)
