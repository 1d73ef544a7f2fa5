from .config import DEFAULT_LAMBDA, REFERENCE_LAMBDA, RegistrationConfig
from .instance import DivergenceError, RegistrationResult, register_instance
from .rigid import align_labels, rigid_align
from .warp import rotate_labels, rotate_map, rotation_matrix, warp_features, warp_labels

__all__ = [
    "DEFAULT_LAMBDA",
    "REFERENCE_LAMBDA",
    "DivergenceError",
    "RegistrationConfig",
    "RegistrationResult",
    "register_instance",
    "align_labels",
    "rigid_align",
    "rotate_labels",
    "rotate_map",
    "rotation_matrix",
    "warp_features",
    "warp_labels",
]
