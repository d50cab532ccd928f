"""Volumetric capsule-network segmentation on a small numpy autograd engine."""

__version__ = "0.1.0"

from .network import NetworkConfig, NetworkOutput, UCapsNet, build, count_depth, count_parameters
from .tensor import NonFiniteError, Tensor, no_grad, shadow_precision

__all__ = [
    "__version__",
    "NetworkConfig",
    "NetworkOutput",
    "UCapsNet",
    "build",
    "count_depth",
    "count_parameters",
    "Tensor",
    "NonFiniteError",
    "no_grad",
    "shadow_precision",
]
