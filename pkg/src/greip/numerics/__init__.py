"""Float64 tensor core: reverse-mode autodiff, Adam, finite-difference checks."""

from . import ops
from .gradcheck import grad_check, grad_check_random, kink_distance, sample_smooth_point
from .optim import AdamState, adam_step
from .tensor import GraphError, NonFiniteError, NumericsError, ShapeError, Tensor, as_tensor, backward

__all__ = [
    "ops", "grad_check", "grad_check_random", "kink_distance", "sample_smooth_point",
    "AdamState", "adam_step", "GraphError", "NonFiniteError", "NumericsError", "ShapeError",
    "Tensor", "as_tensor", "backward",
]
