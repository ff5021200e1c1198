"""Dense-tensor numerics with reverse-mode differentiation."""

from . import ops
from .gradcheck import check_input_gradient, finite_difference_check, relative_error
from .optim import Adam, Optimizer, Sgd, make_optimizer
from .tensor import (
    ConfigurationError,
    EmptyGradientError,
    Gradients,
    Parameter,
    ShapeError,
    Tape,
    Tensor,
    current_tape,
    pause_tape,
)

__all__ = [
    "Adam",
    "ConfigurationError",
    "EmptyGradientError",
    "Gradients",
    "Optimizer",
    "Parameter",
    "Sgd",
    "ShapeError",
    "Tape",
    "Tensor",
    "check_input_gradient",
    "current_tape",
    "finite_difference_check",
    "make_optimizer",
    "ops",
    "pause_tape",
    "relative_error",
]
