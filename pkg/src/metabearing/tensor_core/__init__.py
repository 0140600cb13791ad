"""Dense tensors with reverse-mode differentiation, including gradients of gradients."""

from . import ops
from .gradcheck import grad_of_grad_check
from .ops import record_op
from .paramset import ParamSet
from .tensor import (
    DEFAULT_DTYPE,
    GradientError,
    NonFiniteError,
    ShapeError,
    Tape,
    Tensor,
    active_tape,
    backward,
    no_grad,
)

__all__ = [
    "DEFAULT_DTYPE",
    "GradientError",
    "NonFiniteError",
    "ParamSet",
    "ShapeError",
    "Tape",
    "Tensor",
    "active_tape",
    "backward",
    "grad_of_grad_check",
    "no_grad",
    "ops",
    "record_op",
]
