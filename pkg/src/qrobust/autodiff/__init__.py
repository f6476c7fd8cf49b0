"""Dense tensors with reverse-mode automatic differentiation."""

from . import ops
from .checkpoint import load_checkpoint, save_checkpoint
from .gradcheck import GradCheckReport, grad_check, numerical_grad
from .ops import forward_op
from .tensor import (
    KinkRecorder,
    NonFiniteError,
    ShapeError,
    Tensor,
    backward,
    enable_grad,
    grad,
    is_grad_enabled,
    no_grad,
    topological_nodes,
)

__all__ = [
    "GradCheckReport",
    "KinkRecorder",
    "NonFiniteError",
    "ShapeError",
    "Tensor",
    "backward",
    "enable_grad",
    "forward_op",
    "grad",
    "grad_check",
    "is_grad_enabled",
    "load_checkpoint",
    "no_grad",
    "numerical_grad",
    "ops",
    "save_checkpoint",
    "topological_nodes",
]
