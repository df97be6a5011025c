from .autodiff import (
    BackwardError,
    NonFiniteError,
    ShapeError,
    Tensor,
    backward,
    is_grad_enabled,
    no_grad,
)
from .checkpoint import CheckpointError, load_tensors, save_tensors
from .gradcheck import GradCheckResult, GradientCheckError, check_gradients, gradient_check
from .optim import SgdState, sgd_step
from . import autodiff as ops

__all__ = [
    "BackwardError",
    "CheckpointError",
    "GradCheckResult",
    "GradientCheckError",
    "NonFiniteError",
    "SgdState",
    "ShapeError",
    "Tensor",
    "backward",
    "check_gradients",
    "gradient_check",
    "is_grad_enabled",
    "load_tensors",
    "no_grad",
    "ops",
    "save_tensors",
    "sgd_step",
]
