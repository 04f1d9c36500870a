"""Dense-array engine with reverse-mode differentiation."""

from . import ops
from .core import (
    OPS,
    NonFiniteError,
    NumericsError,
    Parameter,
    ShapeError,
    Tape,
    TapeError,
    Tensor,
    backward,
    default_dtype,
    forward_op,
    get_default_dtype,
    no_grad,
    recording,
    set_default_dtype,
)
from .gradcheck import check_gradients, finite_difference_check
from .layers import BatchNorm1d, Conv1d, Linear, MaxPool1d, Module, ReLU, Sequential
from .optim import Adam, SGDMomentum, make_optimizer, optimizer_step

__all__ = [
    "OPS", "NonFiniteError", "NumericsError", "Parameter", "ShapeError", "Tape", "TapeError",
    "Tensor", "backward", "default_dtype", "forward_op", "get_default_dtype", "no_grad",
    "recording", "set_default_dtype", "check_gradients", "finite_difference_check",
    "BatchNorm1d", "Conv1d", "Linear", "MaxPool1d", "Module", "ReLU", "Sequential",
    "Adam", "SGDMomentum", "make_optimizer", "optimizer_step", "ops",
]
