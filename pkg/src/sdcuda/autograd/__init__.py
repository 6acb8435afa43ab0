"""Minimal numpy tensor library with reverse-mode differentiation."""

from . import functional
from .checkpoint import CheckpointError, load_params, read_params, save_params
from .gradcheck import grad_check
from .optim import OptimizerState, adam, sgd, step
from .params import ParamSet, uniform_init
from .tensor import Tensor, as_tensor, backward, is_grad_enabled, no_grad

__all__ = [
    "functional", "Tensor", "as_tensor", "backward", "no_grad", "is_grad_enabled",
    "ParamSet", "uniform_init", "OptimizerState", "sgd", "adam", "step", "grad_check",
    "save_params", "load_params", "read_params", "CheckpointError",
]
