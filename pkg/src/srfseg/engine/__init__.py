"""Autodiff engine: tensors, operators, parameters, checkpoints."""

from . import ops
from .checkpoint import load_checkpoint, save_checkpoint
from .gradcheck import grad_check
from .params import Parameter, ParamStore
from .tensor import Tensor, as_tensor, backward, get_dtype, precision, set_dtype

__all__ = [
    "ops", "Tensor", "as_tensor", "backward", "precision", "get_dtype",
    "set_dtype", "Parameter", "ParamStore", "grad_check",
    "save_checkpoint", "load_checkpoint",
]
