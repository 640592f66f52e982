"""Minimal numeric engine: tensors, autodiff, parameters, transformer blocks."""

from .gradcheck import NondeterministicForwardError, grad_check
from .params import CheckpointError, ParamStore, load_checkpoint, save_checkpoint, trunc_normal
from .tensor import Tensor, backward, constant
from . import layers, tensor

__all__ = [
    "CheckpointError",
    "NondeterministicForwardError",
    "ParamStore",
    "Tensor",
    "backward",
    "constant",
    "grad_check",
    "layers",
    "load_checkpoint",
    "save_checkpoint",
    "tensor",
    "trunc_normal",
]
