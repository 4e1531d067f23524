"""Small float64 reverse-mode autodiff engine, layers, Adam and checkpoints."""

from . import engine as ops
from .checkpoint import config_hash, load_checkpoint, save_checkpoint
from .engine import Tensor, backward, no_grad, set_finite_checks
from .gradcheck import gradcheck, gradcheck_module, numerical_grad, relative_error
from .nn import Conv1d, LayerNorm, Linear, Mlp, Module, MultiHeadAttention, Parameter
from .optim import Adam, AdamState, adam_step, scheduled_lr

__all__ = [
    "ops", "Tensor", "backward", "no_grad", "set_finite_checks",
    "gradcheck", "gradcheck_module", "numerical_grad", "relative_error",
    "Module", "Parameter", "Linear", "LayerNorm", "Conv1d", "Mlp", "MultiHeadAttention",
    "Adam", "AdamState", "adam_step", "scheduled_lr",
    "config_hash", "save_checkpoint", "load_checkpoint",
]
