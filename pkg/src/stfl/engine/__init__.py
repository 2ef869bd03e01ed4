"""Minimal tensor engine: reverse-mode autodiff, optimizers, checkpoints."""
from stfl.engine.kernels import BACKEND
from stfl.engine.optim import OptimizerState, optimizer_step
from stfl.engine.params import ParamVector
from stfl.engine.tensor import (
    Tape,
    Tensor,
    add,
    backward,
    bce_with_logits_loss,
    concat,
    conv2d,
    conv_transpose2d,
    instance_norm,
    l1_loss,
    leaky_relu,
    mean,
    mse_loss,
    mul,
    relu,
    set_finite_checks,
    sigmoid,
    sub,
    tanh,
)

__all__ = [
    "BACKEND", "OptimizerState", "optimizer_step", "ParamVector", "Tape", "Tensor", "add",
    "backward", "bce_with_logits_loss", "concat", "conv2d", "conv_transpose2d", "instance_norm",
    "l1_loss", "leaky_relu", "mean", "mse_loss", "mul", "relu", "set_finite_checks", "sigmoid",
    "sub", "tanh",
]
