"""Dense linear algebra, reverse-mode autodiff, small networks, Adam."""

from .mlp import IDENTITY, RELU, MlpLayer, MlpParams, glorot_uniform, init_mlp, mlp_forward
from .optim import AdamState, adam_step
from .tensor import (
    Tensor,
    add,
    cross_entropy,
    div,
    exp,
    grad,
    layer_norm,
    log,
    log_softmax,
    matmul,
    mean,
    mul,
    neg,
    no_grad,
    power,
    relu,
    reshape,
    softmax,
    sqrt,
    stop_gradient,
    straight_through,
    sum_,
    take,
    transpose,
)

__all__ = [
    "AdamState",
    "IDENTITY",
    "MlpLayer",
    "MlpParams",
    "RELU",
    "Tensor",
    "adam_step",
    "add",
    "cross_entropy",
    "div",
    "exp",
    "glorot_uniform",
    "grad",
    "init_mlp",
    "layer_norm",
    "log",
    "log_softmax",
    "matmul",
    "mean",
    "mlp_forward",
    "mul",
    "neg",
    "no_grad",
    "power",
    "relu",
    "reshape",
    "softmax",
    "sqrt",
    "stop_gradient",
    "straight_through",
    "sum_",
    "take",
    "transpose",
]
