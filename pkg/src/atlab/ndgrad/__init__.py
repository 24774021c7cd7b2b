"""Minimal dense-tensor engine with reverse-mode autodiff."""
from .ops import (
    abs,
    add,
    batch_norm,
    clamp,
    concat,
    conv2d,
    flatten,
    global_avg_pool,
    leaky_relu,
    linear,
    log_softmax_np,
    matmul,
    mean,
    mul,
    one_hot,
    relu,
    reshape,
    sigmoid,
    softmax,
    softmax_cross_entropy,
    softmax_np,
    sqrt,
    square,
    sub,
    sum,
    tanh,
)
from .optim import SGD, Adam, OptimizerState, adam_step, sgd_step
from .tensor import (
    DEFAULT_DTYPE,
    ComputationRecord,
    NonFiniteError,
    ShapeError,
    Tensor,
    as_tensor,
    backward,
    no_grad,
)

__all__ = [
    "Adam", "ComputationRecord", "DEFAULT_DTYPE", "NonFiniteError", "OptimizerState", "SGD",
    "ShapeError", "Tensor", "abs", "adam_step", "add", "as_tensor", "backward", "batch_norm",
    "clamp", "concat", "conv2d", "flatten", "global_avg_pool", "leaky_relu", "linear",
    "log_softmax_np", "matmul", "mean", "mul", "no_grad", "one_hot", "relu", "reshape",
    "sgd_step", "sigmoid", "softmax", "softmax_cross_entropy", "softmax_np", "sqrt", "square",
    "sub", "sum", "tanh",
]
