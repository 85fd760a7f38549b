from . import container
from .init import init_param
from .optim import AdamState, adam_step, zero_grads
from .tensor import (
    DimensionError,
    Tape,
    Tensor,
    add,
    as_tensor,
    backward,
    concat,
    concat_rows,
    cross_entropy,
    dropout,
    embedding_lookup,
    exp,
    gelu,
    layer_norm,
    log,
    log_softmax,
    matmul,
    mean,
    mean_rows,
    mul,
    mul_scalar,
    neg,
    no_grad,
    reshape,
    softmax,
    take,
    tanh,
    transpose,
)
from .tensor import sum as tsum

__all__ = [
    "AdamState", "DimensionError", "Tape", "Tensor", "adam_step", "add", "as_tensor",
    "backward", "concat", "concat_rows", "container", "cross_entropy", "dropout",
    "embedding_lookup", "exp", "gelu", "init_param", "layer_norm", "log", "log_softmax",
    "matmul", "mean", "mean_rows", "mul", "mul_scalar", "neg", "no_grad", "reshape",
    "softmax", "take", "tanh", "transpose", "tsum", "zero_grads",
]
