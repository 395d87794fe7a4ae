from . import ops
from .gradcheck import grad_check, rel_err
from .ops import (
    BatchNormState,
    adaptive_avg_pool_to_1,
    affine,
    batch_norm,
    concat,
    conv1d,
    conv2d,
    dropout,
    lstm_bidirectional,
    lstm_layer,
    matmul,
    max_pool1d,
    max_pool2d,
    multi_head_attention,
    relu,
    scaled_dot_attention,
    sigmoid,
    softmax,
    tanh,
)
from .tensor import GraphFreedError, Tensor, as_tensor, backward, make_node, no_grad, parameter

__all__ = [
    "BatchNormState",
    "GraphFreedError",
    "Tensor",
    "adaptive_avg_pool_to_1",
    "affine",
    "as_tensor",
    "backward",
    "batch_norm",
    "concat",
    "conv1d",
    "conv2d",
    "dropout",
    "grad_check",
    "lstm_bidirectional",
    "lstm_layer",
    "make_node",
    "matmul",
    "max_pool1d",
    "max_pool2d",
    "multi_head_attention",
    "no_grad",
    "ops",
    "parameter",
    "rel_err",
    "relu",
    "scaled_dot_attention",
    "sigmoid",
    "softmax",
    "tanh",
]
