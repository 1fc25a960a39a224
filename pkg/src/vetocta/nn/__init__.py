from .checkpoint import load_checkpoint, save_checkpoint
from .functional import (
    conv2d,
    conv2d_transpose,
    ffn,
    gelu,
    layer_norm,
    leaky_relu,
    linear,
    mse_loss,
    multi_head_attention,
    softmax,
)
from .optim import MissingGradientError, adam_step, zero_grad
from .tensor import Parameter, Tensor, as_tensor, matmul, no_grad

__all__ = [
    "MissingGradientError",
    "Parameter",
    "Tensor",
    "adam_step",
    "as_tensor",
    "conv2d",
    "conv2d_transpose",
    "ffn",
    "gelu",
    "layer_norm",
    "leaky_relu",
    "linear",
    "load_checkpoint",
    "matmul",
    "mse_loss",
    "multi_head_attention",
    "no_grad",
    "save_checkpoint",
    "softmax",
    "zero_grad",
]
