"""Numpy tensors with reverse-mode autodiff, a parameter store, and Adam."""
from .checkpoint import FORMAT_VERSION, CheckpointError, load_checkpoint, save_checkpoint
from .optim import AdamState, adam_step
from .params import ParameterStore
from .autodiff import (
    NonFiniteError,
    ShapeError,
    Tensor,
    attention,
    backward,
    concat,
    conv2d,
    default_dtype,
    gelu,
    group_norm,
    layer_norm,
    matmul,
    normalize,
    precision,
    relu,
    scatter_rows,
    silu,
    softmax,
    take_rows,
    tensor,
    upsample2x,
    where,
)

__all__ = [
    "FORMAT_VERSION", "CheckpointError", "load_checkpoint", "save_checkpoint",
    "AdamState", "adam_step", "ParameterStore",
    "NonFiniteError", "ShapeError", "Tensor", "attention", "backward", "concat", "conv2d",
    "default_dtype", "gelu", "group_norm", "layer_norm", "matmul", "normalize", "precision",
    "relu", "scatter_rows", "silu", "softmax", "take_rows", "tensor", "upsample2x", "where",
]
