"""Numeric core: kernels, autodiff tensors, and the checkpoint container."""

from . import kernels
from .kernels import BACKEND, available_backends
from .autodiff import (
    FLOAT32,
    FLOAT64,
    Graph,
    Tensor,
    add,
    add_bias,
    attention,
    concat_rows,
    concat_tokens,
    gather_rows,
    gelu,
    grad_check,
    grad_enabled,
    layernorm,
    matmul,
    mean_all,
    merge_heads,
    mul,
    no_grad,
    rope,
    scale,
    softmax_lastdim,
    split_heads,
    sub,
    sum_all,
    take_rows,
    tensor,
)
from .xtar import dumps_xtar, load_xtar, loads_xtar, save_xtar

__all__ = [
    "kernels", "BACKEND", "available_backends",
    "FLOAT32", "FLOAT64", "Graph", "Tensor",
    "add", "add_bias", "attention", "concat_rows", "concat_tokens",
    "gather_rows", "gelu", "grad_check", "grad_enabled", "layernorm",
    "matmul", "mean_all", "merge_heads", "mul", "no_grad", "rope", "scale",
    "softmax_lastdim", "split_heads", "sub", "sum_all", "take_rows", "tensor",
    "dumps_xtar", "load_xtar", "loads_xtar", "save_xtar",
]
