"""Numeric core: float32 tensors, reverse-mode autodiff, AdamW, seeded RNG streams."""

from .optim import AdamW, clip_global_norm
from .rng import derive_seed, make_rng, splitmix64
from .tensor import (
    Tensor,
    add,
    as_tensor,
    backward,
    concat,
    cross_entropy,
    embedding,
    exp,
    gelu,
    grad_enabled,
    layer_norm,
    matmul,
    mul,
    narrow,
    no_grad,
    normal_param,
    reshape,
    rotate_pairs,
    softmax,
    softmax_cross_entropy,
    sub,
    sum_axis,
    topo_order,
    transpose,
    unit_normalize,
    zeros_param,
)

__all__ = [
    "AdamW",
    "clip_global_norm",
    "derive_seed",
    "make_rng",
    "splitmix64",
    "Tensor",
    "add",
    "as_tensor",
    "backward",
    "concat",
    "cross_entropy",
    "embedding",
    "exp",
    "gelu",
    "grad_enabled",
    "layer_norm",
    "matmul",
    "mul",
    "narrow",
    "no_grad",
    "normal_param",
    "reshape",
    "rotate_pairs",
    "softmax",
    "softmax_cross_entropy",
    "sub",
    "sum_axis",
    "topo_order",
    "transpose",
    "unit_normalize",
    "zeros_param",
]
