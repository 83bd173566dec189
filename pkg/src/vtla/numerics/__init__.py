"""Deterministic tensor core: autodiff, optimizer, RNG, checkpoint format."""

from .checkpoint import (
    MAGIC,
    VERSION,
    deserialize,
    load_checkpoint,
    save_checkpoint,
    save_params,
    serialize,
)
from .optim import AdamW, OptimState, adamw_step, lr_schedule
from .rng import SeededRng
from .tensor import (
    Tape,
    Tensor,
    add,
    backward,
    bce_with_logits,
    clip,
    concat,
    div,
    exp,
    gather_rows,
    gelu,
    l2_normalize,
    layer_norm,
    linear,
    log,
    matmul,
    mul,
    narrow,
    neg,
    ones,
    relu,
    reshape,
    set_checked,
    softmax,
    softmax_cross_entropy,
    sqrt,
    sub,
    tanh,
    tensor,
    tmean,
    transpose,
    tsum,
    zeros,
)

__all__ = [
    "AdamW",
    "MAGIC",
    "OptimState",
    "SeededRng",
    "Tape",
    "Tensor",
    "VERSION",
    "adamw_step",
    "add",
    "backward",
    "bce_with_logits",
    "clip",
    "concat",
    "deserialize",
    "div",
    "exp",
    "gather_rows",
    "gelu",
    "l2_normalize",
    "layer_norm",
    "linear",
    "load_checkpoint",
    "log",
    "lr_schedule",
    "matmul",
    "mul",
    "narrow",
    "neg",
    "ones",
    "relu",
    "reshape",
    "save_checkpoint",
    "save_params",
    "serialize",
    "set_checked",
    "softmax",
    "softmax_cross_entropy",
    "sqrt",
    "sub",
    "tanh",
    "tensor",
    "tmean",
    "transpose",
    "tsum",
    "zeros",
]
