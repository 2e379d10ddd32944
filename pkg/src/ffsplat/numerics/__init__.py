"""numpy-backed tensors with taped reverse-mode autodiff."""

from .tensor import (
    MemoryMeter,
    Tape,
    Tensor,
    active_tape,
    backward,
    deterministic,
    record,
    set_deterministic,
)
from . import ops
from .ops import (
    absolute,
    add,
    broadcast_to,
    clamp,
    concat,
    conv2x2s2,
    cumsum,
    div,
    exp,
    flip,
    gather,
    gelu,
    getitem,
    layer_norm,
    log,
    masked_fill,
    matmul,
    mul,
    neg,
    power,
    relu,
    reshape,
    sigmoid,
    silu,
    softmax_lastdim,
    softplus,
    sqrt,
    stack,
    sub,
    tanh,
    tmean,
    transpose,
    tsum,
)
from .check import fd_gradients, max_rel_err
from .checkpoint import load_checkpoint, save_checkpoint
