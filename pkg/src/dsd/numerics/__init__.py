"""Minimal float64 tensor engine with reverse-mode autodiff."""

from .autodiff import (
    DTYPE,
    Graph,
    OpRecord,
    Tensor,
    add,
    amax,
    as_tensor,
    backward,
    clamp,
    concat,
    divide,
    enable_grad,
    exp,
    getitem,
    is_grad_enabled,
    log,
    logsumexp,
    logsumexp_over_rows,
    matmul,
    mean,
    multiply,
    no_grad,
    power,
    reshape,
    rms_norm,
    scale,
    sigmoid,
    silu,
    softmax,
    softmax_rows,
    sqrt,
    stack,
    sub,
    sum_,
    swapaxes,
    take_rows,
    tanh,
    transpose,
)
from .gradcheck import finite_diff_check, numeric_grad
from .optim import Adam, Momentum, Optimizer

__all__ = [name for name in dir() if not name.startswith("_")]
