"""Tensor algebra, normalizers, triangular solves and reverse-mode autodiff."""

from memgate.numerics.functional import DEFAULT_EPS, rmsnorm, silu_l2_normalize
from memgate.numerics.ops import (
    add,
    concat,
    cumsum,
    div,
    embedding,
    exp,
    gelu,
    getitem,
    log,
    log_softmax,
    matmul,
    mean,
    mul,
    neg,
    power,
    relu,
    reshape,
    scale,
    sigmoid,
    silu,
    softmax,
    sqrt,
    stack,
    sub,
    sum,
    swapaxes,
    take_last,
    tanh,
    transpose,
)
from memgate.numerics.solve import forward_substitution, solve_unit_lower, solve_unit_upper
from memgate.numerics.tensor import (
    DEFAULT_DTYPE,
    GradTape,
    Tensor,
    active_tape,
    as_tensor,
    backward,
    check_finite,
)

__all__ = [
    "DEFAULT_DTYPE",
    "DEFAULT_EPS",
    "GradTape",
    "Tensor",
    "active_tape",
    "add",
    "as_tensor",
    "backward",
    "check_finite",
    "concat",
    "cumsum",
    "div",
    "embedding",
    "exp",
    "forward_substitution",
    "gelu",
    "getitem",
    "log",
    "log_softmax",
    "matmul",
    "mean",
    "mul",
    "neg",
    "power",
    "relu",
    "reshape",
    "rmsnorm",
    "scale",
    "sigmoid",
    "silu",
    "silu_l2_normalize",
    "softmax",
    "solve_unit_lower",
    "solve_unit_upper",
    "sqrt",
    "stack",
    "sub",
    "sum",
    "swapaxes",
    "take_last",
    "tanh",
    "transpose",
]
