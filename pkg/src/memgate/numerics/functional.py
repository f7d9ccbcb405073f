"""Composite normalizers built from the differentiable primitives."""

from __future__ import annotations

from memgate.errors import DimensionError
from memgate.numerics import ops
from memgate.numerics.tensor import Tensor, as_tensor

DEFAULT_EPS = 1e-6


def rmsnorm(x, gain, eps: float = DEFAULT_EPS) -> Tensor:
    """Scale each trailing-axis vector by ``gain / sqrt(mean(x^2) + eps)``."""
    x = as_tensor(x)
    gain = as_tensor(gain, dtype=x.dtype)
    if gain.shape[-1:] != x.shape[-1:]:
        raise DimensionError(f"gain {gain.shape} does not match trailing dim of {x.shape}")
    ms = ops.mean(x * x, axis=-1, keepdims=True)
    return x / ops.sqrt(ms + eps) * gain


def silu_l2_normalize(x, eps: float = DEFAULT_EPS) -> Tensor:
    """SiLU followed by division by the L2 norm (plus eps) of each trailing-axis vector."""
    h = ops.silu(x)
    norm = ops.sqrt(ops.sum(h * h, axis=-1, keepdims=True))
    return h / (norm + eps)
