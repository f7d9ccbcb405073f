"""Unit-lower-triangular solves by forward substitution.

The chunkwise memory update needs ``Y`` with ``T @ Y = R`` for a unit
lower-triangular ``T``. The inverse is never formed: rows are resolved in
order, each one using the rows already solved, which costs O(N^2 d).
"""

from __future__ import annotations

import numpy as np

from memgate.errors import ContractViolation, DimensionError
from memgate.numerics.ops import unbroadcast
from memgate.numerics.tensor import Tensor, record


def _check_unit_lower(t: np.ndarray) -> None:
    n = t.shape[-1]
    diag = np.diagonal(t, axis1=-2, axis2=-1)
    if not np.all(diag == 1):
        raise ContractViolation("forward_substitution requires a unit diagonal")
    rows, cols = np.triu_indices(n, 1)
    if np.any(t[..., rows, cols] != 0):
        raise ContractViolation("forward_substitution requires a zero strictly-upper part")


def solve_unit_lower(t: np.ndarray, r: np.ndarray) -> np.ndarray:
    """Plain-array forward substitution, batched over leading axes."""
    n = t.shape[-1]
    batch = np.broadcast_shapes(t.shape[:-2], r.shape[:-2])
    y = np.empty(batch + r.shape[-2:], dtype=np.result_type(t, r))
    y[..., 0, :] = r[..., 0, :]
    for i in range(1, n):
        y[..., i, :] = r[..., i, :] - np.matmul(t[..., i : i + 1, :i], y[..., :i, :])[..., 0, :]
    return y


def solve_unit_upper(u: np.ndarray, r: np.ndarray) -> np.ndarray:
    """Back substitution for a unit upper-triangular ``u``."""
    flipped = np.flip(np.flip(u, -1), -2)
    return np.flip(solve_unit_lower(flipped, np.flip(r, -2)), -2)


def forward_substitution(t, r) -> Tensor:
    """Solve ``t @ y = r`` for unit lower-triangular ``t`` of shape (..., N, N).

    ``r`` has shape (..., N, d). Differentiable in both arguments; the
    gradient with respect to ``t`` is restricted to its strictly-lower part.
    """
    td = t.data if isinstance(t, Tensor) else np.asarray(t)
    rd = r.data if isinstance(r, Tensor) else np.asarray(r, dtype=td.dtype)
    if td.ndim < 2 or td.shape[-1] != td.shape[-2]:
        raise DimensionError(f"triangular factor must be square, got {td.shape}")
    if rd.ndim < 2 or rd.shape[-2] != td.shape[-1]:
        raise DimensionError(f"right-hand side {rd.shape} does not match factor {td.shape}")
    _check_unit_lower(td)
    y = solve_unit_lower(td, rd)
    n = td.shape[-1]

    def vjp(g):
        # y = t^-1 r  =>  dr = t^-T g ;  dt = -dr y^T on the strictly-lower part
        gr = solve_unit_upper(np.swapaxes(td, -1, -2), g)
        gt = -np.matmul(gr, np.swapaxes(y, -1, -2)) * np.tri(n, n, -1, dtype=td.dtype)
        return unbroadcast(gt, td.shape), unbroadcast(gr, rd.shape)

    return record(y, (t, r), vjp, "forward_substitution")

