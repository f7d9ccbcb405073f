"""Fast-weight memory: delta rule, DeltaProduct and chunkwise-parallel updates.

The state ``s`` has shape (..., d_k, d_v). A delta write with key ``k``,
value ``v`` and gate ``beta`` is

    s <- (I - beta k k^T) s + beta k v^T

and a read with query ``q`` returns ``s^T q``. Leading axes (batch, heads)
are carried through every function unchanged.

:func:`delta_sequential_scan` applies writes one row at a time and is the
reference behaviour. :func:`chunkwise_update` reproduces it with one
unit-lower-triangular solve per chunk. Within a chunk the pseudo-values
``Y`` satisfy

    (I + tril(diag(beta) K K^T, -1)) Y = diag(beta) (V - K s_in)

and ``s_out = s_in + K^T Y``. The strictly-lower term enters with a plus
sign; with a minus sign the solve no longer matches the row-by-row
recurrence (k=(1,1), v=(2,3), beta=(1,0.5) must give s_out=2.5).
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import NamedTuple

import numpy as np

from memgate.errors import ContractViolation, DegenerateDenominatorError, DimensionError
from memgate.numerics import ops
from memgate.numerics.functional import DEFAULT_EPS
from memgate.numerics.solve import forward_substitution
from memgate.numerics.tensor import DEFAULT_DTYPE, Tensor, as_tensor

NONLINEARITIES = ("none", "gelu", "tanh")


@dataclass(frozen=True)
class ChunkSpec:
    """Chunking of the memory update.

    ``chunk_size`` counts real tokens; a chunk therefore spans
    ``chunk_size * n_h`` rows of the (virtual-token) stream. The optional
    ``nonlinearity`` is applied to the state whenever a chunk completes.
    """

    chunk_size: int = 64
    n_h: int = 1
    nonlinearity: str = "none"

    def __post_init__(self):
        if self.chunk_size < 1:
            raise ContractViolation(f"chunk_size must be >= 1, got {self.chunk_size}")
        if self.n_h < 1:
            raise ContractViolation(f"n_h must be >= 1, got {self.n_h}")
        if self.nonlinearity not in NONLINEARITIES:
            raise ContractViolation(f"nonlinearity must be one of {NONLINEARITIES}, got {self.nonlinearity!r}")

    @property
    def rows_per_chunk(self) -> int:
        return self.chunk_size * self.n_h


@dataclass(frozen=True)
class MemoryState:
    """Per-head fast weights plus an optional key normalizer.

    ``tokens_seen`` counts rows written since the state was created; chunk
    boundaries (and the boundary nonlinearity) are aligned to it.
    """

    s: Tensor
    z: Tensor | None = None
    tokens_seen: int = 0

    @classmethod
    def zeros(cls, d_k: int, d_v: int, batch_shape=(), dtype=DEFAULT_DTYPE, normalizer: bool = False):
        shape = tuple(batch_shape)
        z = Tensor(np.zeros(shape + (d_k,), dtype=dtype)) if normalizer else None
        return cls(Tensor(np.zeros(shape + (d_k, d_v), dtype=dtype)), z, 0)

    @property
    def d_k(self) -> int:
        return self.s.shape[-2]

    @property
    def d_v(self) -> int:
        return self.s.shape[-1]

    @property
    def nbytes(self) -> int:
        return self.s.nbytes + (self.z.nbytes if self.z is not None else 0)


class ScanResult(NamedTuple):
    states: Tensor  # (..., T, d_k, d_v), state after each row
    outputs: Tensor | None  # (..., T, d_v)
    state: MemoryState


class ChunkResult(NamedTuple):
    state: MemoryState
    y: Tensor  # (..., N, d_v) pseudo-values
    outputs: Tensor | None  # (..., N, d_v)


def _col(x: Tensor) -> Tensor:
    return ops.reshape(x, x.shape + (1,))


def _row(x: Tensor) -> Tensor:
    return ops.reshape(x, x.shape[:-1] + (1, x.shape[-1]))


def _check_kv(state: MemoryState, k: Tensor, v: Tensor) -> None:
    if k.shape[-1] != state.d_k or v.shape[-1] != state.d_v:
        raise DimensionError(
            f"key/value dims {k.shape[-1]}/{v.shape[-1]} do not match state {state.d_k}x{state.d_v}"
        )


def _phi(s: Tensor, nonlinearity: str) -> Tensor:
    if nonlinearity == "gelu":
        return ops.gelu(s)
    if nonlinearity == "tanh":
        return ops.tanh(s)
    return s


def delta_step(state: MemoryState, k, v, beta) -> MemoryState:
    """One delta-rule write: ``s <- s + beta k (v - s^T k)^T``."""
    dtype = state.s.dtype
    k, v, beta = as_tensor(k, dtype), as_tensor(v, dtype), as_tensor(beta, dtype)
    _check_kv(state, k, v)
    s = state.s
    b = ops.reshape(beta, beta.shape + (1,))
    err = v - (_row(k) @ s)[..., 0, :]
    s = s + _col(k * b) @ _row(err)
    z = state.z
    if z is not None:
        z = z + k * b
    return MemoryState(s, z, state.tokens_seen + 1)


def accumulate_step(state: MemoryState, k, v, beta) -> MemoryState:
    """Plain linear-attention write ``s += beta k v^T`` and ``z += beta k``.

    This is the additive kernel memory that the normalized readout divides
    through; it has no erase term.
    """
    dtype = state.s.dtype
    k, v, beta = as_tensor(k, dtype), as_tensor(v, dtype), as_tensor(beta, dtype)
    _check_kv(state, k, v)
    b = ops.reshape(beta, beta.shape + (1,))
    s = state.s + _col(k * b) @ _row(v)
    z = state.z if state.z is not None else Tensor(np.zeros(k.shape, dtype=dtype))
    return MemoryState(s, z + k * b, state.tokens_seen + 1)


def readout(state: MemoryState, q, normalized: bool = False, eps: float = DEFAULT_EPS) -> Tensor:
    """``s^T q``, or ``s^T q / (z . q)`` when ``normalized``."""
    q = as_tensor(q, state.s.dtype)
    if q.shape[-1] != state.d_k:
        raise DimensionError(f"query dim {q.shape[-1]} does not match d_k={state.d_k}")
    out = (_row(q) @ state.s)[..., 0, :]
    if not normalized:
        return out
    if state.z is None:
        raise ContractViolation("normalized readout needs a state that maintains z")
    den = ops.sum(state.z * q, axis=-1, keepdims=True)
    if np.any(np.abs(den.data) < eps):
        raise DegenerateDenominatorError(f"|z . q| below eps={eps}")
    return out / den


def apply_state_nonlinearity(state: MemoryState, spec: ChunkSpec) -> MemoryState:
    """Elementwise ``phi`` on ``s``; ``z`` and the row count are untouched."""
    if spec.nonlinearity == "none":
        return state
    return replace(state, s=_phi(state.s, spec.nonlinearity))


def deltaproduct_step(state: MemoryState, ks, vs, betas) -> MemoryState:
    """``n_h`` delta writes for one token, in order j = 1..n_h.

    ``ks``/``vs`` have shape (..., n_h, d) and ``betas`` (..., n_h).
    """
    dtype = state.s.dtype
    ks, vs, betas = as_tensor(ks, dtype), as_tensor(vs, dtype), as_tensor(betas, dtype)
    for j in range(ks.shape[-2]):
        state = delta_step(state, ks[..., j, :], vs[..., j, :], betas[..., j])
    return state


def delta_sequential_scan(
    keys, values, betas, state: MemoryState, queries=None, spec: ChunkSpec | None = None
) -> ScanResult:
    """Apply :func:`delta_step` row by row.

    When ``queries`` is given, row ``t`` also produces ``s_t^T q_t`` read
    from the state *after* its own write. With a ``spec`` whose
    nonlinearity is not "none", ``phi`` is applied after every
    ``spec.rows_per_chunk`` rows (counted by ``tokens_seen``), which is the
    reference for the chunked path with boundary nonlinearity.
    """
    dtype = state.s.dtype
    keys, values, betas = as_tensor(keys, dtype), as_tensor(values, dtype), as_tensor(betas, dtype)
    if keys.shape[-2] != values.shape[-2] or keys.shape[-2] != betas.shape[-1]:
        raise DimensionError("keys, values and betas must have the same length")
    if queries is not None:
        queries = as_tensor(queries, dtype)
    period = spec.rows_per_chunk if spec is not None and spec.nonlinearity != "none" else 0
    states, outputs = [], []
    for t in range(keys.shape[-2]):
        state = delta_step(state, keys[..., t, :], values[..., t, :], betas[..., t])
        if queries is not None:
            outputs.append(readout(state, queries[..., t, :]))
        if period and state.tokens_seen % period == 0:
            state = apply_state_nonlinearity(state, spec)
        states.append(state.s)
    if not states:
        lead = state.s.shape[:-2]
        empty_states = Tensor(np.zeros(lead + (0,) + state.s.shape[-2:], dtype=dtype))
        empty_out = Tensor(np.zeros(lead + (0, state.d_v), dtype=dtype))
        return ScanResult(empty_states, None if queries is None else empty_out, state)
    out = ops.stack(outputs, axis=-2) if queries is not None else None
    return ScanResult(ops.stack(states, axis=-3), out, state)


def delta_product_form(keys, values, betas, s0=None) -> np.ndarray:
    """Final state from the closed-form expansion of the delta recurrence.

    ``S_T = P(1..T) s0 + sum_i P(i+1..T) beta_i k_i v_i^T`` with
    ``P(a..b) = A_b ... A_a`` and ``A_j = I - beta_j k_j k_j^T``. Evaluated
    directly in float64 on unbatched (T, d) inputs; used to cross-check
    the scan.
    """
    k = np.asarray(keys.data if isinstance(keys, Tensor) else keys, dtype=np.float64)
    v = np.asarray(values.data if isinstance(values, Tensor) else values, dtype=np.float64)
    b = np.asarray(betas.data if isinstance(betas, Tensor) else betas, dtype=np.float64)
    n, d_k = k.shape
    eye = np.eye(d_k)
    trans = [eye - b[j] * np.outer(k[j], k[j]) for j in range(n)]
    total = np.zeros((d_k, v.shape[1]))
    for i in range(n):
        term = b[i] * np.outer(k[i], v[i])
        for j in range(i + 1, n):
            term = trans[j] @ term
        total += term
    if s0 is not None:
        carry = np.asarray(s0.data if isinstance(s0, Tensor) else s0, dtype=np.float64)
        for j in range(n):
            carry = trans[j] @ carry
        total += carry
    return total


def _chunk(q, k, v, beta, s, tril_sign):
    n = k.shape[-2]
    dtype = s.dtype
    kb = k * _col(beta)
    r = v * _col(beta) - kb @ s
    lower = (kb @ ops.swapaxes(k, -1, -2)) * np.tri(n, n, -1, dtype=dtype)
    t = lower * tril_sign + np.eye(n, dtype=dtype)
    y = forward_substitution(t, r)
    s_new = s + ops.swapaxes(k, -1, -2) @ y
    out = None
    if q is not None:
        scores = (q @ ops.swapaxes(k, -1, -2)) * np.tri(n, n, 0, dtype=dtype)
        out = q @ s + scores @ y
    return s_new, y, out, kb


def chunkwise_update(
    keys, values, betas, state: MemoryState, spec: ChunkSpec, queries=None, tril_sign: float = 1.0
) -> ChunkResult:
    """Chunk-parallel equivalent of :func:`delta_sequential_scan`.

    Rows are grouped into chunks of ``spec.rows_per_chunk`` aligned to the
    state's absolute row count, so the final chunk may be shorter. Row
    outputs are ``s_in^T q_i + sum_{j<=i} (q_i . k_j) y_j``.

    ``tril_sign`` flips the strictly-lower term of the solved system; it
    exists for mutation testing and must stay +1 in real use.
    """
    dtype = state.s.dtype
    keys, values, betas = as_tensor(keys, dtype), as_tensor(values, dtype), as_tensor(betas, dtype)
    _check_kv(state, keys, values)
    n_rows = keys.shape[-2]
    if values.shape[-2] != n_rows or betas.shape[-1] != n_rows:
        raise DimensionError("keys, values and betas must have the same length")
    if n_rows % spec.n_h:
        raise ContractViolation(f"{n_rows} rows is not a multiple of n_h={spec.n_h}")
    if queries is not None:
        queries = as_tensor(queries, dtype)

    period = spec.rows_per_chunk
    pos = state.tokens_seen
    s, z = state.s, state.z
    ys, outs = [], []
    start = 0
    while start < n_rows:
        stop = min(n_rows, start + period - pos % period)
        q = queries[..., start:stop, :] if queries is not None else None
        s, y, out, kb = _chunk(
            q, keys[..., start:stop, :], values[..., start:stop, :], betas[..., start:stop], s, tril_sign
        )
        if z is not None:
            z = z + ops.sum(kb, axis=-2)
        pos += stop - start
        if pos % period == 0:
            s = _phi(s, spec.nonlinearity)
        ys.append(y)
        if out is not None:
            outs.append(out)
        start = stop

    new_state = MemoryState(s, z, pos)
    if not ys:
        empty = Tensor(np.zeros(values.shape, dtype=dtype))
        return ChunkResult(new_state, empty, empty if queries is not None else None)
    y = ys[0] if len(ys) == 1 else ops.concat(ys, axis=-2)
    out = None
    if outs:
        out = outs[0] if len(outs) == 1 else ops.concat(outs, axis=-2)
    return ChunkResult(new_state, y, out)
