"""Virtual-token expansion: each real token becomes ``n_h`` rows.

Row ``m`` of token ``t`` is either the m-th backward difference of the
stream (derivative mode), the token rotated pairwise by ``2 pi m / n_h``
(rotary mode), or both composed. Output rows are interleaved: the rows
of token ``t`` occupy ``n_h*t .. n_h*t + n_h - 1`` in order of ``m``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from memgate.errors import ContractViolation
from memgate.numerics import ops
from memgate.numerics.tensor import Tensor, as_tensor

MODES = ("derivative", "rotary", "both")
COMBINES = ("compose", "alternate")


@dataclass(frozen=True)
class ExpansionSpec:
    """How real tokens are turned into virtual tokens.

    ``z_norm`` holds the divisor for each difference order; by default
    ``Z_m = 2**m``, the L1 norm of the binomial row, so a difference never
    exceeds the largest input it mixes. ``combine`` only matters for
    ``mode="both"``: "compose" rotates the m-th difference, "alternate"
    takes the difference for even m and the rotation for odd m.
    """

    mode: str = "derivative"
    n_h: int = 1
    z_norm: tuple[float, ...] | None = None
    combine: str = "compose"

    def __post_init__(self):
        if self.mode not in MODES:
            raise ContractViolation(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.n_h < 1:
            raise ContractViolation(f"n_h must be >= 1, got {self.n_h}")
        if self.combine not in COMBINES:
            raise ContractViolation(f"combine must be one of {COMBINES}, got {self.combine!r}")
        if self.z_norm is not None:
            if len(self.z_norm) != self.n_h:
                raise ContractViolation(f"z_norm needs {self.n_h} entries, got {len(self.z_norm)}")
            if any(z <= 0 for z in self.z_norm):
                raise ContractViolation("z_norm entries must be positive")

    @property
    def scales(self) -> tuple[float, ...]:
        if self.z_norm is not None:
            return tuple(float(z) for z in self.z_norm)
        return tuple(float(2**m) for m in range(self.n_h))

    @property
    def history(self) -> int:
        """Past real tokens a derivative row can reach."""
        return self.n_h - 1 if self.mode in ("derivative", "both") else 0


def _interleave(rows: list[Tensor]) -> Tensor:
    if len(rows) == 1:
        return rows[0]
    stacked = ops.stack(rows, axis=-2)  # (..., T, n_h, d)
    shape = stacked.shape
    return ops.reshape(stacked, shape[:-3] + (shape[-3] * shape[-2], shape[-1]))


def _derivative_rows(x: Tensor, spec: ExpansionSpec, history=None) -> list[Tensor]:
    n_h = spec.n_h
    if n_h == 1:
        return [x]
    lead, t, d = x.shape[:-2], x.shape[-2], x.shape[-1]
    pad = n_h - 1
    if history is None:
        past = Tensor(np.zeros(lead + (pad, d), dtype=x.dtype))
    else:
        past = as_tensor(history, x.dtype)
        if past.shape[-2] != pad:
            raise ContractViolation(f"history must hold {pad} rows, got {past.shape[-2]}")
    padded = ops.concat([past, x], axis=-2)
    shifted = [padded[..., pad - j : pad - j + t, :] for j in range(n_h)]
    rows = []
    for m, z in enumerate(spec.scales):
        acc = shifted[0]
        for j in range(1, m + 1):
            acc = acc + shifted[j] * ((-1) ** j * math.comb(m, j))
        rows.append(acc * (1.0 / z) if z != 1.0 else acc)
    return rows


def _angle_cos_sin(theta: float) -> tuple[float, float]:
    c, s = math.cos(theta), math.sin(theta)
    # snap so quarter and half turns are exact
    if abs(c) < 1e-12:
        c, s = 0.0, math.copysign(1.0, s)
    elif abs(s) < 1e-12:
        c, s = math.copysign(1.0, c), 0.0
    return c, s


def rotate_pairs(x: Tensor, theta: float) -> Tensor:
    """Rotate each feature pair (2i, 2i+1) of ``x`` by ``theta``."""
    d = x.shape[-1]
    if d % 2:
        raise ContractViolation(f"rotation needs an even feature dimension, got {d}")
    c, s = _angle_cos_sin(theta)
    if s == 0.0 and c == 1.0:
        return x
    a, b = x[..., 0::2], x[..., 1::2]
    pair = ops.stack([a * c - b * s, a * s + b * c], axis=-1)
    return ops.reshape(pair, x.shape)


def _rotary_rows(x: Tensor, spec: ExpansionSpec) -> list[Tensor]:
    return [rotate_pairs(x, 2 * math.pi * m / spec.n_h) for m in range(spec.n_h)]


def _rows(x: Tensor, spec: ExpansionSpec, history=None) -> list[Tensor]:
    if spec.mode == "derivative":
        return _derivative_rows(x, spec, history)
    if spec.mode == "rotary":
        return _rotary_rows(x, spec)
    diffs = _derivative_rows(x, spec, history)
    if spec.combine == "compose":
        return [rotate_pairs(r, 2 * math.pi * m / spec.n_h) for m, r in enumerate(diffs)]
    return [r if m % 2 == 0 else rotate_pairs(x, 2 * math.pi * m / spec.n_h) for m, r in enumerate(diffs)]


def expand_derivative(x, spec: ExpansionSpec, history=None) -> Tensor:
    """Finite-difference virtual tokens, (..., T, d) -> (..., n_h*T, d).

    Row m of token t is ``sum_j (-1)^j C(m, j) x_{t-j} / Z_m``. Tokens
    before the start of ``x`` come from ``history`` (the ``n_h - 1``
    preceding raw tokens, oldest first) or are zero.
    """
    x = as_tensor(x)
    if x.shape[-2] < 1:
        raise ContractViolation("expansion needs at least one token")
    return _interleave(_derivative_rows(x, spec, history))


def expand_rotary(x, spec: ExpansionSpec) -> Tensor:
    """Rotated virtual tokens: row m is ``x_t`` with every pair turned by ``2 pi m / n_h``."""
    x = as_tensor(x)
    if x.shape[-1] % 2:
        raise ContractViolation(f"rotary expansion needs an even feature dimension, got {x.shape[-1]}")
    return _interleave(_rotary_rows(x, spec))


def expand_stream(x, spec: ExpansionSpec, history=None) -> Tensor:
    """Expand one (..., T, d) stream according to ``spec.mode``."""
    x = as_tensor(x)
    if x.shape[-2] < 1:
        raise ContractViolation("expansion needs at least one token")
    if spec.mode in ("rotary", "both") and x.shape[-1] % 2:
        raise ContractViolation(f"{spec.mode} expansion needs an even feature dimension")
    return _interleave(_rows(x, spec, history))


def expand_beta(beta, n_h: int) -> Tensor:
    """Repeat each gate ``n_h`` times: (..., T) -> (..., n_h*T)."""
    beta = as_tensor(beta)
    if n_h == 1:
        return beta
    rep = ops.stack([beta] * n_h, axis=-1)
    return ops.reshape(rep, beta.shape[:-1] + (beta.shape[-1] * n_h,))


def expand(q, k, v, beta, spec: ExpansionSpec, history=None):
    """Expand all four streams with one spec.

    ``history`` is an optional ``(q, k, v)`` triple of preceding raw rows
    used by derivative rows. Returns ``(q, k, v, beta)`` with ``n_h*T`` rows.
    """
    hq = hk = hv = None
    if history is not None:
        hq, hk, hv = history
    return (
        expand_stream(q, spec, hq),
        expand_stream(k, spec, hk),
        expand_stream(v, spec, hv),
        expand_beta(beta, spec.n_h),
    )
