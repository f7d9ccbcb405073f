"""LiZAttention: causal softmax attention and a delta-rule memory branch mixed by a scalar gate.

Per head the layer computes a softmax output ``o_base`` from the raw
projections and a linear output ``o_lin`` from SiLU/L2-normalized
projections written into a fast-weight memory. The two are mixed with
weight ``alpha`` (the "memory as gate" mix) before the output projection.

Incremental decoding keeps a :class:`LizaCache`. Its softmax part grows
with the sequence; its linear part is fixed-size (the memory state, the
last ``n_h - 1`` normalized rows needed by derivative expansion, and the
running sums behind the causal pooling).
"""

from __future__ import annotations

import functools
from dataclasses import dataclass, field

import numpy as np

from memgate.errors import ContractViolation, DimensionError
from memgate.expansion import ExpansionSpec, expand
from memgate.memory import ChunkSpec, MemoryState, chunkwise_update
from memgate.numerics import ops
from memgate.numerics.functional import DEFAULT_EPS, rmsnorm, silu_l2_normalize
from memgate.numerics.tensor import DEFAULT_DTYPE, Tensor, active_tape, as_tensor

BETA_SOURCES = ("k", "v", "kv")
MIXINGS = ("gated", "cross_gate")
SOFTMAX_BLOCK = 256  # query rows per block when no gradient is recorded


@dataclass(frozen=True)
class MagConfig:
    alpha: float = 0.5
    mixing: str = "gated"

    def __post_init__(self):
        _check_alpha(self.alpha)
        if self.mixing not in MIXINGS:
            raise ContractViolation(f"mixing must be one of {MIXINGS}, got {self.mixing!r}")


@dataclass(frozen=True)
class AttentionConfig:
    d_model: int
    n_heads: int = 1
    chunk: ChunkSpec = field(default_factory=ChunkSpec)
    expansion: ExpansionSpec = field(default_factory=ExpansionSpec)
    mag: MagConfig = field(default_factory=MagConfig)
    share_projections: bool = True
    beta_source: str = "k"
    eps: float = DEFAULT_EPS

    def __post_init__(self):
        if self.d_model < 1 or self.n_heads < 1:
            raise ContractViolation("d_model and n_heads must be positive")
        if self.d_model % self.n_heads:
            raise ContractViolation(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")
        if self.beta_source not in BETA_SOURCES:
            raise ContractViolation(f"beta_source must be one of {BETA_SOURCES}, got {self.beta_source!r}")
        if self.chunk.n_h != self.expansion.n_h:
            raise ContractViolation(
                f"chunk.n_h={self.chunk.n_h} must equal expansion.n_h={self.expansion.n_h}"
            )
        if self.expansion.mode != "derivative" and self.d_head % 2:
            raise ContractViolation(f"{self.expansion.mode} expansion needs an even d_head, got {self.d_head}")

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads

    @property
    def n_h(self) -> int:
        return self.expansion.n_h


def _check_alpha(alpha: float) -> None:
    if not 0.0 <= alpha <= 1.0:
        raise ContractViolation(f"alpha must lie in [0, 1], got {alpha}")


# -- cache ------------------------------------------------------------------

class LizaCache:
    """Decoding state for one layer and one batch.

    Single-writer: calls that advance a cache must be sequential.
    """

    def __init__(self, cfg: AttentionConfig, batch: int, dtype=DEFAULT_DTYPE, capacity: int = 64):
        h, d = cfg.n_heads, cfg.d_head
        self.dtype = np.dtype(dtype)
        self.position = 0
        self._keys = np.zeros((batch, h, capacity, d), dtype=self.dtype)
        self._values = np.zeros_like(self._keys)
        self.memory = MemoryState.zeros(d, d, batch_shape=(batch, h), dtype=self.dtype)
        n_hist = cfg.expansion.history
        self.history = tuple(np.zeros((batch, h, n_hist, d), dtype=self.dtype) for _ in range(3))
        self.pool_k = np.zeros((batch, h, d), dtype=self.dtype)
        self.pool_v = np.zeros((batch, h, d), dtype=self.dtype)

    @property
    def batch(self) -> int:
        return self._keys.shape[0]

    @property
    def keys(self) -> np.ndarray:
        return self._keys[:, :, : self.position]

    @property
    def values(self) -> np.ndarray:
        return self._values[:, :, : self.position]

    def append_kv(self, k: np.ndarray, v: np.ndarray) -> None:
        n = k.shape[2]
        need = self.position + n
        if need > self._keys.shape[2]:
            cap = max(need, 2 * self._keys.shape[2])
            grow = ((0, 0), (0, 0), (0, cap - self._keys.shape[2]), (0, 0))
            self._keys = np.pad(self._keys, grow)
            self._values = np.pad(self._values, grow)
        self._keys[:, :, self.position : need] = k
        self._values[:, :, self.position : need] = v

    @property
    def softmax_nbytes(self) -> int:
        return self.keys.nbytes + self.values.nbytes

    @property
    def linear_nbytes(self) -> int:
        hist = sum(h.nbytes for h in self.history)
        return self.memory.nbytes + hist + self.pool_k.nbytes + self.pool_v.nbytes

    @property
    def history_rows(self) -> int:
        return self.history[0].shape[2]


# -- branch operators -------------------------------------------------------

def split_heads(x: Tensor, n_heads: int) -> Tensor:
    b, t, d = x.shape
    return ops.transpose(ops.reshape(x, (b, t, n_heads, d // n_heads)), (0, 2, 1, 3))


def merge_heads(x: Tensor) -> Tensor:
    b, h, t, d = x.shape
    return ops.reshape(ops.transpose(x, (0, 2, 1, 3)), (b, t, h * d))


def project_qkv(x, w_q, w_k, w_v, n_heads: int) -> tuple[Tensor, Tensor, Tensor]:
    """Project B x T x d_model inputs and split into B x H x T x d_head."""
    x = as_tensor(x)
    if x.ndim != 3:
        raise DimensionError(f"expected B x T x d_model input, got shape {x.shape}")
    for w in (w_q, w_k, w_v):
        if w.shape[0] != x.shape[-1] or w.shape[1] % n_heads:
            raise DimensionError(f"projection {w.shape} does not fit input {x.shape} with {n_heads} heads")
    return tuple(split_heads(ops.matmul(x, w), n_heads) for w in (w_q, w_k, w_v))


def _causal_mask(t_q: int, t_k: int, offset: int, dtype) -> np.ndarray:
    rows = np.arange(t_q)[:, None] + offset
    return np.where(np.arange(t_k)[None, :] <= rows, 0.0, -np.inf).astype(dtype)


@functools.lru_cache(maxsize=8)
def _square_mask(n: int, dtype) -> np.ndarray:
    return _causal_mask(n, n, 0, dtype)


def _softmax_block(q: np.ndarray, k: np.ndarray, v: np.ndarray, offset: int, scale: float) -> np.ndarray:
    scores = np.matmul(q, np.swapaxes(k, -1, -2))
    scores *= scale
    # keys before ``offset`` are visible to every query; only the tail square needs masking
    n = q.shape[-2]
    scores[..., offset:] += _square_mask(n, scores.dtype)
    scores -= scores.max(axis=-1, keepdims=True)
    np.exp(scores, out=scores)
    scores /= scores.sum(axis=-1, keepdims=True)
    return np.matmul(scores, v)


def softmax_attention(q, k, v, offset: int = 0) -> Tensor:
    """Causal scaled dot-product attention.

    ``k`` and ``v`` hold ``offset + T_q`` positions; query ``i`` sits at
    absolute position ``offset + i`` and sees keys up to that position.
    """
    q, k, v = as_tensor(q), as_tensor(k), as_tensor(v)
    t_q, t_k = q.shape[-2], k.shape[-2]
    if t_k != offset + t_q:
        raise DimensionError(f"{t_k} keys do not match {t_q} queries at offset {offset}")
    scale = 1.0 / float(np.sqrt(q.shape[-1]))
    recording = active_tape() is not None and any(x.requires_grad for x in (q, k, v))
    if not recording:
        blocks = [
            _softmax_block(q.data[..., i : i + SOFTMAX_BLOCK, :], k.data[..., : offset + i + SOFTMAX_BLOCK, :],
                           v.data[..., : offset + i + SOFTMAX_BLOCK, :], offset + i, scale)
            for i in range(0, t_q, SOFTMAX_BLOCK)
        ]
        return Tensor(np.concatenate(blocks, axis=-2) if len(blocks) > 1 else blocks[0])
    scores = ops.matmul(q, ops.swapaxes(k, -1, -2)) * scale
    weights = ops.softmax(scores + _causal_mask(t_q, t_k, offset, scores.dtype), axis=-1)
    return ops.matmul(weights, v)


def _prefix_mean(x: Tensor, prior_sum, offset: int) -> Tensor:
    total = ops.cumsum(x, axis=-2)
    if prior_sum is not None:
        total = total + np.expand_dims(prior_sum, -2)
    counts = np.arange(offset + 1, offset + x.shape[-2] + 1, dtype=x.dtype)[:, None]
    return total / counts


def beta_gates(k, v, source: str = "k", prior=None, offset: int = 0) -> Tensor:
    """Per-token write strength from the causal running mean of the chosen stream(s).

    ``prior`` is an optional ``(sum_k, sum_v)`` pair of running sums over
    the ``offset`` tokens already seen. Returns shape (..., T).
    """
    if source not in BETA_SOURCES:
        raise ContractViolation(f"beta_source must be one of {BETA_SOURCES}, got {source!r}")
    pk, pv = prior if prior is not None else (None, None)
    gate = None
    if source in ("k", "kv"):
        gate = ops.sigmoid(_prefix_mean(as_tensor(k), pk, offset))
    if source in ("v", "kv"):
        gv = ops.sigmoid(_prefix_mean(as_tensor(v), pv, offset))
        gate = gv if gate is None else gate * gv
    return ops.mean(gate, axis=-1)


def linear_branch(q, k, v, cfg: AttentionConfig, gain, cache: LizaCache | None = None, beta=None) -> Tensor:
    """Memory-branch output for B x H x T x d_head streams.

    ``beta`` overrides the pooled gates (shape broadcastable to B x H x T).
    With a cache, the memory state, history rows and pooling sums continue
    from it and are advanced in place.
    """
    qn, kn, vn = (silu_l2_normalize(x, cfg.eps) for x in (q, k, v))
    offset = cache.position if cache is not None else 0
    if beta is None:
        prior = (cache.pool_k, cache.pool_v) if cache is not None else None
        beta = beta_gates(kn, vn, cfg.beta_source, prior, offset)
    else:
        beta = Tensor(np.broadcast_to(np.asarray(beta, dtype=qn.dtype), qn.shape[:-1]).copy())

    history = cache.history if cache is not None and cache.history_rows else None
    eq, ek, ev, eb = expand(qn, kn, vn, beta, cfg.expansion, history=history)
    if cache is not None:
        state = cache.memory
    else:
        state = MemoryState.zeros(cfg.d_head, cfg.d_head, batch_shape=qn.shape[:2], dtype=qn.dtype)
    res = chunkwise_update(ek, ev, eb, state, cfg.chunk, queries=eq)
    n_h = cfg.n_h
    out = res.outputs if n_h == 1 else res.outputs[..., n_h - 1 :: n_h, :]

    if cache is not None:
        cache.memory = MemoryState(res.state.s.detach(), None, res.state.tokens_seen)
        if cache.history_rows:
            rows = cache.history_rows
            cache.history = tuple(
                np.concatenate([h, x.data], axis=2)[:, :, -rows:].copy()
                for h, x in zip(cache.history, (qn, kn, vn))
            )
        cache.pool_k = cache.pool_k + kn.data.sum(axis=2)
        cache.pool_v = cache.pool_v + vn.data.sum(axis=2)
    return rmsnorm(out, gain, cfg.eps)


def mag_mix(o_base, o_lin, mag: MagConfig, alpha: float | None = None) -> Tensor:
    """``(1-a) o_base + a o_lin``, plus ``((1-a) o_base) * (a o_lin)`` for cross-gating.

    Either input may be ``None`` at the matching endpoint (``alpha`` 1 or 0),
    in which case the other is returned unchanged.
    """
    a = mag.alpha if alpha is None else float(alpha)
    _check_alpha(a)
    if o_lin is None:
        if a != 0.0:
            raise ContractViolation("linear output is required unless alpha == 0")
        return as_tensor(o_base)
    if o_base is None:
        if a != 1.0:
            raise ContractViolation("softmax output is required unless alpha == 1")
        return as_tensor(o_lin)
    o_base, o_lin = as_tensor(o_base), as_tensor(o_lin)
    if o_base.shape != o_lin.shape:
        raise DimensionError(f"branch outputs differ in shape: {o_base.shape} vs {o_lin.shape}")
    base = o_base * (1.0 - a)
    lin = o_lin * a
    out = base + lin
    if mag.mixing == "cross_gate":
        out = out + base * lin
    return out


# -- layer ------------------------------------------------------------------

class LiZAttention:
    """One attention layer with its parameters.

    Parameters are float Tensors with ``requires_grad=True``: ``w_q``,
    ``w_k``, ``w_v``, ``w_o`` (d_model x d_model, applied as ``x @ w``),
    ``norm_gain`` (d_head) and, when projections are not shared,
    ``lin_w_q``, ``lin_w_k``, ``lin_w_v`` for the memory branch.
    """

    def __init__(self, cfg: AttentionConfig, rng: np.random.Generator | int = 0, dtype=DEFAULT_DTYPE, prefix=""):
        self.cfg = cfg
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(rng)
        d = cfg.d_model
        bound = 1.0 / np.sqrt(d)
        names = ["w_q", "w_k", "w_v"]
        if not cfg.share_projections:
            names += ["lin_w_q", "lin_w_k", "lin_w_v"]
        self.params: dict[str, Tensor] = {}
        for name in names:
            self.params[name] = self._param(rng.uniform(-bound, bound, (d, d)), prefix + name)
        self.params["w_o"] = self._param(rng.uniform(-0.1 * bound, 0.1 * bound, (d, d)), prefix + "w_o")
        self.params["norm_gain"] = self._param(np.ones(cfg.d_head), prefix + "norm_gain")

    def _param(self, data, name) -> Tensor:
        return Tensor(np.asarray(data, dtype=self.dtype), requires_grad=True, name=name)

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def new_cache(self, batch: int) -> LizaCache:
        return LizaCache(self.cfg, batch, self.dtype)

    def mixed_heads(self, x, cache: LizaCache | None = None, alpha: float | None = None,
                    position: int | None = None) -> Tensor:
        """Per-head mixed output, B x H x T x d_head, before the output projection."""
        cfg, p = self.cfg, self.params
        x = as_tensor(x, self.dtype)
        if x.ndim != 3 or x.shape[-1] != cfg.d_model:
            raise DimensionError(f"expected B x T x {cfg.d_model} input, got {x.shape}")
        a = cfg.mag.alpha if alpha is None else float(alpha)
        _check_alpha(a)
        if cache is not None:
            if position is not None and position != cache.position:
                raise ContractViolation(f"cache is at position {cache.position}, input claims {position}")
            if cache.batch != x.shape[0]:
                raise ContractViolation(f"cache batch {cache.batch} does not match input batch {x.shape[0]}")
        elif position not in (None, 0):
            raise ContractViolation("a nonzero position needs a cache")

        # without a cache an endpoint alpha makes one branch dead weight
        need_base = cache is not None or a < 1.0
        need_lin = cache is not None or a > 0.0
        q, k, v = project_qkv(x, p["w_q"], p["w_k"], p["w_v"], cfg.n_heads)

        o_base = None
        if need_base:
            if cache is None:
                o_base = softmax_attention(q, k, v)
            else:
                offset = cache.position
                cache.append_kv(k.data, v.data)
                keys = ops.concat([Tensor(cache.keys[:, :, :offset]), k], axis=2)
                values = ops.concat([Tensor(cache.values[:, :, :offset]), v], axis=2)
                o_base = softmax_attention(q, keys, values, offset=offset)

        o_lin = None
        if need_lin:
            if not cfg.share_projections:
                q, k, v = project_qkv(x, p["lin_w_q"], p["lin_w_k"], p["lin_w_v"], cfg.n_heads)
            o_lin = linear_branch(q, k, v, cfg, p["norm_gain"], cache)

        if cache is not None:
            cache.position += x.shape[1]
        if not need_lin:
            return mag_mix(o_base, None, cfg.mag, a)
        if not need_base:
            return mag_mix(None, o_lin, cfg.mag, a)
        return mag_mix(o_base, o_lin, cfg.mag, a)

    def forward(self, x, cache: LizaCache | None = None, alpha: float | None = None,
                position: int | None = None) -> Tensor:
        heads = self.mixed_heads(x, cache, alpha, position)
        return ops.matmul(merge_heads(heads), self.params["w_o"])

    __call__ = forward

    def decode_step(self, x_t, cache: LizaCache, alpha: float | None = None) -> Tensor:
        if cache is None:
            raise ContractViolation("decode_step needs an initialized cache")
        x_t = as_tensor(x_t, self.dtype)
        if x_t.ndim != 3 or x_t.shape[1] != 1:
            raise DimensionError(f"decode_step takes one token (B x 1 x d_model), got {x_t.shape}")
        return self.forward(x_t, cache, alpha)


def liza_forward(layer: LiZAttention, x, cache: LizaCache | None = None, alpha: float | None = None,
                 position: int | None = None) -> Tensor:
    """Full-sequence forward; advances ``cache`` when one is given."""
    return layer.forward(x, cache, alpha, position)


def decode_step(layer: LiZAttention, x_t, cache: LizaCache, alpha: float | None = None) -> Tensor:
    """One-token forward that continues from ``cache``."""
    return layer.decode_step(x_t, cache, alpha)
