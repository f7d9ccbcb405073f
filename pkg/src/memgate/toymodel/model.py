"""A small decoder-only transformer assembled from LiZAttention blocks."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from memgate.attention import AttentionConfig, LiZAttention, LizaCache
from memgate.errors import ContractViolation, DimensionError
from memgate.numerics import ops
from memgate.numerics.functional import rmsnorm
from memgate.numerics.tensor import DEFAULT_DTYPE, Tensor


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = 16
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 2
    max_seq_len: int = 64
    attention: AttentionConfig | None = None
    mlp_hidden: int = 128
    tie_embeddings: bool = False

    def __post_init__(self):
        for name in ("vocab_size", "d_model", "n_heads", "max_seq_len", "mlp_hidden"):
            if getattr(self, name) < 1:
                raise ContractViolation(f"{name} must be positive, got {getattr(self, name)}")
        if self.n_layers < 0:
            raise ContractViolation(f"n_layers must be >= 0, got {self.n_layers}")
        if self.attention is None:
            object.__setattr__(self, "attention", AttentionConfig(self.d_model, self.n_heads))
        att = self.attention
        if att.d_model != self.d_model or att.n_heads != self.n_heads:
            raise ContractViolation(
                f"attention config ({att.d_model}, {att.n_heads} heads) does not match "
                f"model ({self.d_model}, {self.n_heads} heads)"
            )


class ToyModel:
    """Token + learned position embeddings, pre-norm blocks, final norm, linear head.

    Each block is ``x + attn(norm(x))`` followed by ``x + mlp(norm(x))``
    with a GELU MLP. Parameters live in ``self.params`` under dotted names.
    """

    def __init__(self, cfg: ModelConfig, seed: int = 0, dtype=DEFAULT_DTYPE):
        self.cfg = cfg
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(seed)
        d, h = cfg.d_model, cfg.mlp_hidden
        self.params: dict[str, Tensor] = {}
        self._add("tok_emb", rng.normal(0.0, 1.0, (cfg.vocab_size, d)))
        self._add("pos_emb", rng.normal(0.0, 0.1, (cfg.max_seq_len, d)))
        self.layers: list[LiZAttention] = []
        for i in range(cfg.n_layers):
            pre = f"blocks.{i}."
            attn = LiZAttention(cfg.attention, rng, self.dtype, prefix=pre + "attn.")
            self.layers.append(attn)
            for name, p in attn.params.items():
                self.params[pre + "attn." + name] = p
            self._add(pre + "norm1", np.ones(d))
            self._add(pre + "norm2", np.ones(d))
            self._add(pre + "mlp.w1", rng.uniform(-1, 1, (d, h)) / np.sqrt(d))
            self._add(pre + "mlp.b1", np.zeros(h))
            self._add(pre + "mlp.w2", rng.uniform(-1, 1, (h, d)) * 0.1 / np.sqrt(h))
            self._add(pre + "mlp.b2", np.zeros(d))
        self._add("final_norm", np.ones(d))
        if not cfg.tie_embeddings:
            # small head so the untrained model predicts near-uniform tokens
            self._add("head", rng.uniform(-1, 1, (d, cfg.vocab_size)) * 0.01 / np.sqrt(d))

    def _add(self, name: str, data) -> None:
        self.params[name] = Tensor(np.asarray(data, dtype=self.dtype), requires_grad=True, name=name)

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def num_parameters(self) -> int:
        return sum(p.size for p in self.params.values())

    def new_caches(self, batch: int) -> list[LizaCache]:
        return [layer.new_cache(batch) for layer in self.layers]

    def _head(self) -> Tensor:
        if self.cfg.tie_embeddings:
            return ops.transpose(self.params["tok_emb"])
        return self.params["head"]

    def forward(self, tokens, alpha: float | None = None, caches: list[LizaCache] | None = None) -> Tensor:
        """Logits of shape (B, T, vocab) for integer ``tokens`` of shape (B, T)."""
        tokens = np.asarray(tokens)
        if tokens.ndim != 2:
            raise DimensionError(f"tokens must be B x T, got shape {tokens.shape}")
        if tokens.size and (tokens.min() < 0 or tokens.max() >= self.cfg.vocab_size):
            raise ContractViolation("token id outside the vocabulary")
        start = caches[0].position if caches else 0
        t = tokens.shape[1]
        if start + t > self.cfg.max_seq_len:
            raise ContractViolation(f"sequence of {start + t} tokens exceeds max_seq_len={self.cfg.max_seq_len}")
        p = self.params
        x = ops.embedding(p["tok_emb"], tokens) + p["pos_emb"][start : start + t]
        for i, layer in enumerate(self.layers):
            pre = f"blocks.{i}."
            cache = caches[i] if caches else None
            x = x + layer.forward(rmsnorm(x, p[pre + "norm1"]), cache=cache, alpha=alpha)
            hdn = ops.gelu(ops.matmul(rmsnorm(x, p[pre + "norm2"]), p[pre + "mlp.w1"]) + p[pre + "mlp.b1"])
            x = x + ops.matmul(hdn, p[pre + "mlp.w2"]) + p[pre + "mlp.b2"]
        return ops.matmul(rmsnorm(x, p["final_norm"]), self._head())

    __call__ = forward

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {name: p.data for name, p in self.params.items()}

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        missing = set(self.params) - set(arrays)
        if missing:
            raise ContractViolation(f"checkpoint lacks parameters: {sorted(missing)}")
        for name, p in self.params.items():
            arr = arrays[name]
            if arr.shape != p.shape:
                raise DimensionError(f"{name}: checkpoint shape {arr.shape} != model shape {p.shape}")
            p.data[...] = arr


def build_model(cfg: ModelConfig, seed: int = 0, dtype=DEFAULT_DTYPE) -> ToyModel:
    return ToyModel(cfg, seed, dtype)


def cross_entropy(logits: Tensor, targets, mask) -> Tensor:
    """Mean negative log-likelihood over positions where ``mask`` is nonzero."""
    mask = np.asarray(mask, dtype=logits.dtype)
    count = float(mask.sum())
    if count == 0:
        raise ContractViolation("loss mask selects no positions")
    nll = -ops.take_last(ops.log_softmax(logits, axis=-1), np.asarray(targets))
    return ops.sum(nll * mask) * (1.0 / count)
