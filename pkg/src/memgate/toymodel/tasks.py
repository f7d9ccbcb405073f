"""Synthetic sequence tasks: parity, associative recall and copy.

Every generator returns integer ``tokens`` and ``targets`` of shape
(batch, T) plus a float ``mask`` marking the positions that are scored.
Targets at unscored positions are still filled in, never garbage.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from memgate.errors import ContractViolation

KINDS = ("parity", "assoc_recall", "copy")
DEFAULT_VOCAB = {"parity": 2, "assoc_recall": 16, "copy": 16}


@dataclass(frozen=True)
class TaskSpec:
    """What to train or evaluate on.

    ``length`` is the number of bits (parity), the total sequence length
    (assoc_recall) or the length of the sequence to copy (copy, which
    yields ``2 * length`` tokens). ``dense`` scores parity at every prefix
    instead of only the final position.
    """

    kind: str = "copy"
    length: int = 16
    vocab_size: int | None = None
    dense: bool = False

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ContractViolation(f"task kind must be one of {KINDS}, got {self.kind!r}")
        if self.length < 1:
            raise ContractViolation(f"length must be >= 1, got {self.length}")
        vocab = self.vocab
        if self.kind == "parity" and vocab < 2:
            raise ContractViolation("parity needs a vocabulary of at least 2")
        if self.kind == "copy" and vocab < 3:
            raise ContractViolation("copy needs at least two symbols plus a delimiter")
        if self.kind == "assoc_recall":
            if vocab < 4 or vocab % 2:
                raise ContractViolation("assoc_recall needs an even vocabulary of at least 4")
            if self.length < 3:
                raise ContractViolation("assoc_recall needs length >= 3 (one pair and a query)")
            if (self.length - 1) // 2 > vocab // 2:
                raise ContractViolation(f"{(self.length - 1) // 2} pairs need more than {vocab // 2} distinct keys")

    @property
    def vocab(self) -> int:
        return self.vocab_size if self.vocab_size is not None else DEFAULT_VOCAB[self.kind]

    @property
    def seq_len(self) -> int:
        return 2 * self.length if self.kind == "copy" else self.length


@dataclass(frozen=True)
class Batch:
    tokens: np.ndarray
    targets: np.ndarray
    mask: np.ndarray


def _parity(spec: TaskSpec, rng: np.random.Generator, batch: int) -> Batch:
    bits = rng.integers(0, 2, size=(batch, spec.length))
    targets = np.cumsum(bits, axis=1) % 2
    mask = np.ones(bits.shape) if spec.dense else np.zeros(bits.shape)
    mask[:, -1] = 1.0
    return Batch(bits, targets, mask)


def _assoc_recall(spec: TaskSpec, rng: np.random.Generator, batch: int) -> Batch:
    half = spec.vocab // 2
    n_pairs = (spec.length - 1) // 2
    tokens = np.empty((batch, spec.length), dtype=np.int64)
    targets = np.zeros_like(tokens)
    for b in range(batch):
        keys = rng.choice(half, size=n_pairs, replace=False)
        values = rng.integers(half, spec.vocab, size=n_pairs)
        tokens[b, 0 : 2 * n_pairs : 2] = keys
        tokens[b, 1 : 2 * n_pairs : 2] = values
        pick = rng.integers(n_pairs)
        # an even length leaves one spare slot, filled by repeating the query
        tokens[b, 2 * n_pairs :] = keys[pick]
        targets[b, -1] = values[pick]
    mask = np.zeros(tokens.shape)
    mask[:, -1] = 1.0
    return Batch(tokens, targets, mask)


def _copy(spec: TaskSpec, rng: np.random.Generator, batch: int) -> Batch:
    n = spec.length
    delim = spec.vocab - 1
    seq = rng.integers(0, delim, size=(batch, n))
    # teacher forcing: after the delimiter the input is the copy shifted by one
    tokens = np.concatenate([seq, np.full((batch, 1), delim), seq[:, :-1]], axis=1)
    targets = np.concatenate([seq, seq], axis=1)
    mask = np.zeros(tokens.shape)
    mask[:, n:] = 1.0
    return Batch(tokens, targets, mask)


_GENERATORS = {"parity": _parity, "assoc_recall": _assoc_recall, "copy": _copy}


def gen_task(kind: str | TaskSpec, length: int | None = None, seed=0, batch: int = 1,
             vocab_size: int | None = None, dense: bool = False) -> Batch:
    """Draw ``batch`` examples; identical arguments give identical batches."""
    spec = kind if isinstance(kind, TaskSpec) else TaskSpec(kind, length, vocab_size, dense)
    rng = np.random.default_rng(seed)
    out = _GENERATORS[spec.kind](spec, rng, batch)
    return Batch(out.tokens.astype(np.int64), out.targets.astype(np.int64), out.mask.astype(np.float64))


def parity_of(bits) -> int:
    return int(np.sum(bits)) % 2
