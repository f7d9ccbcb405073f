"""Dense tensor value type and the tape used for reverse-mode differentiation.

A :class:`Tensor` wraps a contiguous numpy array. Operations only record
themselves when a :class:`GradTape` is active on the current thread and at
least one input requires a gradient; outside a tape every op is a plain
numpy computation, which is what inference and benchmarking rely on.

Example::

    w = Tensor([1.0, 2.0, 3.0], requires_grad=True)
    with GradTape() as tape:
        loss = (w * w).sum()
    grads = backward(tape, loss)   # grads[w] == [2, 4, 6]
"""

from __future__ import annotations

import threading
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

from memgate.errors import ContractViolation, NonFiniteError

DEFAULT_DTYPE = np.float32

_local = threading.local()


def _tape_stack() -> list:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def active_tape() -> "GradTape | None":
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    """An n-dimensional real array, optionally tracked for gradients."""

    __slots__ = ("data", "requires_grad", "grad", "name", "_leaf", "__weakref__")
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            arr = np.asarray(data)
            if not isinstance(data, np.ndarray) or arr.dtype not in (np.float32, np.float64):
                arr = arr.astype(DEFAULT_DTYPE)
        else:
            arr = np.asarray(data, dtype=dtype)
        self.data = arr if arr.flags.c_contiguous else np.ascontiguousarray(arr)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name
        self._leaf = True

    # -- array protocol -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def nbytes(self) -> int:
        return self.data.nbytes

    @property
    def is_leaf(self) -> bool:
        return self._leaf

    @property
    def T(self) -> "Tensor":
        """Swap the trailing two axes."""
        return _ops.swapaxes(self, -1, -2)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.item())

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __len__(self) -> int:
        return len(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    # -- operators ------------------------------------------------------
    def __add__(self, other):
        return _ops.add(self, other)

    def __radd__(self, other):
        return _ops.add(other, self)

    def __sub__(self, other):
        return _ops.sub(self, other)

    def __rsub__(self, other):
        return _ops.sub(other, self)

    def __mul__(self, other):
        return _ops.mul(self, other)

    def __rmul__(self, other):
        return _ops.mul(other, self)

    def __truediv__(self, other):
        return _ops.div(self, other)

    def __rtruediv__(self, other):
        return _ops.div(other, self)

    def __neg__(self):
        return _ops.neg(self)

    def __pow__(self, exponent: float):
        return _ops.power(self, exponent)

    def __matmul__(self, other):
        return _ops.matmul(self, other)

    def __rmatmul__(self, other):
        return _ops.matmul(other, self)

    def __getitem__(self, index):
        return _ops.getitem(self, index)

    # -- convenience reductions ----------------------------------------
    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return _ops.sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return _ops.mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return _ops.reshape(self, shape)

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return _ops.transpose(self, axes or None)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


def check_finite(x, where: str) -> None:
    """Raise :class:`NonFiniteError` if ``x`` holds NaN or Inf."""
    data = x.data if isinstance(x, Tensor) else np.asarray(x)
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(f"non-finite values at {where}")


@dataclass
class Node:
    inputs: tuple[Tensor, ...]
    output: Tensor
    vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]]
    op: str


class GradTape:
    """Append-only record of differentiable operations.

    Entering the tape makes it the recording target for the current thread;
    tapes nest, and the innermost one receives new nodes.
    """

    def __init__(self):
        self.nodes: list[Node] = []
        self._open = False

    def __enter__(self) -> "GradTape":
        self._open = True
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()
        else:  # pragma: no cover - misuse of nested tapes
            stack.remove(self)
        self._open = False

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, node: Node) -> None:
        if not self._open:
            raise ContractViolation("tape is closed; nodes may only be appended during a forward pass")
        self.nodes.append(node)

    def leaves(self) -> list[Tensor]:
        """Trainable leaves referenced by any recorded node, in first-use order."""
        seen: dict[int, Tensor] = {}
        for node in self.nodes:
            for t in node.inputs:
                if isinstance(t, Tensor) and t.requires_grad and t.is_leaf and id(t) not in seen:
                    seen[id(t)] = t
        return list(seen.values())


def record(out_data: np.ndarray, inputs: Iterable, vjp, op: str) -> Tensor:
    """Wrap ``out_data`` as a Tensor and log it on the active tape if needed."""
    out = Tensor.__new__(Tensor)
    out.data = out_data
    out.grad = None
    out.name = None
    out._leaf = True
    out.requires_grad = False
    tape = active_tape()
    if tape is not None:
        tracked = tuple(t for t in inputs if isinstance(t, Tensor))
        if any(t.requires_grad for t in tracked):
            out.requires_grad = True
            out._leaf = False
            tape.record(Node(tuple(inputs), out, vjp, op))
    return out


def backward(tape: GradTape, loss: Tensor, leaves: Sequence[Tensor] | None = None):
    """Propagate d(loss) back through ``tape``.

    Returns a dict mapping each trainable leaf to its gradient array; when
    ``leaves`` is given, the dict covers exactly those tensors and any leaf
    that did not contribute to ``loss`` receives zeros. Each leaf's ``.grad``
    is set as a side effect.
    """
    if loss.size != 1:
        raise ContractViolation(f"loss must be a scalar, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        in_grads = node.vjp(g)
        for t, gi in zip(node.inputs, in_grads):
            if gi is None or not isinstance(t, Tensor) or not t.requires_grad:
                continue
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
    targets = list(leaves) if leaves is not None else tape.leaves()
    if leaves is None and loss.is_leaf and loss.requires_grad:
        targets.append(loss)
    result = {}
    for t in targets:
        g = grads.get(id(t))
        g = np.zeros_like(t.data) if g is None else np.asarray(g, dtype=t.dtype).reshape(t.shape)
        t.grad = g
        result[t] = g
    return result


# Tensor is hashed by identity so it can key gradient dicts.
Tensor.__hash__ = object.__hash__  # type: ignore[assignment]
Tensor.__eq__ = lambda self, other: self is other  # type: ignore[assignment]

from memgate.numerics import ops as _ops  # noqa: E402  (operator dispatch)
