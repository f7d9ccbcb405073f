"""Differentiable primitives over :class:`~memgate.numerics.tensor.Tensor`.

Every function accepts Tensors or array-likes (treated as constants) and
returns a Tensor. Binary ops broadcast numpy-style; gradients are summed
back to each operand's shape.
"""

from __future__ import annotations

import math

import numpy as np

from memgate.errors import DimensionError
from memgate.numerics.tensor import Tensor, record

GELU_C = math.sqrt(2.0 / math.pi)
GELU_A = 0.044715


def _data(x, like: np.ndarray | None = None) -> np.ndarray:
    if isinstance(x, Tensor):
        return x.data
    if like is not None:
        return np.asarray(x, dtype=like.dtype)
    return np.asarray(x)


def _pick_dtype(a, b) -> np.ndarray | None:
    for x in (a, b):
        if isinstance(x, Tensor):
            return x.data
    return None


def unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (undoing numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _binary(a, b, fn, op: str):
    like = _pick_dtype(a, b)
    ad, bd = _data(a, like), _data(b, like)
    try:
        return ad, bd, fn(ad, bd)
    except ValueError as exc:
        raise DimensionError(f"{op}: shapes {ad.shape} and {bd.shape} do not broadcast") from exc


# -- arithmetic ----------------------------------------------------------

def add(a, b) -> Tensor:
    ad, bd, out = _binary(a, b, np.add, "add")
    return record(out, (a, b), lambda g: (unbroadcast(g, ad.shape), unbroadcast(g, bd.shape)), "add")


def sub(a, b) -> Tensor:
    ad, bd, out = _binary(a, b, np.subtract, "sub")
    return record(out, (a, b), lambda g: (unbroadcast(g, ad.shape), unbroadcast(-g, bd.shape)), "sub")


def mul(a, b) -> Tensor:
    ad, bd, out = _binary(a, b, np.multiply, "mul")
    return record(
        out, (a, b), lambda g: (unbroadcast(g * bd, ad.shape), unbroadcast(g * ad, bd.shape)), "mul"
    )


def div(a, b) -> Tensor:
    ad, bd, out = _binary(a, b, np.divide, "div")

    def vjp(g):
        ga = g / bd
        return unbroadcast(ga, ad.shape), unbroadcast(-ga * out, bd.shape)

    return record(out, (a, b), vjp, "div")


def scale(x, c: float) -> Tensor:
    return mul(x, c)


def neg(x) -> Tensor:
    return record(-_data(x), (x,), lambda g: (-g,), "neg")


def power(x, p: float) -> Tensor:
    xd = _data(x)
    out = xd**p
    return record(out, (x,), lambda g: (g * p * xd ** (p - 1),), "pow")


def matmul(a, b) -> Tensor:
    """Matrix product over the trailing two axes, batch axes broadcast."""
    like = _pick_dtype(a, b)
    ad, bd = _data(a, like), _data(b, like)
    if ad.ndim < 2 or bd.ndim < 2:
        raise DimensionError(f"matmul needs >=2-D operands, got {ad.shape} and {bd.shape}")
    if ad.shape[-1] != bd.shape[-2]:
        raise DimensionError(f"matmul inner dimensions differ: {ad.shape} @ {bd.shape}")
    try:
        out = np.matmul(ad, bd)
    except ValueError as exc:
        raise DimensionError(f"matmul batch dims do not broadcast: {ad.shape} @ {bd.shape}") from exc

    def vjp(g):
        ga = unbroadcast(np.matmul(g, np.swapaxes(bd, -1, -2)), ad.shape)
        gb = unbroadcast(np.matmul(np.swapaxes(ad, -1, -2), g), bd.shape)
        return ga, gb

    return record(out, (a, b), vjp, "matmul")


# -- elementwise nonlinearities -----------------------------------------

def exp(x) -> Tensor:
    out = np.exp(_data(x))
    return record(out, (x,), lambda g: (g * out,), "exp")


def log(x) -> Tensor:
    xd = _data(x)
    return record(np.log(xd), (x,), lambda g: (g / xd,), "log")


def sqrt(x) -> Tensor:
    out = np.sqrt(_data(x))
    return record(out, (x,), lambda g: (g * 0.5 / out,), "sqrt")


def tanh(x) -> Tensor:
    out = np.tanh(_data(x))
    return record(out, (x,), lambda g: (g * (1 - out * out),), "tanh")


def _sigmoid(xd: np.ndarray) -> np.ndarray:
    # tanh form is overflow-free and gives sigmoid(x) + sigmoid(-x) == 1 to rounding
    return 0.5 * (1.0 + np.tanh(0.5 * xd))


def sigmoid(x) -> Tensor:
    out = _sigmoid(_data(x))
    return record(out, (x,), lambda g: (g * out * (1 - out),), "sigmoid")


def silu(x) -> Tensor:
    xd = _data(x)
    s = _sigmoid(xd)
    out = xd * s
    return record(out, (x,), lambda g: (g * (s + xd * s * (1 - s)),), "silu")


def gelu(x) -> Tensor:
    """GELU, tanh approximation: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))."""
    xd = _data(x)
    inner = GELU_C * (xd + GELU_A * xd**3)
    t = np.tanh(inner)
    out = 0.5 * xd * (1 + t)

    def vjp(g):
        d_inner = GELU_C * (1 + 3 * GELU_A * xd * xd)
        return (g * (0.5 * (1 + t) + 0.5 * xd * (1 - t * t) * d_inner),)

    return record(out, (x,), vjp, "gelu")


def relu(x) -> Tensor:
    xd = _data(x)
    mask = xd > 0
    return record(xd * mask, (x,), lambda g: (g * mask,), "relu")


# -- reductions and normalizers -----------------------------------------

def _expand_reduced(g: np.ndarray, shape, axis, keepdims: bool) -> np.ndarray:
    if axis is None:
        return np.broadcast_to(np.reshape(g, (1,) * len(shape)), shape)
    if not keepdims:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        axes = tuple(a % len(shape) for a in axes)
        g = np.expand_dims(g, axes)
    return np.broadcast_to(g, shape)


def sum(x, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    xd = _data(x)
    out = np.sum(xd, axis=axis, keepdims=keepdims)
    out = np.asarray(out, dtype=xd.dtype)
    return record(out, (x,), lambda g: (_expand_reduced(g, xd.shape, axis, keepdims),), "sum")


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    xd = _data(x)
    if axis is None:
        count = xd.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = int(np.prod([xd.shape[a] for a in axes]))
    out = np.asarray(np.mean(xd, axis=axis, keepdims=keepdims), dtype=xd.dtype)
    return record(
        out, (x,), lambda g: (_expand_reduced(g, xd.shape, axis, keepdims) / count,), "mean"
    )


def cumsum(x, axis: int) -> Tensor:
    out = np.cumsum(_data(x), axis=axis)

    def vjp(g):
        return (np.flip(np.cumsum(np.flip(g, axis), axis=axis), axis),)

    return record(out, (x,), vjp, "cumsum")


def softmax(x, axis: int = -1) -> Tensor:
    xd = _data(x)
    z = np.exp(xd - np.max(xd, axis=axis, keepdims=True))
    out = z / np.sum(z, axis=axis, keepdims=True)

    def vjp(g):
        return (out * (g - np.sum(g * out, axis=axis, keepdims=True)),)

    return record(out, (x,), vjp, "softmax")


def log_softmax(x, axis: int = -1) -> Tensor:
    xd = _data(x)
    shifted = xd - np.max(xd, axis=axis, keepdims=True)
    lse = np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True))
    out = shifted - lse

    def vjp(g):
        return (g - np.exp(out) * np.sum(g, axis=axis, keepdims=True),)

    return record(out, (x,), vjp, "log_softmax")


# -- shape manipulation ---------------------------------------------------

def reshape(x, shape) -> Tensor:
    xd = _data(x)
    try:
        out = xd.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"cannot reshape {xd.shape} to {shape}") from exc
    return record(out, (x,), lambda g: (g.reshape(xd.shape),), "reshape")


def transpose(x, axes=None) -> Tensor:
    xd = _data(x)
    out = np.transpose(xd, axes)
    inv = None if axes is None else np.argsort(axes)
    return record(out, (x,), lambda g: (np.transpose(g, inv),), "transpose")


def swapaxes(x, a: int, b: int) -> Tensor:
    out = np.swapaxes(_data(x), a, b)
    return record(out, (x,), lambda g: (np.swapaxes(g, a, b),), "swapaxes")


def _is_advanced(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return any(isinstance(i, (list, np.ndarray, Tensor)) for i in items)


def getitem(x, index) -> Tensor:
    xd = _data(x)
    if isinstance(index, Tensor):
        index = index.data
    out = xd[index]
    advanced = _is_advanced(index)

    def vjp(g):
        full = np.zeros_like(xd)
        if advanced:
            np.add.at(full, index, g)
        else:
            full[index] += g
        return (full,)

    if out.ndim and not out.flags.c_contiguous:
        out = np.ascontiguousarray(out)
    return record(out, (x,), vjp, "getitem")


def concat(tensors, axis: int = 0) -> Tensor:
    like = _pick_dtype(*tensors[:2]) if len(tensors) > 1 else _data(tensors[0])
    datas = [_data(t, like) for t in tensors]
    try:
        out = np.concatenate(datas, axis=axis)
    except ValueError as exc:
        raise DimensionError(f"concat: incompatible shapes {[d.shape for d in datas]}") from exc
    splits = np.cumsum([d.shape[axis] for d in datas])[:-1]
    return record(out, tuple(tensors), lambda g: tuple(np.split(g, splits, axis=axis)), "concat")


def stack(tensors, axis: int = 0) -> Tensor:
    like = _pick_dtype(*tensors[:2]) if len(tensors) > 1 else _data(tensors[0])
    datas = [_data(t, like) for t in tensors]
    try:
        out = np.stack(datas, axis=axis)
    except ValueError as exc:
        raise DimensionError(f"stack: incompatible shapes {[d.shape for d in datas]}") from exc
    n = len(datas)

    def vjp(g):
        return tuple(np.take(g, i, axis=axis) for i in range(n))

    return record(out, tuple(tensors), vjp, "stack")


def embedding(weight, ids) -> Tensor:
    """Row lookup ``weight[ids]`` with scatter-add gradient."""
    wd = _data(weight)
    ids = np.asarray(ids)
    out = wd[ids]

    def vjp(g):
        full = np.zeros_like(wd)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, wd.shape[-1]))
        return (full,)

    return record(out, (weight,), vjp, "embedding")


def take_last(x, idx) -> Tensor:
    """Gather ``x[..., idx[...]]`` along the trailing axis."""
    xd = _data(x)
    idx = np.asarray(idx)[..., None]
    out = np.take_along_axis(xd, idx, axis=-1)[..., 0]

    def vjp(g):
        full = np.zeros_like(xd)
        np.put_along_axis(full, idx, g[..., None], axis=-1)
        return (full,)

    return record(out, (x,), vjp, "take_last")
