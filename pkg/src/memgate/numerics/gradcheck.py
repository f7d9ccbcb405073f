"""Central finite-difference checks for tape gradients."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from memgate.numerics.tensor import GradTape, Tensor, backward


def numerical_grad(fn: Callable[[], Tensor], x: Tensor, h: float = 1e-3, entries=None) -> np.ndarray:
    """Central differences of scalar ``fn()`` w.r.t. ``x``, perturbing ``x.data`` in place.

    Only flat indices in ``entries`` are probed (all of them when None);
    the rest of the returned array is NaN.
    """
    flat = x.data.reshape(-1)
    out = np.full(flat.shape, np.nan)
    idx = range(flat.size) if entries is None else entries
    for i in idx:
        old = flat[i]
        flat[i] = old + h
        fp = fn().item()
        flat[i] = old - h
        fm = fn().item()
        flat[i] = old
        out[i] = (fp - fm) / (2 * h)
    return out.reshape(x.shape)


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-12) -> float:
    """Norm-wise relative error ||a - b|| / max(||a||, ||b||, floor)."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    denom = max(np.linalg.norm(a), np.linalg.norm(b), floor)
    return float(np.linalg.norm(a - b) / denom)


def gradcheck(
    fn: Callable[[], Tensor],
    params: Sequence[Tensor],
    h: float = 1e-3,
    max_entries: int | None = None,
    seed: int = 0,
) -> dict[str, float]:
    """Compare autodiff and central differences for every tensor in ``params``.

    Returns the relative error per parameter (keyed by name or position).
    ``max_entries`` caps how many entries of each tensor are probed.
    """
    with GradTape() as tape:
        loss = fn()
    grads = backward(tape, loss, params)
    rng = np.random.default_rng(seed)
    errors = {}
    for pos, p in enumerate(params):
        entries = None
        if max_entries is not None and p.size > max_entries:
            entries = np.sort(rng.choice(p.size, size=max_entries, replace=False))
        fd = numerical_grad(fn, p, h=h, entries=entries)
        ad = grads[p]
        if entries is not None:
            fd, ad = fd.reshape(-1)[entries], ad.reshape(-1)[entries]
        errors[p.name or str(pos)] = relative_error(ad, fd)
    return errors
