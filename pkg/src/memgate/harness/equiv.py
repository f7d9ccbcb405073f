"""Equivalence suites: chunked vs. sequential memory, cached vs. full decoding,
mixing endpoints and causality."""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from memgate.attention import (
    AttentionConfig,
    LiZAttention,
    MagConfig,
    linear_branch,
    merge_heads,
    project_qkv,
    softmax_attention,
)
from memgate.expansion import ExpansionSpec
from memgate.memory import ChunkSpec, MemoryState, chunkwise_update, delta_sequential_scan

TOLERANCE = {"float32": 1e-5, "float64": 1e-10}
SUITES = ("chunkwise", "incremental", "endpoint", "causality")

# one representative per axis of the variant table: beta source, mixing, n_h, expansion, nonlinearity
ATTENTION_VARIANTS = (
    dict(source="k", mixing="gated", n_h=1, mode="derivative", nonlin="none"),
    dict(source="k", mixing="gated", n_h=1, mode="derivative", nonlin="gelu"),
    dict(source="v", mixing="gated", n_h=1, mode="derivative", nonlin="none"),
    dict(source="kv", mixing="gated", n_h=1, mode="derivative", nonlin="none"),
    dict(source="k", mixing="gated", n_h=2, mode="derivative", nonlin="none"),
    dict(source="k", mixing="gated", n_h=2, mode="rotary", nonlin="none"),
    dict(source="k", mixing="gated", n_h=2, mode="both", nonlin="none"),
    dict(source="k", mixing="cross_gate", n_h=2, mode="derivative", nonlin="none"),
)


@dataclass(frozen=True)
class CaseResult:
    suite: str
    case: str
    max_abs_diff: float
    tolerance: float
    passed: bool

    def as_row(self) -> dict:
        return {
            "suite": self.suite,
            "case": self.case,
            "max_abs_diff": repr(self.max_abs_diff),
            "tolerance": repr(self.tolerance),
            "passed": int(self.passed),
        }


def random_memory_inputs(rng: np.random.Generator, rows: int, d: int, dtype):
    """Unit-norm q, k, v rows and gates in [0, 1], the ranges the linear branch produces."""
    q, k, v = (rng.standard_normal((rows, d)) for _ in range(3))
    q, k, v = (x / np.linalg.norm(x, axis=-1, keepdims=True) for x in (q, k, v))
    beta = rng.uniform(0.0, 1.0, rows)
    return tuple(np.asarray(a, dtype=dtype) for a in (q, k, v, beta))


def chunkwise_case(t: int, d: int, c: int, n_h: int, dtype: str, seed: int, tril_sign: float = 1.0) -> CaseResult:
    """Chunked update against the row-by-row scan: final state and every readout."""
    rng = np.random.default_rng([seed, t, d, c, n_h])
    q, k, v, beta = random_memory_inputs(rng, t * n_h, d, dtype)
    spec = ChunkSpec(c, n_h)
    state = MemoryState.zeros(d, d, dtype=dtype)
    fast = chunkwise_update(k, v, beta, state, spec, queries=q, tril_sign=tril_sign)
    slow = delta_sequential_scan(k, v, beta, state, queries=q, spec=spec)
    diff = float(np.max(np.abs(fast.state.s.data - slow.state.s.data)))
    if t:
        diff = max(diff, float(np.max(np.abs(fast.outputs.data - slow.outputs.data))))
    tol = TOLERANCE[dtype]
    return CaseResult("chunkwise", f"T={t} d={d} C={c} n_h={n_h} {dtype}", diff, tol, diff < tol)


def _attention_cfg(d_model, n_heads, chunk, variant, alpha=0.5) -> AttentionConfig:
    return AttentionConfig(
        d_model,
        n_heads,
        ChunkSpec(chunk, variant["n_h"], variant["nonlin"]),
        ExpansionSpec(variant["mode"], variant["n_h"]),
        MagConfig(alpha, variant["mixing"]),
        beta_source=variant["source"],
    )


def _label(variant) -> str:
    return " ".join(f"{k}={v}" for k, v in variant.items())


def incremental_case(variant: dict, t: int, seed: int, tol: float = 1e-5) -> CaseResult:
    cfg = _attention_cfg(16, 2, 4, variant)
    layer = LiZAttention(cfg, seed, np.float32)
    x = np.random.default_rng(seed).standard_normal((2, t, 16)).astype(np.float32)
    full = layer(x).data
    cache = layer.new_cache(2)
    sizes, outs = set(), []
    for i in range(t):
        outs.append(layer.decode_step(x[:, i : i + 1], cache).data)
        sizes.add(cache.linear_nbytes)
    diff = float(np.max(np.abs(np.concatenate(outs, axis=1) - full)))
    ok = diff < tol and len(sizes) == 1
    return CaseResult("incremental", f"T={t} {_label(variant)} const_cache={len(sizes) == 1}", diff, tol, ok)


def endpoint_cases(variant: dict, t: int, seed: int, tol: float = 1e-6) -> list[CaseResult]:
    cfg = _attention_cfg(16, 2, 4, variant)
    layer = LiZAttention(cfg, seed, np.float64)
    p = layer.params
    x = np.random.default_rng(seed).standard_normal((2, t, 16))
    q, k, v = project_qkv(x, p["w_q"], p["w_k"], p["w_v"], 2)
    base = merge_heads(softmax_attention(q, k, v)).data @ p["w_o"].data
    lin = merge_heads(linear_branch(q, k, v, cfg, p["norm_gain"])).data @ p["w_o"].data
    out = []
    for alpha, ref in ((0.0, base), (1.0, lin)):
        # the cached path evaluates both branches, so the mix itself is exercised
        got = layer(x, cache=layer.new_cache(2), alpha=alpha).data
        diff = float(np.max(np.abs(got - ref)))
        out.append(CaseResult("endpoint", f"alpha={alpha:g} {_label(variant)}", diff, tol, diff < tol))
    return out


def causality_case(variant: dict, t: int, seed: int) -> CaseResult:
    layer = LiZAttention(_attention_cfg(16, 2, 3, variant), seed, np.float64)
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((1, t, 16))
    base = layer(x).data
    worst = 0.0
    for pos in range(t):
        bumped = x.copy()
        bumped[:, pos] += rng.standard_normal(16)
        worst = max(worst, float(np.max(np.abs(layer(bumped).data[:, :pos] - base[:, :pos]), initial=0.0)))
    return CaseResult("causality", f"T={t} {_label(variant)}", worst, 0.0, worst == 0.0)


def sweep_chunkwise(ts, ds, cs, n_hs, dtypes, seed: int, tril_sign: float = 1.0) -> list[CaseResult]:
    """``cs`` entries may be the string "T" for one chunk spanning the whole sequence."""
    results = []
    for t, d, c, n_h, dtype in itertools.product(ts, ds, cs, n_hs, dtypes):
        size = max(t, 1) if c == "T" else int(c)
        results.append(chunkwise_case(t, d, size, n_h, dtype, seed, tril_sign))
    return results


def run_suites(cfg: dict) -> list[CaseResult]:
    seed = cfg["seed"]
    sign = -1.0 if cfg["inject_sign_flip"] else 1.0
    if cfg["T"] is not None or cfg["C"] is not None or cfg["n_h"] is not None:
        t = cfg["T"] if cfg["T"] is not None else 64
        c = cfg["C"] if cfg["C"] is not None else 8
        n_h = cfg["n_h"] if cfg["n_h"] is not None else 1
        return [chunkwise_case(t, cfg["d"], c, n_h, cfg["dtypes"][0], seed, sign)]
    results = []
    suites = cfg["suites"]
    unknown = set(suites) - set(SUITES)
    if unknown:
        raise ValueError(f"unknown suites: {sorted(unknown)}")
    if "chunkwise" in suites:
        results += sweep_chunkwise(cfg["sweep_T"], cfg["sweep_d"], cfg["sweep_C"], cfg["sweep_nh"],
                                   cfg["dtypes"], seed, sign)
    for variant in ATTENTION_VARIANTS:
        if "incremental" in suites:
            results.append(incremental_case(variant, cfg["decode_T"], seed))
        if "endpoint" in suites:
            results += endpoint_cases(variant, 9, seed)
        if "causality" in suites:
            results.append(causality_case(variant, 10, seed))
    return results
