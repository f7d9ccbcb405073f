"""Wall-time scaling of the two branches, isolated through the mixing endpoints."""

from __future__ import annotations

import statistics
import time

import numpy as np

from memgate.attention import AttentionConfig, LiZAttention, MagConfig
from memgate.expansion import ExpansionSpec
from memgate.memory import ChunkSpec

BRANCH_ALPHA = {"softmax": 0.0, "linear": 1.0}


def bench_layer(d_head: int, n_heads: int, chunk: int, n_h: int, seed: int, dtype) -> LiZAttention:
    cfg = AttentionConfig(
        d_head * n_heads, n_heads, ChunkSpec(chunk, n_h), ExpansionSpec("derivative", n_h), MagConfig(0.5)
    )
    return LiZAttention(cfg, seed, dtype)


def time_forward(layer: LiZAttention, x: np.ndarray, alpha: float, warmup: int, reps: int) -> float:
    for _ in range(warmup):
        layer(x, alpha=alpha)
    times = []
    for _ in range(reps):
        start = time.perf_counter()
        layer(x, alpha=alpha)
        times.append(time.perf_counter() - start)
    return statistics.median(times)


def state_bytes(layer: LiZAttention, x: np.ndarray, branch: str) -> int:
    """Bytes a decoding cache holds for ``branch`` after consuming ``x``."""
    cache = layer.new_cache(x.shape[0])
    layer(x, cache=cache)
    return cache.softmax_nbytes if branch == "softmax" else cache.linear_nbytes


def run_bench(ts, branches, d_head=32, n_heads=1, batch=1, chunk=64, n_h=1, warmup=1, reps=3, seed=0,
              dtype=np.float32, measure_state=True) -> list[dict]:
    layer = bench_layer(d_head, n_heads, chunk, n_h, seed, dtype)
    rng = np.random.default_rng(seed)
    rows = []
    for t in sorted(ts):
        x = rng.standard_normal((batch, t, layer.cfg.d_model)).astype(dtype)
        for branch in branches:
            wall = time_forward(layer, x, BRANCH_ALPHA[branch], warmup, reps)
            nbytes = state_bytes(layer, x, branch) if measure_state else -1
            rows.append({"T": t, "branch": branch, "wall_time": wall, "peak_state_bytes": nbytes})
    rows.sort(key=lambda r: (r["branch"], r["T"]))
    return rows


def loglog_slope(rows: list[dict], branch: str) -> float:
    pts = [(r["T"], r["wall_time"]) for r in rows if r["branch"] == branch]
    if len(pts) < 2:
        return float("nan")
    t, w = np.log([p[0] for p in pts]), np.log([p[1] for p in pts])
    return float(np.polyfit(t, w, 1)[0])
