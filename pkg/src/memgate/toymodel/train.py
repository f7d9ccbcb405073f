"""Training and evaluation loop for the toy model."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from memgate.errors import ContractViolation, TrainingDivergedError
from memgate.numerics.tensor import GradTape, backward
from memgate.schedule import ScheduleSpec, alpha_at
from memgate.toymodel.checkpoint import load_checkpoint, save_checkpoint
from memgate.toymodel.model import ToyModel, cross_entropy
from memgate.toymodel.tasks import TaskSpec, gen_task

TRAJECTORY_COLUMNS = ("step", "loss", "alpha", "grad_norm")


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 2000
    batch_size: int = 16
    learning_rate: float = 3e-3
    grad_clip_norm: float = 1.0
    seed: int = 0
    schedule: ScheduleSpec = field(default_factory=ScheduleSpec)
    adam_betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8

    def __post_init__(self):
        if self.steps < 0 or self.batch_size < 1:
            raise ContractViolation("steps must be >= 0 and batch_size >= 1")
        # zero is allowed so a run can be replayed with frozen weights
        if not self.learning_rate >= 0:
            raise ContractViolation(f"learning_rate must be >= 0, got {self.learning_rate}")
        if not self.grad_clip_norm > 0:
            raise ContractViolation(f"grad_clip_norm must be > 0, got {self.grad_clip_norm}")


class Adam:
    """Adam with bias correction, keyed by parameter name."""

    def __init__(self, params: dict, lr: float, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.lr, self.betas, self.eps = lr, betas, eps
        self.t = 0
        self.m = {n: np.zeros_like(p.data) for n, p in params.items()}
        self.v = {n: np.zeros_like(p.data) for n, p in params.items()}

    def step(self, grads: dict[str, np.ndarray]) -> None:
        b1, b2 = self.betas
        self.t += 1
        c1, c2 = 1 - b1**self.t, 1 - b2**self.t
        for name, p in self.params.items():
            g = grads[name]
            m, v = self.m[name], self.v[name]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            p.data -= (self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.dtype)

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {f"adam.m.{n}": a for n, a in self.m.items()}
        out.update({f"adam.v.{n}": a for n, a in self.v.items()})
        return out

    def load_arrays(self, arrays: dict[str, np.ndarray], t: int) -> None:
        for n in self.params:
            self.m[n][...] = arrays[f"adam.m.{n}"]
            self.v[n][...] = arrays[f"adam.v.{n}"]
        self.t = t


@dataclass
class TrainResult:
    rows: list[dict] = field(default_factory=list)
    next_step: int = 0

    @property
    def losses(self) -> list[float]:
        return [r["loss"] for r in self.rows]


def batch_seed(seed: int, step: int) -> list[int]:
    return [seed, step]


def save_training_state(directory, model: ToyModel, opt: Adam, next_step: int, tcfg: TrainConfig) -> Path:
    tensors = dict(model.state_arrays())
    tensors.update(opt.state_arrays())
    meta = {"next_step": next_step, "adam_t": opt.t, "seed": tcfg.seed, "dtype": model.dtype.name}
    return save_checkpoint(directory, tensors, meta)


def load_training_state(directory, model: ToyModel, opt: Adam) -> int:
    tensors, meta = load_checkpoint(directory)
    model.load_arrays(tensors)
    opt.load_arrays(tensors, int(meta["adam_t"]))
    return int(meta["next_step"])


def _grad_norm(grads: dict[str, np.ndarray]) -> float:
    return math.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads.values()))


def train(
    model: ToyModel,
    task: TaskSpec,
    tcfg: TrainConfig,
    out_dir=None,
    checkpoint_every: int = 0,
    resume_from=None,
    on_step: Callable[[dict], None] | None = None,
) -> TrainResult:
    """Run ``tcfg.steps`` optimizer steps on fresh batches of ``task``.

    The batch at step ``s`` depends only on ``(tcfg.seed, s)`` and alpha on
    ``(tcfg.schedule, s)``, so a run resumed from a checkpoint replays the
    same trajectory. Checkpoints go to ``out_dir/ckpt-<step>`` every
    ``checkpoint_every`` steps and to ``out_dir/ckpt-final`` at the end.
    """
    if task.vocab > model.cfg.vocab_size:
        raise ContractViolation(f"task vocabulary {task.vocab} exceeds model vocabulary {model.cfg.vocab_size}")
    if task.seq_len > model.cfg.max_seq_len:
        raise ContractViolation(f"task length {task.seq_len} exceeds max_seq_len {model.cfg.max_seq_len}")
    opt = Adam(model.params, tcfg.learning_rate, tcfg.adam_betas, tcfg.adam_eps)
    start = load_training_state(resume_from, model, opt) if resume_from is not None else 0
    out_dir = Path(out_dir) if out_dir is not None else None
    result = TrainResult(next_step=start)
    names = list(model.params)
    params = [model.params[n] for n in names]

    for step in range(start, tcfg.steps):
        alpha = alpha_at(tcfg.schedule, step)
        batch = gen_task(task, seed=batch_seed(tcfg.seed, step), batch=tcfg.batch_size)
        with GradTape() as tape:
            loss = cross_entropy(model(batch.tokens, alpha=alpha), batch.targets, batch.mask)
        raw = backward(tape, loss, params)
        grads = {n: raw[p] for n, p in zip(names, params)}
        loss_value = float(loss.item())
        norm = _grad_norm(grads)
        if not (math.isfinite(loss_value) and math.isfinite(norm)):
            _diverged(step, alpha, loss_value, grads, out_dir)
        scale = min(1.0, tcfg.grad_clip_norm / (norm + 1e-6))
        if scale < 1.0:
            grads = {n: g * scale for n, g in grads.items()}
        opt.step(grads)
        row = {"step": step, "loss": loss_value, "alpha": alpha, "grad_norm": norm}
        result.rows.append(row)
        result.next_step = step + 1
        if on_step is not None:
            on_step(row)
        if out_dir is not None and checkpoint_every and (step + 1) % checkpoint_every == 0:
            save_training_state(out_dir / f"ckpt-{step + 1}", model, opt, step + 1, tcfg)

    if out_dir is not None:
        save_training_state(out_dir / "ckpt-final", model, opt, result.next_step, tcfg)
    return result


def _diverged(step, alpha, loss_value, grads, out_dir) -> None:
    diagnostics = {
        "step": step,
        "alpha": alpha,
        "loss": loss_value if math.isfinite(loss_value) else str(loss_value),
        "grad_norms": {n: str(float(np.linalg.norm(g))) for n, g in grads.items()},
    }
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / f"diverged-step{step}.json").write_text(json.dumps(diagnostics, indent=2))
    raise TrainingDivergedError(f"non-finite loss or gradient at step {step}", diagnostics)


def write_trajectory_csv(rows: list[dict], path) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=TRAJECTORY_COLUMNS)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: (repr(row[k]) if isinstance(row[k], float) else row[k]) for k in TRAJECTORY_COLUMNS})
    return path


def evaluate(model: ToyModel, task: TaskSpec, n_samples: int = 1000, seed: int = 12345,
             alpha: float | None = None, batch_size: int = 250) -> float:
    """Fraction of scored positions where the argmax logit equals the target.

    Samples are drawn from seeds disjoint from the training stream.
    """
    correct = total = 0.0
    done, i = 0, 0
    while done < n_samples:
        n = min(batch_size, n_samples - done)
        batch = gen_task(task, seed=[seed, 1, i], batch=n)
        logits = model(batch.tokens, alpha=alpha).data
        hit = (logits.argmax(axis=-1) == batch.targets) * batch.mask
        correct += float(hit.sum())
        total += float(batch.mask.sum())
        done += n
        i += 1
    return correct / total
