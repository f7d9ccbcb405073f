"""``memgate`` command line: equiv, bench, train and schedule subcommands.

Each subcommand writes ``<command>-<timestamp>.csv`` and a matching
``.manifest.json`` (resolved config, seed, package version) into ``--out``.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import sys
from datetime import datetime
from pathlib import Path

import numpy as np

from memgate import __version__
from memgate.attention import AttentionConfig, MagConfig
from memgate.errors import MemgateError, TrainingDivergedError
from memgate.expansion import ExpansionSpec
from memgate.harness import bench as bench_mod
from memgate.harness import equiv as equiv_mod
from memgate.harness.config import (
    ConfigError,
    Key,
    Schema,
    describe,
    float_list,
    int_list,
    parse_bool,
    read_config_file,
    resolve,
    str_list,
)
from memgate.memory import ChunkSpec
from memgate.schedule import ScheduleSpec, schedule_rows
from memgate.toymodel import ModelConfig, TaskSpec, TrainConfig, build_model, evaluate, train


def _opt_int(text: str) -> int | None:
    return None if text.strip().lower() in ("", "none") else int(text)


def _sweep_c(text: str) -> tuple:
    return tuple(t if t == "T" else int(t) for t in str_list(text))


COMMON: Schema = {"seed": Key(int, 0, "random seed")}

SCHEDULE_KEYS: Schema = {
    "schedule": Key(str, "constant", "alpha schedule: constant, gradual or cyclic"),
    "alpha": Key(float, 0.5, "constant alpha"),
    "alpha_start": Key(float, 0.01, "gradual: first alpha"),
    "alpha_target": Key(float, 0.5, "gradual: final alpha"),
    "ramp_steps": Key(int, 100, "gradual: steps to reach the target"),
    "cycle_values": Key(float_list, (0.0, 0.5, 1.0), "cyclic: alpha values"),
    "cycle_period": Key(int, 100, "cyclic: steps spent on each value"),
}

SCHEMAS: dict[str, Schema] = {
    "equiv": {
        **COMMON,
        "T": Key(_opt_int, None, "single case: sequence length"),
        "C": Key(_opt_int, None, "single case: chunk size"),
        "n_h": Key(_opt_int, None, "single case: updates per token"),
        "d": Key(int, 8, "single case: head dimension"),
        "sweep_T": Key(int_list, (1, 7, 16, 64, 256), "sweep: sequence lengths"),
        "sweep_d": Key(int_list, (1, 8, 32), "sweep: head dimensions"),
        "sweep_C": Key(_sweep_c, (1, 3, 8, "T"), "sweep: chunk sizes (T = whole sequence)"),
        "sweep_nh": Key(int_list, (1, 2, 3), "sweep: updates per token"),
        "dtypes": Key(str_list, ("float32", "float64"), "precisions to check"),
        "decode_T": Key(int, 64, "tokens decoded in the incremental suite"),
        "suites": Key(str_list, equiv_mod.SUITES, "suites to run"),
        "inject_sign_flip": Key(parse_bool, False, "flip the triangular term (mutation check)"),
    },
    "bench": {
        **COMMON,
        "T_values": Key(int_list, (1024, 2048, 4096, 8192, 16384), "sequence lengths"),
        "branches": Key(str_list, ("softmax", "linear"), "branches to time"),
        "d_head": Key(int, 32, "head dimension"),
        "n_heads": Key(int, 1, "heads"),
        "batch": Key(int, 1, "batch size"),
        "chunk": Key(int, 64, "chunk size in tokens"),
        "n_h": Key(int, 1, "updates per token"),
        "warmup": Key(int, 1, "untimed warmup runs"),
        "reps": Key(int, 3, "timed runs (median reported)"),
        "dtype": Key(str, "float32", "float32 or float64"),
        "check": Key(parse_bool, False, "fail unless slopes fall in the expected ranges"),
    },
    "train": {
        **COMMON,
        **SCHEDULE_KEYS,
        "task": Key(str, "copy", "parity, assoc_recall or copy"),
        "length": Key(int, 16, "task length"),
        "dense": Key(parse_bool, False, "parity: score every prefix"),
        "vocab_size": Key(_opt_int, None, "vocabulary (default: the task's)"),
        "d_model": Key(int, 64, "model width"),
        "n_layers": Key(int, 2, "blocks"),
        "n_heads": Key(int, 2, "heads"),
        "mlp_hidden": Key(int, 128, "MLP hidden width"),
        "max_seq_len": Key(int, 64, "longest sequence"),
        "n_h": Key(int, 1, "updates per token"),
        "expansion": Key(str, "derivative", "derivative, rotary or both"),
        "chunk": Key(int, 16, "chunk size in tokens"),
        "nonlinearity": Key(str, "none", "state nonlinearity at chunk ends"),
        "beta_source": Key(str, "k", "k, v or kv"),
        "mixing": Key(str, "gated", "gated or cross_gate"),
        "share_projections": Key(parse_bool, True, "reuse q/k/v projections in both branches"),
        "steps": Key(int, 200, "optimizer steps"),
        "batch_size": Key(int, 16, "sequences per step"),
        "learning_rate": Key(float, 3e-3, "Adam step size"),
        "grad_clip_norm": Key(float, 1.0, "global gradient norm cap"),
        "checkpoint_every": Key(int, 0, "steps between checkpoints (0 = final only)"),
        "resume": Key(str, "", "checkpoint directory to resume from"),
        "eval_samples": Key(int, 200, "held-out samples per evaluated length"),
        "eval_lengths": Key(int_list, (), "extra task lengths to evaluate"),
    },
    "schedule": {
        **COMMON,
        **SCHEDULE_KEYS,
        "start_step": Key(int, 0, "first step"),
        "steps": Key(int, 300, "number of steps to dump"),
    },
}

SHORT_FLAGS = {"equiv": {"T": ["-T"], "C": ["-C"], "n_h": ["-nh"], "d": ["-d"]}}


def schedule_spec(cfg: dict) -> ScheduleSpec:
    return ScheduleSpec(
        kind=cfg["schedule"],
        constant_value=cfg["alpha"],
        start_value=cfg["alpha_start"],
        target_value=cfg["alpha_target"],
        ramp_steps=cfg["ramp_steps"],
        cycle_values=tuple(cfg["cycle_values"]),
        cycle_period=cfg["cycle_period"],
    )


def _write_outputs(command: str, cfg: dict, rows: list[dict], columns, out: Path, extra=None) -> Path:
    out.mkdir(parents=True, exist_ok=True)
    stamp = datetime.now().strftime("%Y%m%d-%H%M%S-%f")
    csv_path = out / f"{command}-{stamp}.csv"
    with csv_path.open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(columns))
        writer.writeheader()
        for row in rows:
            writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
    manifest = {
        "command": command,
        "version": __version__,
        "seed": cfg["seed"],
        "created": stamp,
        "csv": csv_path.name,
        "config": {k: list(v) if isinstance(v, tuple) else v for k, v in cfg.items()},
    }
    manifest.update(extra or {})
    csv_path.with_suffix(".manifest.json").write_text(json.dumps(manifest, indent=2, default=str) + "\n")
    return csv_path


def cmd_equiv(cfg: dict, out: Path) -> int:
    results = equiv_mod.run_suites(cfg)
    rows = [r.as_row() for r in results]
    path = _write_outputs("equiv", cfg, rows, ("suite", "case", "max_abs_diff", "tolerance", "passed"), out)
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'}  {r.suite:<11} {r.case:<60} diff={r.max_abs_diff:.3e} tol={r.tolerance:g}")
    failed = sum(not r.passed for r in results)
    print(f"{len(results) - failed}/{len(results)} cases passed; results in {path}")
    return 1 if failed else 0


def cmd_bench(cfg: dict, out: Path) -> int:
    dtype = {"float32": np.float32, "float64": np.float64}[cfg["dtype"]]
    rows = bench_mod.run_bench(
        cfg["T_values"], cfg["branches"], cfg["d_head"], cfg["n_heads"], cfg["batch"], cfg["chunk"],
        cfg["n_h"], cfg["warmup"], cfg["reps"], cfg["seed"], dtype,
    )
    slopes = {b: bench_mod.loglog_slope(rows, b) for b in cfg["branches"]}
    path = _write_outputs("bench", cfg, rows, ("T", "branch", "wall_time", "peak_state_bytes"), out,
                          {"loglog_slopes": slopes})
    for r in rows:
        print(f"{r['branch']:<8} T={r['T']:<6} wall={r['wall_time']:.4f}s state_bytes={r['peak_state_bytes']}")
    for b, s in slopes.items():
        print(f"{b} log-log slope: {s:.3f}")
    print(f"results in {path}")
    if cfg["check"]:
        ranges = {"softmax": (1.7, 2.3), "linear": (0.8, 1.3)}
        ok = all(lo <= slopes[b] <= hi for b, (lo, hi) in ranges.items() if b in slopes)
        lin = {r["peak_state_bytes"] for r in rows if r["branch"] == "linear"}
        return 0 if ok and len(lin) <= 1 else 1
    return 0


def build_from_config(cfg: dict):
    task = TaskSpec(cfg["task"], cfg["length"], cfg["vocab_size"], cfg["dense"])
    att = AttentionConfig(
        cfg["d_model"],
        cfg["n_heads"],
        ChunkSpec(cfg["chunk"], cfg["n_h"], cfg["nonlinearity"]),
        ExpansionSpec(cfg["expansion"], cfg["n_h"]),
        MagConfig(0.5, cfg["mixing"]),
        share_projections=cfg["share_projections"],
        beta_source=cfg["beta_source"],
    )
    mcfg = ModelConfig(task.vocab, cfg["d_model"], cfg["n_layers"], cfg["n_heads"], cfg["max_seq_len"], att,
                       cfg["mlp_hidden"])
    tcfg = TrainConfig(cfg["steps"], cfg["batch_size"], cfg["learning_rate"], cfg["grad_clip_norm"], cfg["seed"],
                       schedule_spec(cfg))
    return task, mcfg, tcfg


def cmd_train(cfg: dict, out: Path) -> int:
    task, mcfg, tcfg = build_from_config(cfg)
    model = build_model(mcfg, cfg["seed"])
    stamp = datetime.now().strftime("%Y%m%d-%H%M%S-%f")
    run_dir = out / f"train-{stamp}-ckpt"
    try:
        result = train(model, task, tcfg, out_dir=run_dir, checkpoint_every=cfg["checkpoint_every"],
                       resume_from=cfg["resume"] or None)
    except TrainingDivergedError as err:
        print(f"training diverged: {err}", file=sys.stderr)
        print(json.dumps(err.diagnostics, indent=2), file=sys.stderr)
        return 3
    final_alpha = result.rows[-1]["alpha"] if result.rows else None
    metrics = {"final_loss": result.rows[-1]["loss"] if result.rows else None, "checkpoint": str(run_dir)}
    for length in (task.length,) + tuple(cfg["eval_lengths"]):
        spec = TaskSpec(task.kind, length, task.vocab_size)
        if spec.seq_len <= mcfg.max_seq_len:
            metrics[f"accuracy_len{length}"] = evaluate(model, spec, cfg["eval_samples"], alpha=final_alpha)
    path = _write_outputs("train", cfg, result.rows, ("step", "loss", "alpha", "grad_norm"), out,
                          {"metrics": metrics})
    for key, value in metrics.items():
        print(f"{key}: {value}")
    print(f"trajectory in {path}")
    return 0


def cmd_schedule(cfg: dict, out: Path) -> int:
    spec = schedule_spec(cfg)
    steps = range(cfg["start_step"], cfg["start_step"] + cfg["steps"])
    rows = [{"step": s, "alpha": a} for s, a in schedule_rows(spec, steps)]
    path = _write_outputs("schedule", cfg, rows, ("step", "alpha"), out)
    print(f"{len(rows)} rows written to {path}")
    return 0


COMMANDS = {"equiv": cmd_equiv, "bench": cmd_bench, "train": cmd_train, "schedule": cmd_schedule}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="memgate", description="Memory-gated attention toolkit.")
    parser.add_argument("--version", action="version", version=f"memgate {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, schema in SCHEMAS.items():
        p = sub.add_parser(name, help=COMMANDS[name].__doc__ or name,
                           epilog="config keys:\n" + describe(schema),
                           formatter_class=argparse.RawDescriptionHelpFormatter)
        p.add_argument("--config", type=Path, help="key = value configuration file")
        p.add_argument("--out", type=Path, default=Path("memgate-runs"), help="output directory")
        for key, spec in schema.items():
            flags = SHORT_FLAGS.get(name, {}).get(key, []) + ["--" + key.replace("_", "-")]
            if spec.parse is parse_bool:
                p.add_argument(*flags, dest=key, nargs="?", const="true", default=None)
            else:
                p.add_argument(*flags, dest=key, default=None)
    return parser


cmd_equiv.__doc__ = "chunkwise/sequential, incremental/full, endpoint and causality checks"
cmd_bench.__doc__ = "wall time vs. sequence length for each branch"
cmd_train.__doc__ = "train the toy model on a synthetic task"
cmd_schedule.__doc__ = "dump alpha over training steps"


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    schema = SCHEMAS[args.command]
    flags = {key: getattr(args, key) for key in schema}
    try:
        file_values = read_config_file(args.config) if args.config else {}
        cfg = resolve(schema, file_values, flags)
        return COMMANDS[args.command](cfg, args.out)
    except (ConfigError, MemgateError, ValueError) as exc:
        parser.exit(2, f"memgate {args.command}: error: {exc}\n")


if __name__ == "__main__":
    sys.exit(main())
