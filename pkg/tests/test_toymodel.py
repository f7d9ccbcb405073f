import json
import math

import numpy as np
import pytest

from memgate.attention import AttentionConfig, MagConfig
from memgate.errors import ContractViolation, TrainingDivergedError
from memgate.expansion import ExpansionSpec
from memgate.memory import ChunkSpec
from memgate.schedule import ScheduleSpec, alpha_at
from memgate.toymodel import (
    ModelConfig,
    TaskSpec,
    TrainConfig,
    build_model,
    cross_entropy,
    evaluate,
    gen_task,
    load_checkpoint,
    parity_of,
    save_checkpoint,
    train,
    write_trajectory_csv,
)
from memgate.toymodel.train import Adam


def small_cfg(n_layers=1, vocab=16, alpha=0.5, n_h=1, d=16, heads=2):
    att = AttentionConfig(d, heads, ChunkSpec(4, n_h), ExpansionSpec("derivative", n_h), MagConfig(alpha))
    return ModelConfig(vocab_size=vocab, d_model=d, n_layers=n_layers, n_heads=heads, max_seq_len=40,
                       attention=att, mlp_hidden=32)


class TestTasks:
    def test_parity_example(self):
        assert parity_of([1, 0, 1, 1]) == 1

    def test_parity_targets(self):
        b = gen_task("parity", 12, seed=3, batch=5)
        for row, tgt in zip(b.tokens, b.targets):
            assert tgt[-1] == parity_of(row)
            assert [parity_of(row[: i + 1]) for i in range(12)] == list(tgt)
        assert b.mask[:, :-1].sum() == 0 and np.all(b.mask[:, -1] == 1)
        assert np.all(gen_task("parity", 12, seed=3, batch=5, dense=True).mask == 1)

    def test_assoc_recall(self):
        b = gen_task("assoc_recall", 9, seed=4, batch=20, vocab_size=16)
        for row, tgt in zip(b.tokens, b.targets):
            pairs = dict(zip(row[0:8:2], row[1:8:2]))
            assert len(pairs) == 4
            assert all(k < 8 <= v for k, v in pairs.items())
            assert tgt[-1] == pairs[row[-1]]
        assert np.all(b.mask.sum(axis=1) == 1)

    def test_assoc_recall_hand_case(self):
        # keys a=0, b=1; values x=8, y=9; query b -> y
        tokens = np.array([0, 8, 1, 9, 1])
        pairs = dict(zip(tokens[0:4:2], tokens[1:4:2]))
        assert pairs[tokens[-1]] == 9

    def test_copy_layout(self):
        b = gen_task("copy", 5, seed=5, batch=3, vocab_size=8)
        assert b.tokens.shape == (3, 10)
        seq = b.tokens[:, :5]
        assert np.all(seq < 7) and np.all(b.tokens[:, 5] == 7)
        np.testing.assert_array_equal(b.tokens[:, 6:], seq[:, :-1])
        np.testing.assert_array_equal(b.targets[:, 5:], seq)
        assert b.mask[:, :5].sum() == 0 and np.all(b.mask[:, 5:] == 1)

    @pytest.mark.parametrize("kind", ["parity", "assoc_recall", "copy"])
    def test_reproducible(self, kind):
        a, b = gen_task(kind, 9, seed=7, batch=4), gen_task(kind, 9, seed=7, batch=4)
        for x, y in zip((a.tokens, a.targets, a.mask), (b.tokens, b.targets, b.mask)):
            np.testing.assert_array_equal(x, y)
        c = gen_task(kind, 9, seed=8, batch=4)
        assert not np.array_equal(a.tokens, c.tokens)

    def test_invalid(self):
        with pytest.raises(ContractViolation):
            TaskSpec("sort", 4)
        with pytest.raises(ContractViolation):
            TaskSpec("assoc_recall", 21, vocab_size=16)
        with pytest.raises(ContractViolation):
            TaskSpec("copy", 4, vocab_size=2)


class TestModel:
    def test_logit_shape(self):
        m = build_model(small_cfg(n_layers=2), seed=0)
        assert m(np.zeros((2, 8), dtype=int)).shape == (2, 8, 16)

    def test_determinism(self):
        a, b = build_model(small_cfg(), seed=9), build_model(small_cfg(), seed=9)
        for name in a.params:
            np.testing.assert_array_equal(a.params[name].data, b.params[name].data)

    def test_zero_layers_is_per_position(self):
        m = build_model(small_cfg(n_layers=0), seed=1)
        tokens = np.random.default_rng(0).integers(0, 16, (1, 10))
        base = m(tokens).data
        bumped = tokens.copy()
        bumped[0, 4] = (bumped[0, 4] + 1) % 16
        diff = np.abs(m(bumped).data - base).max(axis=-1)[0]
        assert diff[4] > 0 and np.all(np.delete(diff, 4) == 0)

    def test_initial_loss_near_uniform(self):
        m = build_model(ModelConfig(), seed=0)
        b = gen_task("copy", 16, seed=0, batch=16)
        loss = cross_entropy(m(b.tokens), b.targets, b.mask).item()
        assert abs(loss - math.log(16)) < 0.1 * math.log(16)

    def test_alpha_zero_matches_softmax_only_model(self):
        m = build_model(small_cfg(n_layers=2, alpha=0.5), seed=2)
        tokens = np.random.default_rng(1).integers(0, 16, (2, 12))
        caches = m.new_caches(2)
        # with caches both branches are evaluated; without, the linear one is skipped
        np.testing.assert_allclose(m(tokens, alpha=0.0, caches=caches).data, m(tokens, alpha=0.0).data, atol=1e-6)

    def test_incremental_matches_full(self):
        m = build_model(small_cfg(n_layers=2, n_h=2), seed=3, dtype=np.float64)
        tokens = np.random.default_rng(2).integers(0, 16, (2, 12))
        full = m(tokens).data
        caches = m.new_caches(2)
        steps = [m(tokens[:, t : t + 1], caches=caches).data for t in range(12)]
        np.testing.assert_allclose(np.concatenate(steps, axis=1), full, atol=1e-10)

    def test_config_errors(self):
        with pytest.raises(ContractViolation):
            ModelConfig(vocab_size=0)
        with pytest.raises(ContractViolation):
            ModelConfig(d_model=32, attention=AttentionConfig(64, 2))
        m = build_model(small_cfg(), seed=0)
        with pytest.raises(ContractViolation):
            m(np.zeros((1, 41), dtype=int))
        with pytest.raises(ContractViolation):
            m(np.full((1, 3), 16))


class TestTraining:
    def test_zero_learning_rate_freezes(self):
        m = build_model(small_cfg(), seed=4)
        before = {n: p.data.copy() for n, p in m.params.items()}
        ref = build_model(small_cfg(), seed=4)
        task = TaskSpec("copy", 6)
        res = train(m, task, TrainConfig(steps=5, batch_size=4, learning_rate=0.0))
        for n, p in m.params.items():
            np.testing.assert_array_equal(p.data, before[n])
        # every logged loss is the frozen model's loss on that step's batch
        for row in res.rows:
            b = gen_task(task, seed=[0, row["step"]], batch=4)
            assert row["loss"] == cross_entropy(ref(b.tokens, alpha=row["alpha"]), b.targets, b.mask).item()
        assert evaluate(m, task, 100) == evaluate(ref, task, 100)

    def test_learns_something(self):
        m = build_model(small_cfg(), seed=5)
        res = train(m, TaskSpec("copy", 6), TrainConfig(steps=60, batch_size=8, learning_rate=1e-2))
        assert np.mean(res.losses[-10:]) < np.mean(res.losses[:10])

    def test_reproducible(self):
        runs = []
        for _ in range(2):
            m = build_model(small_cfg(), seed=6)
            runs.append(train(m, TaskSpec("copy", 6), TrainConfig(steps=8, batch_size=4)).losses)
        assert runs[0] == runs[1]

    def test_alpha_log_matches_schedule(self):
        sched = ScheduleSpec("cyclic", cycle_values=(0.0, 0.5, 1.0), cycle_period=2)
        m = build_model(small_cfg(), seed=7)
        res = train(m, TaskSpec("copy", 4), TrainConfig(steps=9, batch_size=2, schedule=sched))
        assert [r["alpha"] for r in res.rows] == [alpha_at(sched, s) for s in range(9)]

    def test_clipping_bounds_update(self):
        m = build_model(small_cfg(), seed=8)
        before = {n: p.data.copy() for n, p in m.params.items()}
        train(m, TaskSpec("copy", 6), TrainConfig(steps=1, batch_size=4, learning_rate=1e-3, grad_clip_norm=1e-3))
        # the first Adam step moves each entry by about lr regardless of clipping
        for n, p in m.params.items():
            assert np.max(np.abs(p.data - before[n])) <= 1e-3 * 1.01

    def test_resume_continues_trajectory(self, tmp_path):
        task, tcfg = TaskSpec("copy", 6), TrainConfig(steps=10, batch_size=4)
        full = train(build_model(small_cfg(), seed=9), task, tcfg, out_dir=tmp_path / "a", checkpoint_every=4)
        resumed_model = build_model(small_cfg(), seed=123)
        resumed = train(resumed_model, task, tcfg, resume_from=tmp_path / "a" / "ckpt-4")
        assert [r["step"] for r in resumed.rows] == list(range(4, 10))
        np.testing.assert_allclose(resumed.losses, full.losses[4:], rtol=1e-6)

    def test_nan_aborts_with_diagnostics(self, tmp_path):
        m = build_model(small_cfg(), seed=10)
        m.params["head"].data[0, 0] = np.nan
        with pytest.raises(TrainingDivergedError) as err:
            train(m, TaskSpec("copy", 6), TrainConfig(steps=3, batch_size=2), out_dir=tmp_path)
        diag = err.value.diagnostics
        assert diag["step"] == 0 and diag["alpha"] == 0.5 and "head" in diag["grad_norms"]
        assert json.loads((tmp_path / "diverged-step0.json").read_text())["step"] == 0

    def test_config_validation(self):
        with pytest.raises(ContractViolation):
            TrainConfig(learning_rate=-1.0)
        with pytest.raises(ContractViolation):
            TrainConfig(grad_clip_norm=0.0)
        with pytest.raises(ContractViolation):
            train(build_model(small_cfg(vocab=4), 0), TaskSpec("copy", 4), TrainConfig(steps=1))

    def test_trajectory_csv(self, tmp_path):
        rows = [{"step": 0, "loss": 1.5, "alpha": 0.5, "grad_norm": 0.25}]
        text = write_trajectory_csv(rows, tmp_path / "t.csv").read_text().splitlines()
        assert text == ["step,loss,alpha,grad_norm", "0,1.5,0.5,0.25"]


class TestEvaluate:
    def test_untrained_parity_is_chance(self):
        m = build_model(small_cfg(vocab=2), seed=11)
        acc = evaluate(m, TaskSpec("parity", 12), n_samples=1000)
        assert 0.4 <= acc <= 0.6

    def test_accuracy_in_unit_interval(self):
        m = build_model(small_cfg(), seed=12)
        for length in (4, 8):
            assert 0.0 <= evaluate(m, TaskSpec("copy", length), 50) <= 1.0


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        tensors = {
            "a": np.arange(6, dtype=np.float32).reshape(2, 3),
            "b": np.array(3.5, dtype=np.float64),
            "c": np.array([1, -2], dtype=np.int64),
        }
        save_checkpoint(tmp_path, tensors, {"step": 7, "lr": 0.5, "tag": "x"})
        loaded, meta = load_checkpoint(tmp_path)
        assert meta == {"step": 7, "lr": 0.5, "tag": "x"}
        for name, arr in tensors.items():
            assert loaded[name].dtype == arr.dtype
            np.testing.assert_array_equal(loaded[name], arr)

    def test_manifest_format(self, tmp_path):
        save_checkpoint(tmp_path, {"w": np.ones((2, 2), dtype=np.float32), "s": np.zeros((), np.float64)})
        lines = (tmp_path / "manifest.txt").read_text().splitlines()
        assert lines == ["memgate-checkpoint 1", "tensor w float32 2,2 0 16", "tensor s float64 - 16 8"]
        assert (tmp_path / "tensors.bin").stat().st_size == 24
        raw = np.frombuffer((tmp_path / "tensors.bin").read_bytes()[:16], dtype="<f4")
        np.testing.assert_array_equal(raw, 1.0)

    def test_model_and_optimizer_state(self, tmp_path):
        m = build_model(small_cfg(), seed=13)
        train(m, TaskSpec("copy", 4), TrainConfig(steps=2, batch_size=2), out_dir=tmp_path)
        tensors, meta = load_checkpoint(tmp_path / "ckpt-final")
        assert meta["next_step"] == 2 and meta["adam_t"] == 2
        for name, p in m.params.items():
            np.testing.assert_array_equal(tensors[name], p.data)
            assert f"adam.m.{name}" in tensors and f"adam.v.{name}" in tensors

    def test_bad_manifest(self, tmp_path):
        (tmp_path / "manifest.txt").write_text("something else\n")
        (tmp_path / "tensors.bin").write_bytes(b"")
        with pytest.raises(ContractViolation):
            load_checkpoint(tmp_path)


def test_adam_matches_reference_update():
    from memgate.numerics.tensor import Tensor

    p = Tensor(np.array([1.0, -2.0]), requires_grad=True)
    opt = Adam({"p": p}, lr=0.1)
    g = np.array([0.5, -0.25])
    opt.step({"p": g})
    # first bias-corrected step is lr * g / (|g| + eps)
    np.testing.assert_allclose(p.data, [1.0 - 0.1, -2.0 + 0.1], atol=1e-7)
