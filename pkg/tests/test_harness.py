import csv
import json

import numpy as np
import pytest

from memgate.harness import bench, equiv
from memgate.harness.cli import SCHEMAS, main
from memgate.harness.config import ConfigError, read_config_file, resolve
from memgate.schedule import ScheduleSpec, alpha_at


def read_csv(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


def only_csv(out, command):
    files = sorted(out.glob(f"{command}-*.csv"))
    assert len(files) == 1
    return files[0]


class TestConfig:
    def test_file_parsing(self, tmp_path):
        path = tmp_path / "run.cfg"
        path.write_text("# comment\nsteps = 12\n\nschedule = cyclic  # trailing\ncycle_values = 0, 1\n")
        assert read_config_file(path) == {"steps": "12", "schedule": "cyclic", "cycle_values": "0, 1"}

    def test_precedence(self):
        schema = SCHEMAS["schedule"]
        cfg = resolve(schema, {"steps": "12", "alpha": "0.25"}, {"steps": "5", "alpha": None})
        assert cfg["steps"] == 5 and cfg["alpha"] == 0.25 and cfg["ramp_steps"] == 100

    def test_unknown_key_rejected(self):
        with pytest.raises(ConfigError, match="unknown key"):
            resolve(SCHEMAS["schedule"], {"stepz": "3"})

    def test_bad_value(self):
        with pytest.raises(ConfigError):
            resolve(SCHEMAS["schedule"], {"steps": "many"})

    def test_malformed_line(self, tmp_path):
        path = tmp_path / "bad.cfg"
        path.write_text("steps 12\n")
        with pytest.raises(ConfigError):
            read_config_file(path)


class TestEquiv:
    def test_single_case_prints_one_row(self, tmp_path, capsys):
        assert main(["equiv", "-T", "64", "-C", "8", "-nh", "2", "--out", str(tmp_path)]) == 0
        lines = [ln for ln in capsys.readouterr().out.splitlines() if ln.startswith(("PASS", "FAIL"))]
        assert len(lines) == 1 and "T=64" in lines[0] and "C=8" in lines[0] and "n_h=2" in lines[0]
        rows = read_csv(only_csv(tmp_path, "equiv"))
        assert len(rows) == 1 and rows[0]["passed"] == "1"

    def test_sign_flip_fails_loudly(self, tmp_path, capsys):
        code = main(["equiv", "-T", "16", "-C", "8", "-nh", "1", "--inject-sign-flip", "--out", str(tmp_path)])
        assert code != 0
        assert "FAIL" in capsys.readouterr().out

    def test_sign_flip_caught_across_sweep(self):
        results = equiv.sweep_chunkwise((7, 16), (8,), (3, "T"), (1, 2), ("float64",), seed=0, tril_sign=-1.0)
        assert not any(r.passed for r in results)

    def test_small_sweep_all_suites(self, tmp_path):
        cfg_file = tmp_path / "equiv.cfg"
        cfg_file.write_text("sweep_T = 1, 7, 16\nsweep_d = 1, 8\nsweep_C = 1, 3, T\ndecode_T = 12\n")
        assert main(["equiv", "--config", str(cfg_file), "--out", str(tmp_path)]) == 0
        rows = read_csv(only_csv(tmp_path, "equiv"))
        assert {r["suite"] for r in rows} == set(equiv.SUITES)
        assert all(r["passed"] == "1" for r in rows)
        manifest = json.loads(next(tmp_path.glob("equiv-*.manifest.json")).read_text())
        assert manifest["config"]["sweep_T"] == [1, 7, 16] and manifest["seed"] == 0
        assert "version" in manifest

    def test_unknown_suite_is_usage_error(self, tmp_path):
        with pytest.raises(SystemExit) as err:
            main(["equiv", "--suites", "nope", "--out", str(tmp_path)])
        assert err.value.code == 2

    def test_unknown_config_key_is_usage_error(self, tmp_path):
        cfg_file = tmp_path / "x.cfg"
        cfg_file.write_text("colour = blue\n")
        with pytest.raises(SystemExit) as err:
            main(["equiv", "--config", str(cfg_file), "--out", str(tmp_path)])
        assert err.value.code == 2


class TestSchedule:
    def test_dump_matches_alpha_at(self, tmp_path):
        code = main(["schedule", "--schedule", "gradual", "--alpha-start", "0.01", "--alpha-target", "0.5",
                     "--ramp-steps", "100", "--steps", "120", "--out", str(tmp_path)])
        assert code == 0
        rows = read_csv(only_csv(tmp_path, "schedule"))
        spec = ScheduleSpec("gradual", start_value=0.01, target_value=0.5, ramp_steps=100)
        assert len(rows) == 120
        assert all(float(r["alpha"]) == alpha_at(spec, int(r["step"])) for r in rows)
        assert float(rows[50]["alpha"]) == pytest.approx(0.255)

    def test_cyclic_dump(self, tmp_path):
        main(["schedule", "--schedule", "cyclic", "--cycle-values", "0,0.5,1", "--cycle-period", "10",
              "--steps", "31", "--out", str(tmp_path)])
        alphas = [float(r["alpha"]) for r in read_csv(only_csv(tmp_path, "schedule"))]
        assert alphas[0] == 0 and alphas[10] == 0.5 and alphas[20] == 1.0 and alphas[30] == 0

    def test_invalid_spec_is_usage_error(self, tmp_path):
        with pytest.raises(SystemExit) as err:
            main(["schedule", "--schedule", "constant", "--alpha", "2", "--out", str(tmp_path)])
        assert err.value.code == 2


class TestTrain:
    ARGS = ["train", "--task", "copy", "--length", "4", "--d-model", "16", "--n-heads", "2", "--n-layers", "1",
            "--mlp-hidden", "16", "--batch-size", "4", "--eval-samples", "20"]

    def test_smoke_and_schedule_column(self, tmp_path, capsys):
        out = tmp_path / "a"
        code = main(self.ARGS + ["--steps", "6", "--schedule", "cyclic", "--cycle-period", "2", "--out", str(out)])
        assert code == 0
        rows = read_csv(only_csv(out, "train"))
        assert list(rows[0]) == ["step", "loss", "alpha", "grad_norm"]
        main(["schedule", "--schedule", "cyclic", "--cycle-period", "2", "--steps", "6", "--out", str(out)])
        sched = read_csv(only_csv(out, "schedule"))
        assert [r["alpha"] for r in rows] == [r["alpha"] for r in sched]
        assert "final_loss" in capsys.readouterr().out
        manifest = json.loads(next(out.glob("train-*.manifest.json")).read_text())
        assert "accuracy_len4" in manifest["metrics"]

    def test_resume_continues(self, tmp_path):
        full, part = tmp_path / "full", tmp_path / "part"
        main(self.ARGS + ["--steps", "6", "--out", str(full)])
        main(self.ARGS + ["--steps", "3", "--out", str(part)])
        ckpt = next(part.glob("train-*-ckpt")) / "ckpt-final"
        resumed = tmp_path / "resumed"
        main(self.ARGS + ["--steps", "6", "--resume", str(ckpt), "--out", str(resumed)])
        full_rows = read_csv(only_csv(full, "train"))
        rows = read_csv(only_csv(resumed, "train"))
        assert [r["step"] for r in rows] == ["3", "4", "5"]
        np.testing.assert_allclose([float(r["loss"]) for r in rows],
                                   [float(r["loss"]) for r in full_rows[3:]], rtol=1e-6)


class TestBench:
    def test_rows_and_constant_linear_state(self, tmp_path):
        code = main(["bench", "--T-values", "64,128,256", "--d-head", "8", "--reps", "1", "--warmup", "0",
                     "--chunk", "16", "--out", str(tmp_path)])
        assert code == 0
        rows = read_csv(only_csv(tmp_path, "bench"))
        assert [(r["branch"], r["T"]) for r in rows] == [
            ("linear", "64"), ("linear", "128"), ("linear", "256"),
            ("softmax", "64"), ("softmax", "128"), ("softmax", "256"),
        ]
        assert len({r["peak_state_bytes"] for r in rows if r["branch"] == "linear"}) == 1
        soft = [int(r["peak_state_bytes"]) for r in rows if r["branch"] == "softmax"]
        assert soft[1] == 2 * soft[0] and soft[2] == 2 * soft[1]
        manifest = json.loads(next(tmp_path.glob("bench-*.manifest.json")).read_text())
        assert set(manifest["loglog_slopes"]) == {"softmax", "linear"}

    def test_slope_fit(self):
        rows = [{"T": t, "branch": "x", "wall_time": 3.0 * t**2} for t in (10, 20, 40)]
        assert bench.loglog_slope(rows, "x") == pytest.approx(2.0)
