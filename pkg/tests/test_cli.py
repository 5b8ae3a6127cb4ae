"""End-to-end command-line behaviour on a tiny synthetic dataset."""

import json

import pytest

from surfuse.cli import load_config, run
from surfuse.tensor import ConfigError

TRAIN = ["--epochs", "2", "--input-size", "32", "--batch-size", "8", "--lr-vision", "1e-3"]


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    data, run_dir = root / "data", root / "run"
    assert run(["gen-data", "--classes", "3", "--per-class", "10", "--size", "32", "--seed", "4", "--out", str(data)]) == 0
    assert run(["train", "--data", str(data), "--out", str(run_dir), "--seed", "4", *TRAIN]) == 0
    return root, data, run_dir


class TestPipeline:
    def test_train_outputs(self, workspace):
        _, _, run_dir = workspace
        for name in ("best.ckpt", "trainlog.csv", "trainlog.json", "config.resolved.json"):
            assert (run_dir / name).is_file(), name
        resolved = json.loads((run_dir / "config.resolved.json").read_text())
        assert resolved["seed"] == 4 and resolved["train"]["max_epochs"] == 2
        assert len(resolved["classes"]) == 3

    def test_eval_writes_report_beside_checkpoint(self, workspace):
        _, _, run_dir = workspace
        assert run(["eval", "--ckpt", str(run_dir / "best.ckpt")]) == 0
        doc = json.loads((run_dir / "eval" / "eval.json").read_text())
        assert doc["n_samples"] == 6
        assert (run_dir / "eval" / "confusion.csv").is_file()
        assert (run_dir / "eval" / "config.resolved.json").is_file()

    def test_eval_replay_is_byte_identical(self, workspace):
        root, _, run_dir = workspace
        assert run(["eval", "--ckpt", str(run_dir / "best.ckpt"), "--out", str(root / "e1")]) == 0
        assert run(["eval", "--ckpt", str(run_dir / "best.ckpt"), "--out", str(root / "e2")]) == 0
        assert (root / "e1" / "eval.json").read_bytes() == (root / "e2" / "eval.json").read_bytes()

    def test_bench(self, workspace):
        _, _, run_dir = workspace
        code = run(["bench", "--ckpt", str(run_dir / "best.ckpt"), "--iters", "10", "--warmup", "1", "--n-samples", "2"])
        assert code == 0
        doc = json.loads((run_dir / "bench" / "bench.json").read_text())
        assert set(doc["scopes"]) == {"full", "model"}

    def test_same_seed_same_trainlog(self, workspace):
        root, data, run_dir = workspace
        assert run(["train", "--data", str(data), "--out", str(root / "again"), "--seed", "4", *TRAIN]) == 0
        assert (root / "again" / "trainlog.csv").read_bytes() == (run_dir / "trainlog.csv").read_bytes()


class TestExitCodes:
    def test_missing_checkpoint(self, workspace, capsys):
        root, _, _ = workspace
        out = root / "nowhere"
        assert run(["eval", "--ckpt", str(root / "absent.ckpt"), "--out", str(out)]) == 2
        assert not out.exists()
        assert "absent.ckpt" in capsys.readouterr().err

    def test_missing_dataset(self, tmp_path):
        assert run(["train", "--data", str(tmp_path / "none"), "--out", str(tmp_path / "o")]) == 2

    def test_unknown_config_key(self, workspace, tmp_path):
        _, data, _ = workspace
        cfg = tmp_path / "bad.json"
        cfg.write_text(json.dumps({"train": {"learning_rate": 0.1}}))
        assert run(["train", "--config", str(cfg), "--data", str(data), "--out", str(tmp_path / "o")]) == 3

    def test_invalid_value(self, workspace, tmp_path):
        _, data, _ = workspace
        assert run(["train", "--data", str(data), "--out", str(tmp_path / "o"), "--train-ratio", "1.5"]) == 3

    def test_divergence_is_numeric_failure(self, workspace, tmp_path):
        _, data, _ = workspace
        huge = ["--lr-vision", "1e30", "--lr-tactile", "1e30", "--lr-fusion", "1e30"]
        with pytest.warns(RuntimeWarning):
            code = run(["train", "--data", str(data), "--out", str(tmp_path / "o"), "--epochs", "2",
                        "--input-size", "32", *huge])
        assert code == 4

    def test_corrupt_checkpoint(self, workspace, tmp_path):
        _, _, run_dir = workspace
        bad = tmp_path / "best.ckpt"
        bad.write_bytes((run_dir / "best.ckpt").read_bytes()[:100])
        assert run(["eval", "--ckpt", str(bad), "--data", str(workspace[1])]) == 1


class TestConfig:
    def test_flags_override_file(self, workspace, tmp_path):
        _, data, _ = workspace
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"seed": 4, "train": {"max_epochs": 5, "batch_size": 8, "lr_vision": 1e-3},
                                   "vision": {"input_size": 32}}))
        out = tmp_path / "o"
        assert run(["train", "--config", str(cfg), "--data", str(data), "--out", str(out), "--epochs", "1"]) == 0
        resolved = json.loads((out / "config.resolved.json").read_text())
        assert resolved["train"]["max_epochs"] == 1
        assert resolved["train"]["batch_size"] == 8

    @pytest.mark.parametrize("doc", [{"seed": "x"}, {"vision": {"n_classes": 4}}, {"bench": {"iters": 1.5}}, [1]])
    def test_schema_violations(self, tmp_path, doc):
        p = tmp_path / "c.json"
        p.write_text(json.dumps(doc))
        with pytest.raises(ConfigError):
            load_config(str(p))
