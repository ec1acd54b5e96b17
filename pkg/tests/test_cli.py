import json
import math
import re

import pytest

from mfevit import cli
from mfevit.config import load_config


def run(capsys, *argv):
    code = cli.main([str(a) for a in argv])
    out = capsys.readouterr()
    lines = out.out.strip().splitlines()
    return code, json.loads(lines[-1]), out.err


TINY_CFG = """\
image_size = 32
patch_size = 16
embed_dim = 8
num_layers = 1
num_heads = 2
num_subclasses = 1
epochs = 1
lr = 0.001
"""


@pytest.fixture
def cfg_file(tmp_path):
    path = tmp_path / "tiny.txt"
    path.write_text(TINY_CFG)
    return path


def test_synth_one_subject(capsys, tmp_path):
    code, summary, _ = run(capsys, "synth", "--out", tmp_path / "d", "--subjects", 1, "--per-class", 1)
    assert code == 0 and summary["samples"] == 6 and summary["status"] == "ok"
    assert len(list((tmp_path / "d" / "rgb").iterdir())) == 6
    assert (tmp_path / "d" / "manifest.csv").is_file()


def test_synth_same_seed_same_manifest(capsys, tmp_path):
    for name in ("a", "b"):
        run(capsys, "synth", "--out", tmp_path / name, "--subjects", 2, "--per-class", 2, "--seed", 4)
    assert (tmp_path / "a/manifest.csv").read_text() == (tmp_path / "b/manifest.csv").read_text()


def test_synth_noise_count(capsys, tmp_path):
    code, summary, _ = run(capsys, "synth", "--out", tmp_path, "--subjects", 3, "--per-class", 3,
                           "--noise-frac", 0.2)
    marked = sum(line.endswith(",1") for line in (tmp_path / "manifest.csv").read_text().splitlines()[1:])
    assert summary["noisy"] == marked == math.ceil(0.2 * 54)


def test_params_head_delta(capsys, tmp_path):
    (tmp_path / "n0.txt").write_text("num_subclasses = 0\n")
    (tmp_path / "n5.txt").write_text("num_subclasses = 5\n")
    _, a, _ = run(capsys, "params", "--config", tmp_path / "n0.txt")
    _, b, _ = run(capsys, "params", "--config", tmp_path / "n5.txt")
    assert b["total"] - a["total"] == 384 * 30 + 30
    changed = {k for k in b["groups"] if b["groups"][k] != a["groups"].get(k)}
    assert changed == {"head"}


def test_check_grad_reports_worst(capsys, monkeypatch, gradient_reports):
    reports, _ = gradient_reports
    monkeypatch.setattr(cli, "check_gradients", lambda config, seed=0: reports)
    code, summary, err = run(capsys, "check-grad", "--size", "tiny")
    worst = max(reports, key=lambda r: r.rel_error)
    assert code == 0 and summary["passed"] and summary["worst"] == worst.name
    assert summary["max_rel_error"] <= 1e-4 and summary["tensors"] == len(reports)
    assert f"worst offender {worst.name}" in err


def test_train_eval_chance_level(capsys, tmp_path, cfg_file):
    data = tmp_path / "data"
    run(capsys, "synth", "--out", data, "--subjects", 25, "--per-class", 4, "--seed", 1)
    code, summary, _ = run(capsys, "train", "--config", cfg_file, "--manifest", data / "manifest.csv",
                           "--out", tmp_path / "run", "--epochs", 0)
    assert code == 0 and summary["epochs"] == 0
    code, summary, err = run(capsys, "eval", "--checkpoint", tmp_path / "run" / "checkpoint.bin",
                             "--manifest", data / "manifest.csv")
    assert code == 0 and summary["samples"] == 600
    assert abs(summary["accuracy"] - 1 / 6) <= 0.1


def test_flags_override_file_and_snapshot(capsys, tmp_path, cfg_file, small_manifest):
    code, summary, _ = run(capsys, "train", "--config", cfg_file, "--manifest", small_manifest,
                           "--out", tmp_path / "run", "--seed", 7, "--set", "batch_size=4", "--epochs", 2)
    assert code == 0
    snap = load_config(tmp_path / "run" / "config.txt")
    assert (snap.train.seed, snap.train.batch_size, snap.train.epochs) == (7, 4, 2)
    assert snap.model.embed_dim == 8


def test_cv_flags_and_outputs(capsys, tmp_path, cfg_file, small_manifest):
    code, summary, _ = run(capsys, "cv", "--config", cfg_file, "--manifest", small_manifest,
                           "--k", 2, "--repeats", 1, "--out", tmp_path / "cv")
    assert code == 0 and summary["splits"] == 2
    assert {p.name for p in (tmp_path / "cv").iterdir()} == {"config.txt", "confusion.csv", "splits.csv",
                                                            "summary.json"}
    assert load_config(tmp_path / "cv" / "config.txt").train.cv_folds == 2


def test_run_dir_from_environment(capsys, tmp_path, cfg_file, small_manifest, monkeypatch):
    monkeypatch.setenv(cli.RUN_DIR_ENV, str(tmp_path / "runs"))
    code, summary, _ = run(capsys, "train", "--config", cfg_file, "--manifest", small_manifest, "--epochs", 0)
    assert code == 0 and summary["run_dir"].startswith(str(tmp_path / "runs"))
    assert re.search(r"train-\d{8}-\d{6}$", summary["run_dir"])


def test_config_errors_list_every_key(capsys, tmp_path):
    (tmp_path / "bad.txt").write_text("embed_dim = 10\nnum_heads = 3\nwat = 1\nlr = -2\n")
    code, summary, err = run(capsys, "params", "--config", tmp_path / "bad.txt")
    assert code == 1 and summary["status"] == "error"
    for key in ("embed_dim", "wat", "lr"):
        assert key in summary["error"]
    assert "ERROR" in err


def test_missing_files_exit_nonzero(capsys, tmp_path, cfg_file):
    code, summary, _ = run(capsys, "train", "--config", cfg_file, "--manifest", tmp_path / "none.csv")
    assert code == 1 and "none.csv" in summary["error"]
    code, _, _ = run(capsys, "eval", "--checkpoint", tmp_path / "none.bin", "--manifest", tmp_path / "none.csv")
    assert code == 1


def test_config_required_for_train():
    with pytest.raises(SystemExit) as exc:
        cli.main(["train", "--manifest", "m.csv"])
    assert exc.value.code != 0


def test_eval_rejects_mismatched_model(capsys, tmp_path, cfg_file, small_manifest):
    run(capsys, "train", "--config", cfg_file, "--manifest", small_manifest, "--out", tmp_path / "r", "--epochs", 0)
    code, summary, _ = run(capsys, "eval", "--checkpoint", tmp_path / "r" / "checkpoint.bin",
                           "--manifest", small_manifest, "--set", "embed_dim=16")
    assert code == 1 and "checkpoint" in summary["error"]


@pytest.fixture
def small_manifest(tmp_path, capsys):
    run(capsys, "synth", "--out", tmp_path / "small", "--subjects", 4, "--per-class", 1)
    return tmp_path / "small" / "manifest.csv"
