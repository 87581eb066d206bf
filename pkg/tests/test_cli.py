import csv
import json

import pytest
import yaml

from octpair.cli import main

SMALL = {
    "seed": 2,
    "simulate": {
        "counts": {"beef": 3, "pork": 3, "turkey": 3},
        "acquisition": {"a_scan_rate": 250.0, "insertion_velocity": 20.0, "depth_samples": 250},
        "layout": {"n_layers": [3, 3], "duration": [30.0, 35.0]},
    },
    "preprocess": {"window": 4},
    "model": {"architecture": "tiny_conv", "embed_dim": 16, "widths": [8, 8, 16]},
    "train": {"epochs": 1, "pretrain_epochs": 1, "learning_rate": 1e-3, "pretrain_learning_rate": 1e-3},
    "sweep": {
        "n_folds": 1,
        "inits": ["scratch", "generic_pretrained"],
        "fractions": [1.0],
        "modality_modes": ["dual"],
        "modality_init": "scratch",
    },
}


@pytest.fixture
def env(tmp_path, monkeypatch):
    monkeypatch.setenv("OCTPAIR_DATA_DIR", str(tmp_path / "data"))
    path = tmp_path / "small.yaml"
    path.write_text(yaml.safe_dump(SMALL))
    return tmp_path, str(path)


def test_version_and_help(capsys):
    assert main(["--version"]) == 0
    assert main(["--help"]) == 0
    assert "sweep" in capsys.readouterr().out
    assert main(["no-such-command"]) == 1


def test_dry_run_writes_nothing(env, capsys):
    tmp, cfg = env
    assert main(["simulate", "--config", cfg, "--dry-run"]) == 0
    out = capsys.readouterr().out
    assert "9 insertions planned" in out and "beef-000" in out
    assert not (tmp / "data").exists()
    assert main(["sweep", "--config", cfg, "--dry-run"]) == 0
    assert "2 cells" in capsys.readouterr().out
    assert not (tmp / "data").exists()


def test_config_errors_exit_1(env, capsys):
    tmp, _ = env
    bad = tmp / "bad.yaml"
    bad.write_text("train:\n  epochz: 3\n")
    assert main(["simulate", "--config", str(bad), "--dry-run"]) == 1
    assert "epochz" in capsys.readouterr().err
    assert main(["simulate", "--config", str(tmp / "missing.yaml")]) == 1


def test_missing_inputs_exit_1(env, capsys):
    _, cfg = env
    assert main(["preprocess", "--config", cfg]) == 1
    assert "octpair simulate" in capsys.readouterr().err
    assert main(["pretrain", "--config", cfg]) == 1
    assert main(["report", "/nonexistent/sweep"]) == 1


def test_report_on_empty_ledger(env, capsys):
    tmp, _ = env
    (tmp / "sw" / "ledger").mkdir(parents=True)
    assert main(["report", str(tmp / "sw")]) == 0
    assert "empty" in capsys.readouterr().err
    assert (tmp / "sw/reports/table.md").exists()


def test_stage_by_stage_pipeline(env, capsys):
    tmp, cfg = env
    data = tmp / "data"
    assert main(["simulate", "--config", cfg]) == 0
    manifest = (data / "dataset/manifest.json").read_bytes()
    assert (data / "dataset/resolved_config.yaml").exists()
    # overwrite guard leaves the dataset untouched
    assert main(["simulate", "--config", cfg, "--seed", "9"]) == 1
    assert "--force" in capsys.readouterr().err
    assert (data / "dataset/manifest.json").read_bytes() == manifest

    assert main(["preprocess", "--config", cfg]) == 0
    assert "labeled" in capsys.readouterr().out
    assert main(["preprocess", "--config", cfg]) == 1
    assert main(["preprocess", "--config", cfg, "--force"]) == 0

    ckpt = tmp / "ck.pt"
    assert main(["pretrain", "--config", cfg, "--fold", "0", "--out", str(ckpt)]) == 0
    assert ckpt.exists() and "initial_loss" in json.loads(ckpt.with_suffix(".json").read_text())
    assert main(["pretrain", "--config", cfg, "--fold", "5"]) == 1

    model = tmp / "m.pt"
    args = ["finetune", "--config", cfg, "--init", "contrastive_checkpoint", "--checkpoint", str(ckpt), "--out", str(model)]
    assert main(args) == 0
    assert main(["finetune", "--config", cfg, "--init", "contrastive_checkpoint"]) == 1

    metrics = tmp / "metrics.csv"
    assert main(["evaluate", "--config", cfg, "--model", str(model), "--out", str(metrics)]) == 0
    rows = list(csv.reader(metrics.open()))
    assert rows[0] == ["class", "precision", "recall", "f1", "ap", "support"]
    assert rows[-1][0] == "weighted" and 0 <= float(rows[-1][3]) <= 1
    assert main(["evaluate", "--config", cfg, "--model", str(tmp / "nope.pt")]) == 1


def test_sweep_strict_and_resume(env, capsys):
    tmp, cfg = env
    out = tmp / "sw"
    # generic_pretrained cannot run on tiny_conv, so one cell errors
    assert main(["sweep", "--config", cfg, "--out", str(out)]) == 0
    text = capsys.readouterr()
    assert "1 errored" in text.out and "generic_pretrained" in text.err
    assert (out / "resolved_config.yaml").exists()
    assert main(["sweep", "--config", cfg, "--out", str(out), "--strict"]) == 2
    assert "1 resumed" in capsys.readouterr().out
    # a different config may not reuse the ledger without --force
    assert main(["sweep", "--config", cfg, "--out", str(out), "--seed", "5"]) == 2
    assert main(["report", str(out)]) == 0
    assert "| 100 | Scratch |" in capsys.readouterr().out
