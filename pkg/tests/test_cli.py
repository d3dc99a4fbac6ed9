import json

import numpy as np
import pytest
import yaml

from dgc.cli import main


@pytest.fixture
def small_config(tmp_path):
    path = tmp_path / "run.yaml"
    path.write_text(yaml.safe_dump({
        "dataset": {"name": "pacman", "n_per_annulus": 80},
        "training": {"epochs": 2, "batch_size": 40},
        "output": {"dir": str(tmp_path / "run"), "checkpoint_every": 1},
    }))
    return path


def test_generate_is_reproducible(tmp_path):
    assert main(["generate", "pacman", "--seed", "3", "--out", str(tmp_path / "a")]) == 0
    assert main(["generate", "pacman", "--seed", "3", "--out", str(tmp_path / "b")]) == 0
    a = (tmp_path / "a" / "pacman.csv").read_bytes()
    assert a == (tmp_path / "b" / "pacman.csv").read_bytes()
    assert a.count(b"\n") == 20_001
    manifest = json.loads((tmp_path / "a" / "manifest.json").read_text())
    assert manifest["rows"] == 20_000 and manifest["seed"] == 3


def test_train_eval_sample_plot(tmp_path, small_config, capsys):
    run = tmp_path / "run"
    assert main(["train", "--config", str(small_config)]) == 0
    for name in ("config.yaml", "train_log.jsonl", "final.pt", "checkpoint_0002.pt"):
        assert (run / name).exists(), name

    for extra in ([], ["--hide-labels"]):
        assert main(["eval", "--checkpoint", str(run / "final.pt"), *extra]) == 0
    report = json.loads((run / "report_test_labeled.json").read_text())
    assert report["n_samples"] == 2 * 20 and "confusion" in report
    assert (run / "report_test_unlabeled.json").exists()

    assert main(["sample", "--checkpoint", str(run / "final.pt"), "--n", "50",
                 "--out", str(tmp_path / "s")]) == 0
    rows = (tmp_path / "s" / "samples.csv").read_text().splitlines()
    assert rows[0] == "x1,x2,y,component" and len(rows) == 51
    assert (tmp_path / "s" / "samples_3d.png").exists()

    assert main(["plot", "curves", str(run / "train_log.jsonl")]) == 0
    assert main(["plot", "confusion", str(run / "report_test_labeled.json")]) == 0
    assert main(["plot", "pacman", str(tmp_path / "s" / "samples.csv")]) == 0
    assert (run / "training_curves.png").exists() and (run / "confusion.png").exists()


def test_train_resume_and_flags(tmp_path, small_config):
    run = tmp_path / "run"
    assert main(["train", "--config", str(small_config), "--k", "3", "--no-regularizer"]) == 0
    cfg = yaml.safe_load((run / "config.yaml").read_text())
    assert cfg["model"]["n_clusters"] == 3 and cfg["training"]["regularizer"] is False
    small = yaml.safe_load(small_config.read_text())
    small["training"]["epochs"] = 3
    small_config.write_text(yaml.safe_dump(small))
    assert main(["train", "--config", str(small_config), "--k", "3",
                 "--checkpoint", str(run / "checkpoint_0002.pt")]) == 0
    epochs = [json.loads(l).get("epoch") for l in (run / "train_log.jsonl").read_text().splitlines()]
    assert epochs == [None, 0, 1, 2]


def test_sweep_writes_report_per_k(tmp_path, small_config):
    assert main(["sweep", "--config", str(small_config), "--ks", "1", "2"]) == 0
    summary = json.loads((tmp_path / "run" / "sweep.json").read_text())
    assert [s["k"] for s in summary] == [1, 2]
    assert summary[0]["cluster_accuracy"] == pytest.approx(0.5)
    assert (tmp_path / "run" / "k2" / "report.json").exists()


def test_sample_is_deterministic(tmp_path, small_config):
    main(["train", "--config", str(small_config)])
    for name in ("a", "b"):
        main(["sample", "--checkpoint", str(tmp_path / "run" / "final.pt"), "--n", "30",
              "--seed", "1", "--out", str(tmp_path / name)])
    for f in ("samples.csv", "samples_2d.png", "samples_3d.png"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


@pytest.mark.parametrize("argv,code,message", [
    (["train", "--k", "0"], 2, "n_clusters"),
    (["sample", "--checkpoint", "x.pt", "--n", "0", "--out", "o"], 1, "--n must be positive"),
    (["eval", "--checkpoint", "does-not-exist.pt"], 1, "error"),
])
def test_error_exit_codes(tmp_path, monkeypatch, capsys, argv, code, message):
    monkeypatch.chdir(tmp_path)
    assert main(argv) == code
    assert message in capsys.readouterr().err


def test_bad_config_lists_every_problem(tmp_path, capsys):
    bad = tmp_path / "bad.yaml"
    bad.write_text("training: {lr: -1, foo: 2}\nmodel: {n_clusters: 0}\n")
    assert main(["train", "--config", str(bad)]) == 2
    err = capsys.readouterr().err
    assert "training.foo" in err and "n_clusters" in err


def test_plot_rejects_report_without_confusion(tmp_path, capsys):
    (tmp_path / "r.json").write_text("{}")
    assert main(["plot", "confusion", str(tmp_path / "r.json")]) == 1
