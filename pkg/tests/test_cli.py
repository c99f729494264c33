import subprocess
import sys

import numpy as np
import pytest
import yaml

from decov import cli
from test_datasets import write_fake_mnist


@pytest.fixture
def tiny_config(tmp_path):
    (tmp_path / "mnist").mkdir()
    data = write_fake_mnist(tmp_path / "mnist", n_train=60, n_test=20)
    cfg = {
        "experiment": "pairs-mnist",
        "seeds": [0, 1],
        "output_dir": str(tmp_path / "out"),
        "data": {"data_dir": str(data), "train_pairs": 32, "val_pairs": 16, "test_pairs": 16},
        "model": {"hidden_units": 8},
        "optim": {"batch_size": 16, "max_epochs": 1},
        "cells": [{"name": "baseline"}, {"name": "decov", "decov_weight": 0.01}],
        "grid": {"decov_weight": [0.0, 0.01]},
    }
    path = tmp_path / "tiny.yaml"
    path.write_text(yaml.safe_dump(cfg))
    return path, tmp_path


def test_run_then_report(tiny_config, capsys):
    path, tmp = tiny_config
    assert cli.main(["run", str(path), "--seed", "1"]) == 0
    assert "pairs-mnist" in capsys.readouterr().out
    seeds = {p.name for p in (tmp / "out" / "runs" / "pairs-mnist").glob("*/*")}
    assert seeds == {"1"}
    assert cli.main(["report", str(tmp / "out")]) == 0
    assert (tmp / "out" / "report" / "pairs-mnist.csv").exists()


def test_out_and_data_dir_overrides(tiny_config, tmp_path):
    path, tmp = tiny_config
    assert cli.main(["run", str(path), "--seed", "0", "--out", str(tmp / "elsewhere")]) == 0
    assert (tmp / "elsewhere" / "report" / "pairs-mnist.csv").exists()
    assert cli.main(["run", str(path), "--data-dir", str(tmp / "void")]) == 2


def test_gridsearch_command(tiny_config, capsys):
    path, tmp = tiny_config
    assert cli.main(["gridsearch", str(path)]) == 0
    assert "selected" in capsys.readouterr().out


def test_config_error_exit_code(tmp_path, capsys):
    bad = tmp_path / "bad.yaml"
    bad.write_text("experiment: pairs-mnist\nmystery: 3\n")
    assert cli.main(["run", str(bad)]) == 1
    assert "unknown keys" in capsys.readouterr().err
    assert cli.main(["run", str(tmp_path / "missing.yaml")]) == 1


def test_empty_report_exit_code(tmp_path, capsys):
    assert cli.main(["report", str(tmp_path)]) == 2
    assert "no runs found" in capsys.readouterr().err


def test_divergence_exit_code(tiny_config):
    path, tmp = tiny_config
    cfg = yaml.safe_load(path.read_text())
    cfg["optim"]["learning_rate"] = 1e12
    cfg["optim"]["momentum"] = 0.0
    cfg["optim"]["max_epochs"] = 3
    path.write_text(yaml.safe_dump(cfg))
    with np.errstate(all="ignore"):
        assert cli.main(["run", str(path)]) == 3


def test_verify_command(capsys):
    assert cli.main(["verify", "--instances", "10"]) == 0
    out = capsys.readouterr().out
    assert "FAIL" not in out and out.count("PASS") >= 9


def test_console_entry_point():
    out = subprocess.run([sys.executable, "-m", "decov.cli", "--help"], capture_output=True, text=True)
    assert out.returncode == 0
    for cmd in ("run", "report", "gridsearch", "verify"):
        assert cmd in out.stdout
