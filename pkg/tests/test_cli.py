import json
import subprocess
import sys

import pytest

from fraug.cli import main
from fraug.config import dump_config
from tests.conftest import small_config


@pytest.fixture
def cfg_file(tmp_path):
    path = tmp_path / "cfg.json"
    dump_config(small_config(train__rounds=2), path)
    return path


def test_run_writes_outputs(tmp_path, cfg_file, capsys):
    out = tmp_path / "run"
    assert main(["run", "--config", str(cfg_file), "--out", str(out), "--strategy", "fedbn", "--seed", "0", "--seed", "1"]) == 0
    assert (out / "metrics" / "seed-0.csv").exists() and (out / "metrics" / "seed-1.csv").exists()
    summary = json.loads((out / "summary.json").read_text())
    assert summary["meta"]["strategy"] == "fedbn" and summary["meta"]["seeds"] == [0, 1]
    assert json.loads((out / "config.json").read_text())["strategy"]["name"] == "fedbn"
    assert (out / "checkpoints" / "seed-0" / "server_theta.fraug").exists()
    assert "fedbn" in capsys.readouterr().out


def test_rerun_is_byte_identical(tmp_path, cfg_file):
    for name in ("a", "b"):
        assert main(["run", "--config", str(cfg_file), "--out", str(tmp_path / name)]) == 0
    a, b = tmp_path / "a", tmp_path / "b"
    assert (a / "metrics.csv").read_bytes() == (b / "metrics.csv").read_bytes()
    assert (a / "checkpoints" / "seed-0" / "client0_rtnet.fraug").read_bytes() == (
        b / "checkpoints" / "seed-0" / "client0_rtnet.fraug"
    ).read_bytes()


def test_set_override_and_precision(tmp_path, cfg_file):
    out = tmp_path / "o"
    assert main(["run", "--config", str(cfg_file), "--out", str(out), "--set", "train.rounds=1", "--precision", "f64"]) == 0
    cfg = json.loads((out / "config.json").read_text())
    assert cfg["train"]["rounds"] == 1 and cfg["run"]["precision"] == "f64"


def test_config_errors_exit_2(tmp_path, cfg_file, capsys):
    assert main(["run", "--config", str(cfg_file), "--set", "train.nope=1"]) == 2
    assert "train.nope" in capsys.readouterr().err
    assert main(["run", "--config", str(cfg_file), "--set", "novalue"]) == 2
    assert main(["plot", str(tmp_path / "missing.csv"), str(tmp_path / "x.svg")]) == 2


def test_gradcheck_exit_codes(capsys):
    assert main(["gradcheck"]) == 0
    assert main(["gradcheck", "--corrupt", "layer/dense"]) == 1
    assert "layer/dense" in capsys.readouterr().err


def test_paramcount_and_plot(tmp_path, cfg_file, capsys):
    out = tmp_path / "p"
    assert main(["paramcount", "--out", str(out)]) == 0
    text = capsys.readouterr().out
    assert "overhead" in text and "never transmitted" in text
    assert json.loads((out / "paramcount.json").read_text())["overhead_ratio"] <= 0.05
    run = tmp_path / "r"
    main(["run", "--config", str(cfg_file), "--out", str(run)])
    assert main(["plot", str(run / "metrics.csv"), str(tmp_path / "fig.svg")]) == 0
    assert (tmp_path / "fig.csv").exists()


def test_headstudy_and_ablation_commands(tmp_path, cfg_file, capsys):
    out = tmp_path / "h"
    assert main(["headstudy", "--config", str(cfg_file), "--out", str(out), "--set", "headstudy.finetune_steps=5"]) == 0
    assert "delta" in json.dumps(json.loads((out / "headstudy.json").read_text()))
    assert main(["ablation", "--config", str(cfg_file), "--out", str(out), "--rows", "G,full", "--set", "train.rounds=1"]) == 0
    assert set(json.loads((out / "ablation.json").read_text())) == {"G", "full"}


def test_environment_override_via_subprocess(tmp_path, cfg_file):
    import os

    env = {**os.environ, "FRAUG_TRAIN__ROUNDS": "1"}
    out = tmp_path / "env"
    subprocess.run(
        [sys.executable, "-m", "fraug.cli", "run", "--config", str(cfg_file), "--out", str(out)],
        check=True,
        env=env,
        capture_output=True,
    )
    # the environment sits above the file and below explicit --set
    assert json.loads((out / "config.json").read_text())["train"]["rounds"] == 1
