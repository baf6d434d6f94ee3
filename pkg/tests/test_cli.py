import csv
import json
import subprocess
import sys

import pytest

from crossvideo.cli import run, run_id
from crossvideo.datagen import load_dataset
from crossvideo.train import load_segmentation_model

from helpers import small_config

FAST = ["--set", "total_epochs=1", "--set", "warmup_epochs=0", "--set", "finetune.epochs=1"]


@pytest.fixture(scope="module")
def cfg_file(tmp_path_factory):
    path = tmp_path_factory.mktemp("cfg") / "c.json"
    doc = small_config().to_dict()
    doc["total_epochs"], doc["warmup_epochs"] = 1, 0
    path.write_text(json.dumps(doc))
    return path


def test_help_and_version(capsys):
    assert run(["--help"]) == 0
    assert "usage" in capsys.readouterr().out
    assert run(["--version"]) == 0
    assert run(["pretrain", "--help"]) == 0


def test_console_script_help():
    proc = subprocess.run([sys.executable, "-m", "crossvideo.cli", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0 and "datagen" in proc.stdout


def test_usage_errors(capsys):
    assert run(["frobnicate"]) == 1
    assert "invalid choice" in capsys.readouterr().err
    assert run([]) == 1
    assert run(["datagen", "--out", "x", "--sequences", "2", "--bogus"]) == 1
    assert run(["--threads", "0", "datagen", "--out", "x", "--sequences", "2"]) == 1


def test_validation_and_runtime_exit_codes(tmp_path, tiny_root, cfg_file):
    assert run(["datagen", "--out", str(tmp_path / "d"), "--sequences", "0"]) == 1
    assert run(["pretrain", "--data", str(tiny_root), "--out", str(tmp_path / "p"), "--set", "learning_rat=1"]) == 1
    bad = tmp_path / "bad.json"
    bad.write_text('{"temperature": "warm"}')
    assert run(["pretrain", "--config", str(bad), "--data", str(tiny_root), "--out", str(tmp_path / "p")]) == 1
    assert run(["finetune", "--data", str(tiny_root), "--out", str(tmp_path / "f"), "--mode", "full"]) == 1
    # missing dataset / corrupt checkpoint are runtime failures
    assert run(["pretrain", "--config", str(cfg_file), "--data", str(tmp_path / "nope"), "--out", str(tmp_path / "p")]) == 2
    junk = tmp_path / "junk.ckpt"
    junk.write_bytes(b"not a checkpoint")
    args = ["eval", "--checkpoint", str(junk), "--data", str(tiny_root), "--report", str(tmp_path / "r.json")]
    assert run(args) == 2


def test_datagen_dataset_is_loadable(tmp_path):
    out = tmp_path / "d"
    argv = ["--seed", "4", "datagen", "--out", str(out), "--sequences", "100", "--pretrain", "0",
            "--frames", "2", "--points", "8", "--image-size", "4", "4"]
    assert run(argv) == 0
    train, test = load_dataset(out, "train"), load_dataset(out, "test")
    assert len(train) + len(test) == 100 and len(load_dataset(out, "pretrain")) == 0
    assert train[0].points.frames.shape == (2, 8, 3)
    assert json.loads((out / "run.json").read_text())["seed"] == 4


def test_pretrain_finetune_eval_pipeline(tmp_path, tiny_root, cfg_file):
    pre = tmp_path / "pre"
    assert run(["pretrain", "--config", str(cfg_file), "--data", str(tiny_root), "--out", str(pre)]) == 0
    for name in ("config.json", "run.json", "state.ckpt", "model.ckpt", "loss_curve.csv"):
        assert (pre / name).exists(), name
    ft = tmp_path / "ft"
    argv = ["finetune", "--config", str(cfg_file), "--data", str(tiny_root), "--out", str(ft),
            "--mode", "linear", "--checkpoint", str(pre / "model.ckpt"), "--fraction", "0.5"]
    assert run(argv) == 0
    assert load_segmentation_model(ft / "segmentation.ckpt").task == "action"
    report = tmp_path / "report.json"
    argv = ["eval", "--config", str(cfg_file), "--checkpoint", str(ft / "segmentation.ckpt"),
            "--data", str(tiny_root), "--report", str(report)]
    assert run(argv) == 0
    body = json.loads(report.read_text())
    assert 0 <= body["accuracy"] <= 100 and len(body["config_echo"]["run_id"]) == 12
    assert run(argv[:-1] + [str(tmp_path / "r2.json")]) == 0
    assert json.loads((tmp_path / "r2.json").read_text())["accuracy"] == body["accuracy"]
    assert run(argv + ["--task", "semantic"]) == 1


def test_resume_through_cli(tmp_path, tiny_root, cfg_file):
    out = tmp_path / "pre"
    assert run(["pretrain", "--config", str(cfg_file), "--data", str(tiny_root), "--out", str(out)]) == 0
    argv = ["pretrain", "--config", str(cfg_file), "--set", "total_epochs=2", "--data", str(tiny_root),
            "--out", str(out), "--resume", str(out / "state.ckpt")]
    assert run(argv) == 0
    assert len((out / "loss_curve.csv").read_text().splitlines()) == 3


def test_ablate_writes_csv(tmp_path, tiny_root, cfg_file):
    out = tmp_path / "abl.csv"
    argv = ["ablate", "--config", str(cfg_file), "--disable", "cross_video", "--data", str(tiny_root), "--out", str(out)]
    assert run(argv) == 0
    rows = list(csv.DictReader(out.open()))
    assert [r["id"] for r in rows] == ["full-s0", "no-cross_video-s0", "scratch-s0"]
    assert rows[1]["disabled"] == "cross_video"
    assert run(argv[:-2] + ["--out", str(out), "--disable", "crossvideo"]) == 1


def test_sweep_writes_csv(tmp_path, tiny_root, cfg_file):
    out = tmp_path / "sweep.csv"
    argv = ["sweep", "--config", str(cfg_file), "--data", str(tiny_root), "--out", str(out),
            "--fractions", "0.5,1", "--seeds", "0", "--set", "finetune.epochs=1"]
    assert run(argv) == 0
    rows = list(csv.DictReader(out.open()))
    assert len(rows) == 4 and {r["init"] for r in rows} == {"scratch", "pretrained"}
    assert run(argv[:6] + ["--fractions", "0,1"]) == 1


def test_run_id_is_stable():
    assert run_id("x", {"a": 1, "b": 2}) == run_id("x", {"b": 2, "a": 1})
    assert run_id("x", {"a": 1}) != run_id("y", {"a": 1})
