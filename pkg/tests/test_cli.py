import argparse
import json
import os

import pytest
import yaml

from labelbridge import load_codebook
from labelbridge.cli import (
    _parse_fraction,
    _parse_ints,
    _parse_pair,
    _parse_shape,
    run_cli,
)


def read_json(path):
    with open(path) as fh:
        return json.load(fh)


def read_jsonl(path):
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


def test_parsers():
    assert _parse_fraction("8/255") == 8 / 255
    assert _parse_fraction("0.05") == 0.05
    assert _parse_shape("3x32x32") == (3, 32, 32)
    assert _parse_ints("1,4") == (1, 4)
    assert _parse_pair("-1,1") == (-1.0, 1.0)
    with pytest.raises(argparse.ArgumentTypeError):
        _parse_shape("32x32")
    with pytest.raises(argparse.ArgumentTypeError):
        _parse_pair("1")


def test_usage_exit_codes(capsys):
    assert run_cli(["--help"]) == 0
    assert run_cli(["--version"]) == 0
    assert run_cli([]) == 2  # missing subcommand
    assert run_cli(["eval"]) == 2  # missing required --checkpoint
    assert run_cli(["definitely-not-a-command"]) == 2
    capsys.readouterr()


def test_runtime_errors_exit_one(tmp_path, capsys):
    assert run_cli(["eval", "--checkpoint", str(tmp_path / "nope.pt")]) == 1
    assert "error:" in capsys.readouterr().err
    assert run_cli(["gen-labels", "--classes", "20", "--shape", "1x4x4",
                    "--out", str(tmp_path / "cb.bin")]) == 1
    assert "error:" in capsys.readouterr().err
    assert run_cli(["report", "--run", str(tmp_path / "norun"), "--plots"]) == 1
    capsys.readouterr()


def test_gen_labels_deterministic_bytes(tmp_path, capsys):
    a, b = str(tmp_path / "a.bin"), str(tmp_path / "b.bin")
    assert run_cli(["gen-labels", "--classes", "4", "--shape", "1x8x8", "--out", a]) == 0
    assert run_cli(["gen-labels", "--classes", "4", "--shape", "1x8x8", "--out", b]) == 0
    assert open(a, "rb").read() == open(b, "rb").read()
    cb = load_codebook(a)
    assert cb.num_classes == 4 and cb.label_shape == (1, 8, 8)
    out = capsys.readouterr().out
    assert "4 labels" in out and a in out


def test_gen_labels_honors_output_root_env(tmp_path, monkeypatch, capsys):
    monkeypatch.setenv("LABELBRIDGE_OUT", str(tmp_path / "outroot"))
    assert run_cli(["gen-labels", "--classes", "2", "--shape", "1x8x8"]) == 0
    assert os.path.exists(tmp_path / "outroot" / "labels.bin")
    capsys.readouterr()


def test_param_count_stdout(capsys):
    assert run_cli(["param-count", "--cm", "64", "--u", "1,4"]) == 0
    out = capsys.readouterr().out
    assert "9013443 trainable parameters (9.01M)" in out


@pytest.fixture()
def train_yaml(tmp_path):
    doc = {
        "data": {"name": "shapes-2", "resolution": 8, "channels": 1,
                 "train_count": 24, "test_count": 8},
        "predictor": {"model_channels": 8, "channel_multipliers": [1], "res_blocks": 1,
                      "in_channels": 1, "out_channels": 1, "base_resolution": 8},
        "train_steps": 5,
        "batch_size": 8,
        "learning_rate": 0.001,
        "log_every": 1,
    }
    path = str(tmp_path / "train.yaml")
    with open(path, "w") as fh:
        yaml.safe_dump(doc, fh)
    return path


def test_full_pipeline_through_the_cli(tmp_path, train_yaml, capsys):
    train_dir = str(tmp_path / "train")
    assert run_cli(["train", "--config", train_yaml, "--out", train_dir]) == 0
    assert "trained 5 steps" in capsys.readouterr().out
    ckpt = os.path.join(train_dir, "checkpoint.pt")
    assert os.path.exists(ckpt)
    meta = read_json(os.path.join(train_dir, "config.json"))
    assert meta["config"]["train_steps"] == 5
    assert len(read_jsonl(os.path.join(train_dir, "metrics.jsonl"))) == 5

    eval_dir = str(tmp_path / "eval")
    assert run_cli(["eval", "--checkpoint", ckpt, "--limit", "4", "--out", eval_dir]) == 0
    rep = read_json(os.path.join(eval_dir, "report.json"))
    assert rep["n_samples"] == 4 and rep["split"] == "test" and rep["votes"] == 1
    assert 0.0 <= rep["clean_accuracy"] <= 1.0
    assert rep["code_version"]
    records = read_jsonl(os.path.join(eval_dir, "records.jsonl"))
    assert len(records) == 4
    assert all(len(r["distances"]) == 2 and r["agreement"] == 1.0 for r in records)

    vote_dir = str(tmp_path / "eval-votes")
    assert run_cli(["eval", "--checkpoint", ckpt, "--limit", "2", "--votes", "3",
                    "--out", vote_dir]) == 0
    for rec in read_jsonl(os.path.join(vote_dir, "records.jsonl")):
        assert 1 / 3 - 1e-9 <= rec["agreement"] <= 1.0

    att_dir = str(tmp_path / "attack")
    assert run_cli(["attack", "--checkpoint", ckpt, "--family", "fgsm",
                    "--epsilon", "8/255", "--limit", "4", "--out", att_dir]) == 0
    rep = read_json(os.path.join(att_dir, "report.json"))
    assert rep["robust_accuracy"] <= rep["clean_accuracy"]
    assert rep["attack_config"]["steps"] == 1  # resolved fgsm default
    for rec in read_jsonl(os.path.join(att_dir, "records.jsonl")):
        assert rec["linf_pixel"] <= 8 / 255 + 1e-8

    capsys.readouterr()
    assert run_cli(["report", "--run", train_dir, "--plots", "--grid"]) == 0
    out = capsys.readouterr().out
    assert "run:" in out and "shapes-2" in out
    assert os.path.exists(os.path.join(train_dir, "curves.png"))
    assert os.path.exists(os.path.join(train_dir, "grid.png"))


def test_train_flags_override_yaml(tmp_path, train_yaml, capsys):
    d = str(tmp_path / "train2")
    assert run_cli(["train", "--config", train_yaml, "--steps", "2",
                    "--alpha", "0.0", "--out", d]) == 0
    meta = read_json(os.path.join(d, "config.json"))
    assert meta["config"]["train_steps"] == 2
    assert meta["config"]["alpha"] == 0.0
    capsys.readouterr()


def test_attack_yaml_config_with_flag_override(tmp_path, train_yaml, capsys):
    d = str(tmp_path / "train3")
    assert run_cli(["train", "--config", train_yaml, "--steps", "2", "--out", d]) == 0
    atk = str(tmp_path / "attack.yaml")
    with open(atk, "w") as fh:
        yaml.safe_dump({"family": "pgd", "epsilon": 0.05, "steps": 2}, fh)
    out_dir = str(tmp_path / "attack3")
    assert run_cli(["attack", "--checkpoint", os.path.join(d, "checkpoint.pt"),
                    "--config", atk, "--steps", "3", "--limit", "2",
                    "--out", out_dir]) == 0
    rep = read_json(os.path.join(out_dir, "report.json"))
    assert rep["attack_config"]["family"] == "pgd"
    assert rep["attack_config"]["epsilon"] == 0.05
    assert rep["attack_config"]["steps"] == 3  # the flag wins over the file
    capsys.readouterr()
