import csv
import filecmp
import os
import subprocess
import sys

import numpy as np
import pytest

from fmdacl import config as config_mod
from fmdacl.config import (SCHEMA, SEED_ENV_VAR, format_config,
                           parse_assignments, resolve_config,
                           to_backbone_spec, to_policy, to_train_config)
from fmdacl.data import read_mask


# ----------------------------------------------------------------- schema

def test_defaults_cover_every_key():
    cfg = resolve_config(env={})
    assert set(cfg) == set(SCHEMA)
    assert cfg["train.epochs"] == 300
    assert cfg["loss.lambda_cps"] == 5.0
    assert cfg["loss.tau_ict"] == 1.0
    assert cfg["loss.beta_dac"] == 5.0
    assert cfg["train.batch_labeled"] == 1
    assert cfg["train.batch_unlabeled"] == 4
    assert cfg["aug.target_size"] == 256


def test_parse_assignments_comments_and_blanks():
    raw = parse_assignments([
        "# a comment",
        "",
        "train.epochs = 7   # trailing comment",
        "aug.hflip_prob=0.25",
    ])
    assert raw == {"train.epochs": "7", "aug.hflip_prob": "0.25"}


def test_unknown_key_rejected_by_path():
    with pytest.raises(ValueError, match="unknown config key 'train.lr'"):
        parse_assignments(["train.lr=1e-3"], source="f.cfg")


def test_duplicate_key_rejected_with_line():
    with pytest.raises(ValueError, match="f.cfg:3: duplicate config key 'train.seed'"):
        parse_assignments(["train.seed=1", "", "train.seed=2"], source="f.cfg")


def test_missing_equals_rejected():
    with pytest.raises(ValueError, match="expected key=value"):
        parse_assignments(["train.seed"])


def test_coercion_error_names_the_key():
    with pytest.raises(ValueError, match="config key 'train.epochs'"):
        resolve_config(overrides={"train.epochs": "many"}, env={})


def test_bool_coercion_words():
    cfg = resolve_config(overrides={"train.cosine_lr": "yes",
                                    "train.sample_sigma": "off"}, env={})
    assert cfg["train.cosine_lr"] is True
    assert cfg["train.sample_sigma"] is False
    with pytest.raises(ValueError, match="expected a boolean"):
        resolve_config(overrides={"train.cosine_lr": "maybe"}, env={})


def test_unknown_override_key_rejected():
    with pytest.raises(ValueError, match="unknown config key 'loss.gamma'"):
        resolve_config(overrides={"loss.gamma": "1"}, env={})


def test_file_then_override_then_env_precedence(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("train.seed=11\ntrain.epochs=5\n", encoding="utf-8")
    cfg = resolve_config(str(path), env={})
    assert cfg["train.seed"] == 11 and cfg["train.epochs"] == 5
    cfg = resolve_config(str(path), overrides={"train.seed": "22"}, env={})
    assert cfg["train.seed"] == 22
    cfg = resolve_config(str(path), overrides={"train.seed": "22"},
                         env={SEED_ENV_VAR: "33"})
    assert cfg["train.seed"] == 33
    assert cfg["train.epochs"] == 5  # env touches only the seed


def test_format_config_round_trip(tmp_path):
    cfg = resolve_config(overrides={"train.epochs": "4", "aug.hflip_prob": "0.75",
                                    "train.cosine_lr": "true"}, env={})
    path = tmp_path / "echo.cfg"
    path.write_text(format_config(cfg), encoding="utf-8")
    again = resolve_config(str(path), env={})
    assert again == cfg


def test_to_train_config_and_spec_mapping():
    cfg = resolve_config(overrides={"train.epochs": "9", "loss.lambda_cps": "2.5",
                                    "model.f1.width": "8", "model.f1.patch": "2",
                                    "model.c_seg": "5", "model.k_cls": "3",
                                    "aug.target_size": "32"}, env={})
    tc = to_train_config(cfg)
    assert tc.epochs == 9 and tc.lambda_cps == 2.5
    s1 = to_backbone_spec(cfg, "f1")
    assert s1.kind == "patch_attention" and s1.width == 8
    assert s1.patch == 2 and s1.c_seg == 5 and s1.k_cls == 3
    s2 = to_backbone_spec(cfg, "f2")
    assert s2.kind == "conv_unet" and s2.c_seg == 5
    with pytest.raises(ValueError, match="role"):
        to_backbone_spec(cfg, "f3")
    pol = to_policy(cfg)
    assert pol.target_size == (32, 32)


# ----------------------------------------------------------------- CLI

def run_cli(*argv, env_extra=None, cwd=None):
    env = dict(os.environ)
    env.pop(SEED_ENV_VAR, None)
    env.update(env_extra or {})
    return subprocess.run([sys.executable, "-m", "fmdacl.cli", *argv],
                          capture_output=True, text=True, env=env, cwd=cwd)


def tree_files(root):
    out = {}
    for base, _dirs, files in os.walk(root):
        for f in files:
            p = os.path.join(base, f)
            out[os.path.relpath(p, root)] = p
    return out


TRAIN_SETS = ["--set", "train.epochs=2", "--set", "aug.target_size=16",
              "--set", "model.f1.width=8", "--set", "model.f1.patch=2",
              "--set", "model.f2.width=8", "--set", "model.f2.depth=2",
              "--set", "model.f1.depth=2"]


@pytest.fixture(scope="module")
def cli_ds(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli") / "ds"
    res = run_cli("gen-data", "--n", "12", "--size", "16", "--seed", "3",
                  "--out", str(root))
    assert res.returncode == 0, res.stderr
    return str(root)


@pytest.fixture(scope="module")
def cli_run(cli_ds, tmp_path_factory):
    out = tmp_path_factory.mktemp("cli") / "run"
    res = run_cli("train", "--data", cli_ds, "--out", str(out), *TRAIN_SETS)
    assert res.returncode == 0, res.stderr
    return str(out)


def test_gen_data_reports_split_counts(cli_ds):
    res = run_cli("gen-data", "--n", "12", "--size", "16", "--seed", "3",
                  "--out", os.path.join(os.path.dirname(cli_ds), "ds_again"))
    assert res.returncode == 0
    assert "wrote 12 images" in res.stdout
    assert "labeled: 2" in res.stdout and "unlabeled: 8" in res.stdout


def test_gen_data_rerun_is_byte_identical(cli_ds):
    other = os.path.join(os.path.dirname(cli_ds), "ds_rerun")
    res = run_cli("gen-data", "--n", "12", "--size", "16", "--seed", "3",
                  "--out", other)
    assert res.returncode == 0
    a, b = tree_files(cli_ds), tree_files(other)
    assert set(a) == set(b) and a
    for rel in a:
        assert filecmp.cmp(a[rel], b[rel], shallow=False), rel


def test_gen_data_env_seed_override(cli_ds, tmp_path):
    via_env = tmp_path / "ds_env"
    res = run_cli("gen-data", "--n", "12", "--size", "16", "--seed", "999",
                  "--out", str(via_env), env_extra={SEED_ENV_VAR: "3"})
    assert res.returncode == 0
    a, b = tree_files(cli_ds), tree_files(str(via_env))
    assert set(a) == set(b)
    for rel in a:
        assert filecmp.cmp(a[rel], b[rel], shallow=False), rel


def test_train_writes_metrics_and_checkpoints(cli_run):
    with open(os.path.join(cli_run, "metrics.csv"), newline="") as fh:
        rows = list(csv.reader(fh))
    assert rows[0][0] == "epoch" and len(rows) == 3  # header + 2 epochs
    assert [r[0] for r in rows[1:]] == ["1", "2"]
    assert os.path.exists(os.path.join(cli_run, "best.ckpt"))
    assert os.path.exists(os.path.join(cli_run, "last.ckpt"))


def test_train_echoes_resolved_config(cli_run):
    path = os.path.join(cli_run, "config.resolved.txt")
    cfg = resolve_config(path, env={})
    assert cfg["train.epochs"] == 2
    assert cfg["model.f1.width"] == 8
    assert cfg["run.out"] == cli_run


def test_train_missing_data_errors():
    res = run_cli("train", "--out", "/tmp/nowhere")
    assert res.returncode == 1
    assert res.stderr.strip().splitlines()[-1].startswith("error: no dataset root")


def test_train_unknown_set_key_errors(cli_ds, tmp_path):
    res = run_cli("train", "--data", cli_ds, "--out", str(tmp_path / "r"),
                  "--set", "train.turbo=1")
    assert res.returncode == 1
    assert "error:" in res.stderr and "train.turbo" in res.stderr


def test_eval_writes_report_csv(cli_run, cli_ds):
    res = run_cli("eval", "--checkpoint", os.path.join(cli_run, "best.ckpt"),
                  "--data", cli_ds, "--split", "val")
    assert res.returncode == 0, res.stderr
    assert "eval[val]" in res.stdout
    out_csv = os.path.join(cli_run, "eval_val.csv")
    assert os.path.exists(out_csv)
    with open(out_csv, newline="") as fh:
        rows = list(csv.reader(fh))
    assert rows[0][:2] == ["id", "dsc"]
    assert len(rows) >= 2


def test_eval_rejects_unlabeled_split(cli_run, cli_ds):
    res = run_cli("eval", "--checkpoint", os.path.join(cli_run, "best.ckpt"),
                  "--data", cli_ds, "--split", "unlabeled")
    assert res.returncode == 2  # argparse: not a valid choice
    res = run_cli("eval", "--checkpoint", os.path.join(cli_run, "missing.ckpt"),
                  "--data", cli_ds)
    assert res.returncode == 1
    assert res.stderr.strip().splitlines()[-1].startswith("error:")


def test_predict_round_trip(cli_run, cli_ds, tmp_path):
    out = tmp_path / "pred"
    res = run_cli("predict", "--checkpoint", os.path.join(cli_run, "best.ckpt"),
                  "--images", cli_ds, "--out", str(out))
    assert res.returncode == 0, res.stderr
    masks = sorted(os.listdir(out / "masks"))
    assert len(masks) == 12  # dataset root -> its images/ subdir
    m = read_mask(str(out / "masks" / masks[0]))
    assert m.shape == (16, 16) and m.max() < 15
    with open(out / "labels.csv", newline="") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["id"] + [f"c{k}" for k in range(7)]
    assert len(rows) == 13
    vals = np.array([[int(v) for v in r[1:]] for r in rows[1:]])
    assert ((vals == 0) | (vals == 1)).all()

    again = tmp_path / "pred2"
    res = run_cli("predict", "--checkpoint", os.path.join(cli_run, "best.ckpt"),
                  "--images", cli_ds, "--out", str(again))
    assert res.returncode == 0
    a, b = tree_files(str(out)), tree_files(str(again))
    assert set(a) == set(b)
    for rel in a:
        assert filecmp.cmp(a[rel], b[rel], shallow=False), rel


def test_stop_after_then_resume_matches_straight_run(cli_ds, tmp_path):
    staged = tmp_path / "staged"
    res = run_cli("train", "--data", cli_ds, "--out", str(staged), *TRAIN_SETS,
                  "--stop-after", "1")
    assert res.returncode == 0, res.stderr
    res = run_cli("train", "--data", cli_ds, "--out", str(staged), *TRAIN_SETS,
                  "--resume", str(staged / "last.ckpt"))
    assert res.returncode == 0, res.stderr
    straight = tmp_path / "straight"
    res = run_cli("train", "--data", cli_ds, "--out", str(straight), *TRAIN_SETS)
    assert res.returncode == 0, res.stderr
    with open(staged / "metrics.csv", "rb") as fh:
        staged_bytes = fh.read()
    with open(straight / "metrics.csv", "rb") as fh:
        straight_bytes = fh.read()
    assert staged_bytes == straight_bytes
