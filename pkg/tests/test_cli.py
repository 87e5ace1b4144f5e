import json

import numpy as np
import pytest

import pvaseg.cli as cli
from pvaseg.cli import main
from pvaseg.phantom import PhantomSpec
from pvaseg.pipeline import build_phantom_dataset
from pvaseg.volgrid import read_volume


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli_data")
    spec = PhantomSpec(dims=(32, 32, 32), n_main_branches=2,
                       bifurcation_depth=1)
    build_phantom_dataset(d, 3, 0.2429, rng_seed=5, spec=spec)
    return d


@pytest.fixture(scope="module")
def config_file(tmp_path_factory, dataset):
    path = tmp_path_factory.mktemp("cfg") / "experiment.json"
    path.write_text(json.dumps({
        "data_dir": str(dataset), "out_dir": "PLACEHOLDER",
        "patch_size_sl": [8, 8, 8], "patch_size_sg": [16, 16, 16],
        "widths_sl": [3, 3], "widths_sg": [4, 4], "sl_epochs": 3,
        "sl_patches_per_volume": 2, "sg_patches_per_volume": 1,
        "warmup_epochs": 1, "self_training_rounds": 1, "epochs_per_round": 1,
        "fpa_steps": 10, "fusion": "mean", "rng_seed": 0}))
    return path


@pytest.fixture(scope="module")
def trained(tmp_path_factory, config_file):
    out = tmp_path_factory.mktemp("cli_run")
    rc = main(["train", "--config", str(config_file), "--seed", "1",
               "--out", str(out)])
    assert rc == 0
    return out


# ------------------------------------------------------------------- basics

def test_help_exits_zero():
    assert main(["--help"]) == 0


def test_missing_command_exits_two():
    assert main([]) == 2


def test_unknown_command_exits_two():
    assert main(["frobnicate"]) == 2


# -------------------------------------------------------------- gen-phantom

def test_gen_phantom_writes_subjects(tmp_path, capsys):
    d = tmp_path / "ds"
    rc = main(["gen-phantom", "--out", str(d), "--n", "2",
               "--fraction", "0.3", "--seed", "3"])
    assert rc == 0
    out = capsys.readouterr().out
    assert "subj_000: labeled fraction" in out
    for sid in ("subj_000", "subj_001"):
        for name in ("image.vvol", "gt.vvol", "pva.vvol", "tree.json"):
            assert (d / sid / name).exists()
    assert (d / "manifest.json").exists()


def test_gen_phantom_rerun_identical(tmp_path):
    d = tmp_path / "ds"
    args = ["gen-phantom", "--out", str(d), "--n", "1",
            "--fraction", "0.25", "--seed", "4"]
    assert main(args) == 0
    first = (d / "subj_000" / "image.vvol").read_bytes()
    assert main(args) == 0
    assert (d / "subj_000" / "image.vvol").read_bytes() == first


def test_gen_phantom_bad_fraction_exits_two(tmp_path):
    assert main(["gen-phantom", "--out", str(tmp_path / "x"),
                 "--n", "1", "--fraction", "1.5"]) == 2


def test_gen_phantom_refuses_mismatched_dir(tmp_path):
    d = tmp_path / "ds"
    assert main(["gen-phantom", "--out", str(d), "--n", "1",
                 "--fraction", "0.25", "--seed", "4"]) == 0
    # different flags hit the same directory
    clash = ["gen-phantom", "--out", str(d), "--n", "1",
             "--fraction", "0.5", "--seed", "4"]
    assert main(clash) == 2
    assert main(clash + ["--force"]) == 0
    man = json.loads((d / "manifest.json").read_text())
    assert man["labeled_fraction"] == 0.5


# -------------------------------------------------------------------- train

def test_train_writes_resolved_config(trained, config_file):
    cfg = json.loads((trained / "config.json").read_text())
    assert cfg["rng_seed"] == 1  # CLI flag beat the file value 0
    assert cfg["fusion"] == "mean"  # file value beat the default "max"
    assert cfg["out_dir"] == str(trained)
    assert (trained / "report.json").exists()
    assert (trained / "checkpoints" / "final.ckpt").exists()


def test_train_rerun_is_idempotent(trained, config_file):
    before = (trained / "report.json").read_bytes()
    rc = main(["train", "--config", str(config_file), "--seed", "1",
               "--out", str(trained)])
    assert rc == 0
    assert (trained / "report.json").read_bytes() == before


def test_train_conflicting_config_exits_two(trained, config_file):
    rc = main(["train", "--config", str(config_file), "--seed", "2",
               "--out", str(trained)])
    assert rc == 2


def test_train_flag_overrides(tmp_path, config_file):
    out = tmp_path / "ovr"
    rc = main(["train", "--config", str(config_file), "--seed", "1",
               "--out", str(out), "--rounds", "0", "--epochs", "2",
               "--fusion", "conv_only", "--no-plu", "--no-fpa"])
    assert rc == 0
    cfg = json.loads((out / "config.json").read_text())
    assert cfg["self_training_rounds"] == 0
    assert cfg["epochs_per_round"] == 2
    assert cfg["fusion"] == "conv_only"
    assert cfg["use_plu"] is False and cfg["use_fpa"] is False
    assert cfg["use_pli"] is True


def test_train_missing_config_file_exits_two(tmp_path):
    assert main(["train", "--config", str(tmp_path / "nope.json"),
                 "--out", str(tmp_path / "o")]) == 2


def test_train_malformed_config_exits_two(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert main(["train", "--config", str(bad),
                 "--out", str(tmp_path / "o")]) == 2


def test_train_unknown_config_key_exits_two(tmp_path, dataset):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"data_dir": str(dataset),
                               "out_dir": str(tmp_path / "o"),
                               "momentum": 0.9}))
    assert main(["train", "--config", str(bad)]) == 2


# ------------------------------------------------------------------ predict

def test_predict_writes_masks(trained, dataset, tmp_path, capsys):
    out = tmp_path / "preds"
    image = dataset / "subj_002" / "image.vvol"
    rc = main(["predict", str(trained), str(image), "--out", str(out)])
    assert rc == 0
    mask = read_volume(out / "subj_002_mask.vvol")
    assert mask.role == "mask"
    assert set(np.unique(mask.data)) <= {0, 1}
    assert "foreground voxels" in capsys.readouterr().out
    # a second run needs --force
    assert main(["predict", str(trained), str(image),
                 "--out", str(out)]) == 2
    assert main(["predict", str(trained), str(image), "--out", str(out),
                 "--force"]) == 0


def test_predict_missing_experiment_exits_two(tmp_path, dataset):
    image = dataset / "subj_002" / "image.vvol"
    rc = main(["predict", str(tmp_path / "ghost"), str(image),
               "--out", str(tmp_path / "p")])
    assert rc == 2


# ----------------------------------------------------------------- evaluate

def test_evaluate_reports(trained, dataset, tmp_path, capsys):
    preds = tmp_path / "preds"
    image = dataset / "subj_002" / "image.vvol"
    assert main(["predict", str(trained), str(image),
                 "--out", str(preds)]) == 0
    out = tmp_path / "eval"
    rc = main(["evaluate", str(preds), str(dataset), "--out", str(out)])
    assert rc == 0
    report = json.loads((out / "report.json").read_text())
    assert report["per_volume"][0]["id"] == "subj_002"
    assert (out / "report.csv").exists()
    assert "dice" in capsys.readouterr().out
    assert main(["evaluate", str(preds), str(dataset),
                 "--out", str(out)]) == 2  # overwrite needs --force


def test_evaluate_unmatched_prediction_exits_two(trained, dataset, tmp_path):
    preds = tmp_path / "preds"
    preds.mkdir()
    src = dataset / "subj_000" / "gt.vvol"
    (preds / "subj_999_mask.vvol").write_bytes(src.read_bytes())
    assert main(["evaluate", str(preds), str(dataset),
                 "--out", str(tmp_path / "e")]) == 2


def test_evaluate_empty_dir_exits_two(dataset, tmp_path):
    empty = tmp_path / "empty"
    empty.mkdir()
    assert main(["evaluate", str(empty), str(dataset),
                 "--out", str(tmp_path / "e")]) == 2


# ------------------------------------------------------------------- ablate

def test_ablate_prints_table_in_order(config_file, tmp_path, capsys):
    out = tmp_path / "abl"
    rc = main(["ablate", "--config", str(config_file), "--n", "1",
               "--seed", "1", "--out", str(out), "--rounds", "1",
               "--epochs", "1"])
    assert rc == 0
    lines = [ln for ln in capsys.readouterr().out.splitlines() if ln]
    rows = [ln.split()[0] for ln in lines[1:5]]
    assert rows == ["baseline", "+PLI", "+PLI+PLU", "+PLI+PLU+FPA"]
    table = json.loads((out / "ablation.json").read_text())
    assert table["seeds"] == [1]
    # rerun resumes from the finished runs and lands on identical values
    first = (out / "ablation.json").read_bytes()
    assert main(["ablate", "--config", str(config_file), "--n", "1",
                 "--seed", "1", "--out", str(out), "--rounds", "1",
                 "--epochs", "1"]) == 0
    assert (out / "ablation.json").read_bytes() == first


# --------------------------------------------------------------- grad-check

def test_grad_check_healthy(capsys):
    assert main(["grad-check"]) == 0
    lines = [ln for ln in capsys.readouterr().out.splitlines() if ln]
    names = {ln.split()[0] for ln in lines}
    assert {"conv1", "conv2", "head", "fpa.rho"} <= names
    assert all(ln.endswith("ok") for ln in lines)


def test_grad_check_failure_exits_one(monkeypatch, capsys):
    def broken(model, patch, loss_fn=None, eps=1e-3, tol=1e-3):
        return {"conv1": {"max_rel_err": 0.5, "status": "fail"}}

    monkeypatch.setattr(cli, "grad_check", broken)
    assert main(["grad-check"]) == 1
    assert "fail" in capsys.readouterr().out
