import csv
import io
import json
import os
import sys

import numpy as np
import pytest
from rich.console import Console

BASE_DIR = os.path.abspath(os.path.join(os.path.dirname(__file__), "..", ".."))
sys.path.insert(0, os.path.join(BASE_DIR, "src"))
from pcp_mae import main as entry
from pcp_mae.cli.interface import CommandLineInterface, load_grid
from pcp_mae.config import Config
from pcp_mae.core.errors import ParseError
from pcp_mae.core.manifest import RunManifest
from pcp_mae.core.model import count_params
from pcp_mae.core.pointio import read_ply, read_ply_points, write_xyz
from pcp_mae.core.training import Pretrainer
from pcp_mae.core.types import PointCloud

TINY = dict(dim=24, encoder_depth=2, decoder_depth=1, heads=2, group_size=8, num_groups=4,
            num_points=32, pointnet_hidden=8, mlp_ratio=2, classifier_hidden=16, source_points=64,
            dataset_size=8, batch_size=4, finetune_batch_size=4, finetune_epochs=1, epochs=1,
            augmentations=[])


@pytest.fixture
def config_file(tmp_path):
    path = tmp_path / "tiny.json"
    path.write_text(json.dumps(TINY), encoding="utf-8")
    return str(path)


def run_cli(*argv):
    buffer = io.StringIO()
    code = CommandLineInterface(Console(file=buffer, width=200)).run(list(argv))
    return code, buffer.getvalue()


def test_pretrain_writes_manifest_csv_and_checkpoint(tmp_path, config_file):
    out = tmp_path / "run"
    code, _ = run_cli("pretrain", "--config", config_file, "--out", str(out), "--save-every", "1")
    assert code == 0
    manifest = RunManifest.load(out / "manifest.json")
    assert [r["epoch"] for r in manifest.rows] == [1]
    assert manifest.summary["num_masked"] == 2
    assert not (out / "manifest.json.partial").exists()
    assert (out / "checkpoints" / "final.ckpt").exists()
    assert (out / "checkpoints" / "epoch_0001.ckpt").exists()
    with open(out / "metrics.csv", newline="", encoding="utf-8") as f:
        assert next(csv.reader(f)) == ["epoch", "loss", "loss_pc", "loss_recon", "lr"]


def test_pretrain_is_reproducible(tmp_path, config_file):
    out = tmp_path / "run"
    run_cli("pretrain", "--config", config_file, "--out", str(out), "--seed", "3")
    first = RunManifest.load(out / "manifest.json").fingerprint()
    run_cli("pretrain", "--config", config_file, "--out", str(out), "--seed", "3")
    assert RunManifest.load(out / "manifest.json").fingerprint() == first


def test_zero_eta_records_reconstruction_only(tmp_path, config_file):
    out = tmp_path / "run"
    assert run_cli("pretrain", "--config", config_file, "--out", str(out), "--eta", "0")[0] == 0
    last = RunManifest.load(out / "manifest.json").rows[-1]
    assert last["loss"] == pytest.approx(last["loss_recon"], abs=1e-6)


@pytest.mark.parametrize("argv", [
    ["pretrain", "--out", "x", "--mask-ratio", "1.5"],
    ["pretrain", "--out", "x", "--target", "quaternion"],
    ["pretrain"],
    ["reconstruct", "--checkpoint", "c", "--input", "i", "--out", "o", "--mask-ratio", "-0.1"],
    ["unknown"],
])
def test_usage_errors_exit_2(argv, tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    code, _ = run_cli(*argv)
    assert code == 2


def test_runtime_failure_exits_1_with_panel(tmp_path):
    code, output = run_cli("reconstruct", "--checkpoint", str(tmp_path / "missing.ckpt"),
                           "--input", str(tmp_path / "missing.xyz"), "--out", str(tmp_path / "o"))
    assert code == 1
    assert "FileNotFoundError" in output


def test_leakage_exports_ply_and_baseline(tmp_path, config_file):
    out = tmp_path / "leak"
    code, _ = run_cli("leakage", "--config", config_file, "--out", str(out), "--epochs", "1")
    assert code == 0
    manifest = RunManifest.load(out / "manifest.json")
    assert all(r["num_visible"] == 0 for r in manifest.rows)
    assert manifest.summary["baseline_chamfer"] > 0
    cloud, colors = read_ply(manifest.outputs["reconstruction_0"])
    assert len(cloud) == 4 * 8 and colors is not None
    truth, _ = read_ply(manifest.outputs["ground_truth_0"])
    assert len(truth) == 32


def test_ablate_grid(tmp_path, config_file):
    grid = tmp_path / "grid.json"
    grid.write_text(json.dumps({"axes": {"mask_ratio": [0.25, 0.5], "stop_gradient": [True]}}),
                    encoding="utf-8")
    out = tmp_path / "ablate"
    code, _ = run_cli("ablate", "--config", config_file, "--grid", str(grid), "--out", str(out),
                      "--workers", "2")
    assert code == 0
    for index, masked in enumerate([1, 2]):
        manifest = RunManifest.load(out / f"cell_{index:03d}" / "manifest.json")
        assert manifest.summary["num_masked"] == masked
        assert np.isfinite(manifest.summary["loss"])
    with open(out / "ablation.csv", newline="", encoding="utf-8") as f:
        rows = list(csv.DictReader(f))
    assert [r["num_masked"] for r in rows] == ["1", "2"]


def test_grid_errors_name_the_cell(tmp_path, config_file):
    grid = tmp_path / "grid.json"
    grid.write_text(json.dumps({"cells": [{"eta": 0.1}, {"etta": 0.2}]}), encoding="utf-8")
    with pytest.raises(ParseError) as exc:
        load_grid(str(grid), {})
    assert exc.value.cell == 1
    code, output = run_cli("ablate", "--config", config_file, "--grid", str(grid), "--out", str(tmp_path / "a"))
    assert code == 1
    assert "cell 1" in output

    grid.write_text(json.dumps({"cells": [{"eta": 0.1}, {"mask_ratio": 2.0}]}), encoding="utf-8")
    code, output = run_cli("ablate", "--config", config_file, "--grid", str(grid), "--out", str(tmp_path / "b"))
    assert code == 1
    assert "cell 1" in output


def test_grid_cells_and_base(tmp_path):
    grid = tmp_path / "grid.json"
    grid.write_text(json.dumps({"base": {"epochs": 2}, "cells": [{"eta": 0.0}, {"eta": 1.0}]}),
                    encoding="utf-8")
    assert load_grid(str(grid), {}) == [{"epochs": 2, "eta": 0.0}, {"epochs": 2, "eta": 1.0}]


def test_finetune_from_scratch(tmp_path):
    config_file = tmp_path / "ft.json"
    config_file.write_text(json.dumps({**TINY, "dataset_size": 16}), encoding="utf-8")
    out = tmp_path / "ft"
    code, output = run_cli("finetune", "--config", str(config_file), "--scratch", "--out", str(out),
                           "--seeds", "0,1")
    assert code == 0
    manifest = RunManifest.load(out / "manifest.json")
    assert len(manifest.summary["accuracies"]) == 2
    assert "±" in output


def test_finetune_rejects_incompatible_checkpoint(tmp_path, config_file):
    ckpt = Pretrainer(Config(config_file)).save(tmp_path / "a.ckpt")
    other = tmp_path / "other.json"
    other.write_text(json.dumps({**TINY, "dim": 12}), encoding="utf-8")
    code, output = run_cli("finetune", "--config", str(other), "--checkpoint", ckpt, "--out", str(tmp_path / "ft"))
    assert code == 1
    assert "dim" in output and "24" in output and "12" in output


def test_finetune_uses_forward_settings_of_checkpoint(tmp_path):
    source = tmp_path / "full_dim.json"
    source.write_text(json.dumps({**TINY, "attention_scale": "full_dim", "decoder_pos_every_block": True}),
                      encoding="utf-8")
    ckpt = Pretrainer(Config(str(source))).save(tmp_path / "a.ckpt")
    plain = tmp_path / "plain.json"
    plain.write_text(json.dumps({**TINY, "dataset_size": 16}), encoding="utf-8")
    out = tmp_path / "ft"
    code, _ = run_cli("finetune", "--config", str(plain), "--checkpoint", ckpt, "--out", str(out), "--seeds", "0")
    assert code == 0
    config = RunManifest.load(out / "manifest.json").config
    assert config["attention_scale"] == "full_dim"
    assert config["decoder_pos_every_block"] is True


def _checkpoint_and_input(tmp_path, config_file, zero_head=False):
    trainer = Pretrainer(Config(config_file))
    if zero_head:
        trainer.weights.head.weight.data[:] = 0.0
        trainer.weights.head.bias.data[:] = 0.0
    ckpt = trainer.save(tmp_path / "model.ckpt")
    points = np.random.default_rng(0).normal(size=(64, 3))
    xyz = write_xyz(PointCloud(points), tmp_path / "input.xyz")
    return ckpt, xyz


def test_reconstruct_without_masking_returns_visible_set(tmp_path, config_file):
    ckpt, xyz = _checkpoint_and_input(tmp_path, config_file)
    out = tmp_path / "rec"
    code, _ = run_cli("reconstruct", "--checkpoint", ckpt, "--input", xyz, "--mask-ratio", "0", "--out", str(out))
    assert code == 0
    cloud, _ = read_ply(out / "input.ply")
    visible, _ = read_ply(out / "visible.ply")
    recon, _ = read_ply(out / "reconstruction.ply")
    assert len(cloud) == 32
    np.testing.assert_array_equal(recon.points, visible.points)


def test_reconstruct_with_everything_masked_writes_empty_visible_file(tmp_path, config_file):
    ckpt, xyz = _checkpoint_and_input(tmp_path, config_file)
    out = tmp_path / "rec"
    code, _ = run_cli("reconstruct", "--checkpoint", ckpt, "--input", xyz, "--mask-ratio", "1", "--out", str(out))
    assert code == 0
    visible, _ = read_ply_points(out / "visible.ply")
    assert visible.shape == (0, 3)
    recon, _ = read_ply(out / "reconstruction.ply")
    assert len(recon) == 4 * 8


def test_zero_head_reconstructs_masked_patches_at_centers(tmp_path, config_file):
    ckpt, xyz = _checkpoint_and_input(tmp_path, config_file, zero_head=True)
    out = tmp_path / "rec"
    code, _ = run_cli("reconstruct", "--checkpoint", ckpt, "--input", xyz, "--mask-ratio", "0.5", "--out", str(out))
    assert code == 0
    cloud, _ = read_ply(out / "input.ply")
    recon, colors = read_ply(out / "reconstruction.ply")
    red = recon.points[np.all(colors == [220, 60, 60], axis=1)]
    assert len(red) == 2 * 8
    # 予測がすべて 0 なので各点はパッチ中心 (入力点のどれか) に一致する
    assert len(np.unique(red, axis=0)) == 2
    for point in red:
        assert np.min(np.abs(cloud.points - point).sum(axis=1)) < 1e-6


def test_info_prints_counts(config_file):
    code, output = run_cli("info", "--config", config_file)
    assert code == 0
    config = Config(config_file)
    assert f"{count_params(config.model, True):,}" in output
    assert f"{count_params(config.model, False):,}" in output


def test_main_entry_returns_exit_code():
    assert entry.main(["info", "--preset", "full"]) == 0
    assert entry.main(["pretrain", "--mask-ratio", "2"]) == 2
