import csv
import os
import sys

import pytest

BASE_DIR = os.path.abspath(os.path.join(os.path.dirname(__file__), "..", ".."))
sys.path.insert(0, os.path.join(BASE_DIR, "src"))
from pcp_mae.core.errors import ContractError
from pcp_mae.core.manifest import RunManifest, write_table


def row(epoch, loss=1.0):
    return {"epoch": epoch, "loss": loss, "loss_pc": 0.5, "loss_recon": 0.5, "lr": 1e-3, "grad_norm": 2.0}


def test_rows_must_increase():
    manifest = RunManifest("pretrain", {"dim": 24}, 0)
    manifest.add_row(row(1))
    manifest.add_row(row(2))
    with pytest.raises(ContractError):
        manifest.add_row(row(2))
    with pytest.raises(ContractError):
        manifest.add_row({"loss": 1.0})


def test_partial_flush_then_finalize(tmp_path):
    path = tmp_path / "manifest.json"
    manifest = RunManifest("pretrain", {"dim": 24}, 0)
    manifest.add_row(row(1))
    manifest.flush_partial(path)
    assert (tmp_path / "manifest.json.partial").exists()
    assert not path.exists()
    manifest.finalize(path)
    assert path.exists()
    assert not (tmp_path / "manifest.json.partial").exists()
    loaded = RunManifest.load(path)
    assert loaded.rows == manifest.rows
    assert loaded.finished_at == manifest.finished_at


def test_csv_header_and_rows(tmp_path):
    manifest = RunManifest("pretrain", {}, 0)
    manifest.add_row(row(1, 2.0))
    manifest.add_row(row(2, 1.0))
    path = manifest.write_csv(tmp_path / "metrics.csv")
    with open(path, newline="", encoding="utf-8") as f:
        lines = list(csv.reader(f))
    assert lines[0] == ["epoch", "loss", "loss_pc", "loss_recon", "lr"]
    assert [line[0] for line in lines[1:]] == ["1", "2"]


def test_write_table_fills_missing_columns(tmp_path):
    path = write_table([{"cell": "a", "loss": 1.0}, {"cell": "b"}], tmp_path / "t.csv", ["cell", "loss"])
    with open(path, newline="", encoding="utf-8") as f:
        lines = list(csv.reader(f))
    assert lines == [["cell", "loss"], ["a", "1.0"], ["b", ""]]


def test_fingerprint_ignores_timestamps():
    a = RunManifest("pretrain", {"dim": 24}, 0, rows=[row(1)])
    b = RunManifest("pretrain", {"dim": 24}, 0, rows=[row(1)])
    b.started_at = b.started_at.replace(year=2001)
    assert a.fingerprint() == b.fingerprint()
    b.rows[0]["loss"] = 2.0
    assert a.fingerprint() != b.fingerprint()
