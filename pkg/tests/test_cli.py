import csv
import hashlib
import json
import shutil
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest
from PIL import Image

from orthoct.cli import PNG_WINDOW, main, window_to_uint8
from orthoct.data import load_volume

SMALL = ["--dims", "16", "16", "16"]
TINY_NETS = [
    "--set", "stage1.coarse_net.levels=2",
    "--set", "stage1.coarse_net.base_channels=4",
    "--set", "stage2.coarse_net.levels=2",
    "--set", "stage2.refine_net.levels=2",
    "--set", "stage2.refine_net.base_channels=4",
    "--set", "stage2.steps_per_epoch=1",
]  # fmt: skip


def _content(p: Path) -> bytes:
    if p.name == "manifest.json":
        meta = json.loads(p.read_text())
        meta["meta"].pop("coarse_checkpoint", None)  # an absolute path, differs per run directory
        return json.dumps(meta, sort_keys=True).encode()
    return p.read_bytes()


def digest(path: Path) -> dict[str, str]:
    """Hash every output file except the run records, which name their own paths."""
    return {
        str(p.relative_to(path)): hashlib.sha256(_content(p)).hexdigest()
        for p in sorted(path.rglob("*"))
        if p.is_file() and not p.name.endswith("run.json") and not p.name.endswith("config.json")
    }


@pytest.fixture(scope="module")
def data(tmp_path_factory):
    out = tmp_path_factory.mktemp("data")
    assert main(["phantom", "--count", "10", "--seed", "3", *SMALL, "--out", str(out)]) == 0
    return out


def test_phantom_outputs_and_split(data):
    vols = sorted(p.name for p in data.glob("*.vol"))
    assert vols == [f"phantom_{i:04d}.vol" for i in range(10)]
    with open(data / "manifest.csv") as fh:
        rows = list(csv.reader(fh))
    splits = [r[-1] for r in rows[1:]]
    assert splits.count("train") == 8 and splits.count("test") == 2
    rec = json.loads((data / "run_config.json").read_text())
    assert rec["command"] == "phantom" and rec["config"]["train_fraction"] == 0.8
    assert load_volume(data / vols[0]).dims == (16, 16, 16)


def test_phantom_hash_stable(data, tmp_path):
    assert main(["phantom", "--count", "10", "--seed", "3", *SMALL, "--out", str(tmp_path)]) == 0
    assert digest(tmp_path) == digest(data)


@pytest.fixture(scope="module")
def projections(data, tmp_path_factory):
    out = tmp_path_factory.mktemp("proj")
    assert main(["project", "--volume", str(data / "phantom_0000.vol"), "--out", str(out)]) == 0
    return out / "phantom_0000_AP.proj", out / "phantom_0000_LAT.proj"


def test_reconstruct_init_and_png_export(projections, tmp_path):
    ap, lat = projections
    out = tmp_path / "init.vol"
    pngs = tmp_path / "png"
    argv = ["reconstruct-init", "--ap", str(ap), "--lat", str(lat), "--out", str(out), "--export-slices", str(pngs)]
    assert main(argv) == 0
    vol = load_volume(out)
    assert vol.dims == (16, 16, 16)
    files = sorted(pngs.glob("slice_*.png"))
    assert len(files) == 16
    img = np.asarray(Image.open(files[5]))
    assert img.dtype == np.uint8 and img.shape == (16, 16)
    lo, hi = PNG_WINDOW
    want = np.round(255 * np.clip((vol.values[:, :, 5].T.astype(np.float64) - lo) / (hi - lo), 0, 1))
    assert np.array_equal(img, want.astype(np.uint8))
    assert main(argv[:-2] + ["--out", str(tmp_path / "again.vol")]) == 0
    assert (tmp_path / "again.vol").read_bytes() == out.read_bytes()


def test_window_formula():
    lo, hi = PNG_WINDOW
    got = window_to_uint8(np.array([lo - 100, lo, (lo + hi) / 2, hi, hi + 1]))
    assert got.tolist() == [0, 0, 128, 255, 255]


@pytest.mark.parametrize(
    "argv",
    [
        ["phantom", "--count", "0", "--out", "x"],
        ["project", "--volume", "missing.vol", "--out", "x"],
        ["reconstruct", "--ap", "a", "--lat", "b", "--coarse", "c", "--out", "o.vol"],
        ["phantom", "--count", "1", "--out", "x", "--set", "nope=1"],
    ],
)
def test_domain_errors_exit_1(argv, tmp_path, monkeypatch, capsys):
    monkeypatch.chdir(tmp_path)
    assert main(argv) == 1
    assert "error" in capsys.readouterr().err


@pytest.mark.parametrize("argv", [[], ["phantom"], ["train", "--stage", "3", "--data", "d"], ["bogus"]])
def test_argument_errors_exit_2(argv):
    with pytest.raises(SystemExit) as exc:
        main(argv)
    assert exc.value.code == 2


def test_evaluate_and_unpaired(data, tmp_path):
    pred, gt = tmp_path / "pred", tmp_path / "gt"
    pred.mkdir()
    gt.mkdir()
    for name in ("phantom_0000.vol", "phantom_0001.vol"):
        shutil.copy(data / name, pred / name)
        shutil.copy(data / name, gt / name)
    out = tmp_path / "m.csv"
    assert main(["evaluate", "--pred", str(pred), "--gt", str(gt), "--out", str(out)]) == 0
    with open(out) as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["volume", "mae", "psnr", "ssim", "vif", "perceptual", "dice"]
    assert len(rows) == 5
    assert float(rows[1][1]) == 0.0 and float(rows[1][2]) == 100.0
    (pred / "phantom_0001.vol").unlink()
    assert main(["evaluate", "--pred", str(pred), "--gt", str(gt), "--out", str(tmp_path / "n.csv")]) == 1
    assert not (tmp_path / "n.csv").exists()


def test_stage2_without_checkpoint_exits_1(data, tmp_path):
    assert main(["train", "--stage", "2", "--data", str(data), "--out", str(tmp_path)]) == 1


def test_train_and_reconstruct_smoke(data, projections, tmp_path):
    run = tmp_path / "run"
    base = ["train", "--data", str(data), "--out", str(run), "--epochs", "1", *TINY_NETS]
    assert main([*base, "--stage", "1"]) == 0
    assert (run / "stage1" / "manifest.json").exists() and (run / "stage1_config.json").exists()
    assert main([*base, "--stage", "2"]) == 0
    assert (run / "stage2" / "manifest.json").exists()
    rec = json.loads((run / "stage1_config.json").read_text())
    assert rec["config"]["stage1"]["epochs"] == 1 and rec["config"]["stage1"]["coarse_net"]["levels"] == 2
    ap, lat = projections
    out = tmp_path / "rec.vol"
    argv = ["reconstruct", "--ap", str(ap), "--lat", str(lat), "--coarse", str(run / "stage1"), "--refine", str(run / "stage2")]
    assert main([*argv, "--out", str(out)]) == 0
    assert load_volume(out).dims == (16, 16, 16)
    # rerun into a second directory: all outputs bytewise identical
    run2 = tmp_path / "run2"
    base2 = ["train", "--data", str(data), "--out", str(run2), "--epochs", "1", *TINY_NETS]
    assert main([*base2, "--stage", "1"]) == 0
    assert main([*base2, "--stage", "2"]) == 0
    assert digest(run2) == digest(run)


def test_run_dir_env(data, tmp_path, monkeypatch):
    monkeypatch.setenv("ORTHOCT_RUN_DIR", str(tmp_path / "envrun"))
    assert main(["train", "--stage", "1", "--data", str(data), "--epochs", "1", *TINY_NETS]) == 0
    assert (tmp_path / "envrun" / "stage1" / "manifest.json").exists()


def test_config_file_and_override_precedence(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"phantom": {"dims": [16, 16, 16]}, "train_fraction": 0.5}))
    out = tmp_path / "d"
    assert main(["phantom", "--count", "4", "--config", str(cfg), "--set", "train_fraction=0.75", "--out", str(out)]) == 0
    with open(out / "manifest.csv") as fh:
        splits = [r[-1] for r in list(csv.reader(fh))[1:]]
    assert splits.count("train") == 3
    assert load_volume(out / "phantom_0000.vol").dims == (16, 16, 16)


def test_console_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "orthoct.cli", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0 and "reconstruct-init" in proc.stdout
    proc = subprocess.run([sys.executable, "-m", "orthoct.cli", "phantom", "--count", "0", "--out", str(tmp_path)], capture_output=True, text=True)
    assert proc.returncode == 1 and proc.stdout == ""
