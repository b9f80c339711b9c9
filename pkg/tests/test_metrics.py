import csv
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from orthoct.data import PhantomSpec, generate_phantom
from orthoct.losses import default_extractor
from orthoct.metrics import (
    METRIC_COLUMNS,
    MetricsReport,
    dice,
    evaluate,
    evaluate_pair,
    gaussian_window,
    mae,
    perceptual_distance,
    psnr,
    segment_lung,
    ssim,
    vif,
)

from oracles import ssim_oracle


@pytest.fixture(scope="module")
def vol(phantom):
    return phantom[0]


@pytest.fixture(scope="module")
def extractor():
    return default_extractor()


def test_identity_rows(vol, extractor):
    row = evaluate_pair(vol, vol, extractor)
    assert row["mae"] == 0.0
    assert row["psnr"] == 100.0
    assert row["ssim"] == pytest.approx(1.0, abs=1e-12)
    assert row["vif"] == pytest.approx(1.0, abs=1e-6)
    assert row["perceptual"] == 0.0
    assert row["dice"] == 1.0


def test_mae_psnr_closed_forms():
    gt = np.zeros((4, 4, 4))
    assert mae(gt + 20, gt) == 20.0
    assert psnr(gt + 20, gt) == pytest.approx(40.0, abs=1e-12)
    assert psnr(gt + 2000, gt) == pytest.approx(0.0, abs=1e-12)
    assert psnr(gt + 1e-9, gt) == 100.0
    with pytest.raises(ValueError):
        mae(gt, np.zeros((4, 4, 3)))


def test_gaussian_window():
    w = gaussian_window()
    assert w.shape == (11,) and w.sum() == pytest.approx(1.0)
    assert np.allclose(w, w[::-1]) and w.argmax() == 5


@pytest.mark.parametrize("seed", range(3))
def test_ssim_matches_direct_oracle(seed):
    rng = np.random.default_rng(seed)
    gt = rng.uniform(-1000, 1000, (14, 13, 2))
    pred = gt + rng.normal(0, 150, gt.shape)
    got, ref = ssim(pred, gt), ssim_oracle(pred, gt)
    assert abs(got - ref) <= 1e-6 * abs(ref)


def test_ssim_anticorrelated_ramp_is_negative():
    ramp = np.tile(np.linspace(-2000, 2000, 20)[:, None, None], (1, 20, 1))
    assert ssim(500 - ramp, 500 + ramp) < 0


def test_ssim_needs_full_window():
    with pytest.raises(ValueError):
        ssim(np.zeros((8, 8, 2)), np.zeros((8, 8, 2)))


def test_vif_decreases_with_noise(vol):
    rng = np.random.default_rng(0)
    gt = vol.values.astype(np.float64)
    noise = rng.standard_normal(gt.shape)
    vals = [vif(gt + s * noise, gt) for s in (10, 100, 500, 3000)]
    assert all(a > b for a, b in zip(vals, vals[1:]))
    assert vals[0] > 0.8
    assert vals[-1] < 0.2


def test_perceptual_distance_grows_with_noise(vol, extractor):
    rng = np.random.default_rng(1)
    gt = vol.values.astype(np.float64)
    noise = rng.standard_normal(gt.shape)
    d = [perceptual_distance(extractor, gt + s * noise, gt) for s in (10, 100, 1000)]
    assert 0 < d[0] < d[1] < d[2]


# -- segmentation -------------------------------------------------------------------------


def test_segment_lung_covers_analytic_lung():
    for seed in range(3):
        vol = generate_phantom(PhantomSpec(seed=seed))
        spec = PhantomSpec(seed=seed)
        lung_truth = (vol.values <= spec.lung_hu[1] + 1e-3) & (vol.values > spec.air_hu + 1)
        seg = segment_lung(vol)
        assert (seg & lung_truth).sum() >= 0.95 * lung_truth.sum()
        assert dice(seg, lung_truth) > 0.95


def test_segment_lung_empty_cases(vol):
    air = np.full((16, 16, 16), -1000.0)
    assert not segment_lung(air).any()
    assert not segment_lung(vol, hu_threshold=-1024).any()
    with pytest.raises(ValueError):
        segment_lung(vol, body=np.ones((2, 2, 2), bool))


def test_dice_hand_cases():
    a = np.array([1, 1, 0, 0], bool)
    assert dice(a, a) == 1.0
    assert dice(a, ~a) == 0.0
    assert dice(a, np.array([1, 0, 0, 0], bool)) == pytest.approx(2 / 3)
    assert dice(np.array([1, 1, 0, 0], bool), np.array([0, 1, 1, 0], bool)) == 0.5
    assert dice(np.zeros(4, bool), np.zeros(4, bool)) == 1.0


@settings(max_examples=20)
@given(st.integers(0, 2**31 - 1))
def test_dice_symmetric_and_bounded(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.random((5, 5)) < 0.5, rng.random((5, 5)) < 0.5
    assert dice(a, b) == dice(b, a)
    assert 0.0 <= dice(a, b) <= 1.0


# -- report ----------------------------------------------------------------------------------


def _fake_rows(n, seed=0):
    rng = np.random.default_rng(seed)
    return {f"v{i:02d}": {c: float(rng.random()) for c in METRIC_COLUMNS} for i in range(n)}


def test_report_csv_round_trip(tmp_path):
    rows = _fake_rows(5)
    rep = MetricsReport(rows)
    rep.write_csv(tmp_path / "m.csv")
    with open(tmp_path / "m.csv", newline="") as fh:
        table = list(csv.reader(fh))
    assert table[0] == ["volume", "mae", "psnr", "ssim", "vif", "perceptual", "dice"]
    assert len(table) == 1 + 5 + 2
    assert [r[0] for r in table[-2:]] == ["mean", "std"]
    for r in table[1:6]:
        assert [float(x) for x in r[1:]] == [rows[r[0]][c] for c in METRIC_COLUMNS]
    means = [float(x) for x in table[-2][1:]]
    assert means == pytest.approx([np.mean([rows[k][c] for k in rows]) for c in METRIC_COLUMNS], rel=1e-15)
    stds = [float(x) for x in table[-1][1:]]
    assert stds == pytest.approx([np.std([rows[k][c] for k in rows]) for c in METRIC_COLUMNS], rel=1e-12)


def test_report_order_invariant(tmp_path):
    rows = _fake_rows(6, seed=3)
    keys = list(rows)
    np.random.default_rng(0).shuffle(keys)
    MetricsReport(rows).write_csv(tmp_path / "a.csv")
    MetricsReport({k: rows[k] for k in keys}).write_csv(tmp_path / "b.csv")
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()


def test_evaluate_rejects_unpaired(vol, extractor):
    with pytest.raises(ValueError, match="unpaired"):
        evaluate({"a": vol}, {"b": vol}, extractor)
    with pytest.raises(ValueError):
        evaluate({}, {}, extractor)


def test_metrics_finite_on_reconstruction_like_input(vol, extractor):
    rng = np.random.default_rng(2)
    pred = vol.values + rng.normal(0, 80, vol.values.shape)
    row = evaluate_pair(pred, vol, extractor)
    assert all(math.isfinite(v) for v in row.values())
    assert row["psnr"] < 100 and row["ssim"] < 1
