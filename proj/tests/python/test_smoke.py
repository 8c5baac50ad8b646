import math
from pathlib import Path

import numpy as np
import pytest

import emphseg

CONFIGS = Path(__file__).resolve().parents[2] / "configs"


def test_loss_landmarks():
    mask = np.zeros((1, 4, 4), dtype=np.uint8)
    mask[:, :, :2] = 1
    y = np.stack([1 - mask, mask], axis=1).astype(float)
    total, _, dice = emphseg.segmentation_loss(y, y)
    assert total == pytest.approx(-1.0, abs=1e-6)
    assert dice == pytest.approx(1.0, abs=1e-6)

    total, ce, dice = emphseg.segmentation_loss(y, np.full_like(y, 0.5))
    assert ce == pytest.approx(math.log(2), abs=1e-12)
    # batch-global soft Dice: (2 * 0.5 * 8 + eps) / (8 + 0.5 * 16 + eps)
    assert dice == pytest.approx((8 + 1e-6) / (16 + 1e-6), abs=1e-12)
    assert total == pytest.approx(ce - dice)


def test_loss_rejects_shape_mismatch():
    with pytest.raises(emphseg.ContractError):
        emphseg.segmentation_loss(np.zeros((1, 2, 4, 4)), np.zeros((1, 2, 4, 3)))


def test_dsc_and_percent_emphysema():
    a = np.array([1, 1, 0, 0], dtype=np.uint8)
    b = np.array([1, 0, 1, 0], dtype=np.uint8)
    assert emphseg.dsc(a, b) == pytest.approx(0.5)

    hu = np.full((1, 2, 2), -900, dtype=np.int16)
    lung = np.ones((1, 2, 2), dtype=np.uint8)
    mask = np.array([[[1, 0], [0, 0]]], dtype=np.uint8)
    assert emphseg.percent_emphysema(hu, lung, mask) == pytest.approx(25.0)


def test_cdf_of_scan_matches_numpy():
    rng = np.random.default_rng(0)
    hu = rng.integers(-1024, -600, size=(2, 8, 8)).astype(np.int16)
    lung = (rng.random((2, 8, 8)) < 0.7).astype(np.uint8)
    cdf = emphseg.cdf_of_scan(hu, lung, bins=16)
    pooled = hu[lung == 1].astype(float)
    upper = -1024 + 324 * np.arange(1, 17) / 16
    expected = np.array([(pooled <= u).mean() for u in upper])
    expected[-1] = 1.0
    np.testing.assert_array_equal(cdf, expected)


def test_lr_schedule_spot_values():
    assert emphseg.lr_at(0) == pytest.approx(2e-4, rel=1e-12)
    assert emphseg.lr_at(34) <= 1.1e-8
    assert emphseg.lr_at(35) == pytest.approx(2e-4, rel=1e-12)
    with pytest.raises(emphseg.ContractError):
        emphseg.lr_at(50)


def test_volume_round_trip(tmp_path):
    rng = np.random.default_rng(1)
    hu = rng.integers(-1024, 3071, size=(3, 4, 5)).astype(np.int16)
    lung = (rng.random(hu.shape) < 0.5).astype(np.uint8)
    emph = lung & (rng.random(hu.shape) < 0.3).astype(np.uint8)
    path = tmp_path / "v.ctph"
    emphseg.write_volume(path, hu, lung, emph, "scan-1", "GE VCT")
    back = emphseg.read_volume(path)
    assert back["scan_id"] == "scan-1"
    assert back["scanner"] == "GE VCT"
    np.testing.assert_array_equal(back["hu"], hu)
    np.testing.assert_array_equal(back["emph"], emph)
    with pytest.raises(emphseg.IoError):
        emphseg.read_volume(tmp_path / "missing.ctph")


def test_pipeline(tmp_path):
    n = emphseg.build_dataset(tmp_path / "ds", seed=4, config=CONFIGS / "phantom_smoke.cfg")
    manifest = tmp_path / "ds" / "manifest.tsv"
    rows = emphseg.read_manifest(manifest)
    assert len(rows) == n
    scanners = sorted({r["scanner"] for r in rows})

    priors = {}
    for tag in scanners:
        values, sources = emphseg.scanner_prior(manifest, tag)
        assert values[-1] == 1.0 and sources
        priors[tag] = tmp_path / f"{tag}.cdf"
        emphseg.write_prior(manifest, tag, priors[tag])

    log = emphseg.train(manifest, "dattn_diff", tmp_path / "model", priors,
                        net_config=CONFIGS / "net_smoke.cfg", train_config=CONFIGS / "train_smoke.cfg")
    assert len(log) == 2
    assert (tmp_path / "model" / "best.ckpt").exists()

    report = emphseg.evaluate(tmp_path / "model" / "best.ckpt", manifest, "test_ood", priors)
    assert report["variant"] == "dattn_diff"
    assert 0.0 <= report["global"]["dsc_mean"] <= 1.0
    assert report["global"]["count"] == sum(r["split"] == "test_ood" for r in rows)

    with pytest.raises(emphseg.ConfigError):
        emphseg.evaluate(tmp_path / "model" / "best.ckpt", manifest, "test_ood")
