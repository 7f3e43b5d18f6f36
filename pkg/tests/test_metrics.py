import csv
from pathlib import Path

import numpy as np
import pytest
from skimage.color import deltaE_ciede2000
from skimage.metrics import structural_similarity

from lytnet.color import luminance
from lytnet.metrics import (CSV_FIELDS, PSNR_CAP, ciede2000, ciede2000_image, evaluate_pair,
                            gt_mean_adjust, psnr, ssim, summarize, write_csv)

REFERENCE = Path(__file__).parent / "data" / "ciede2000_pairs.csv"


def reference_pairs():
    rows = np.loadtxt(REFERENCE, delimiter=",", skiprows=1)
    return rows[:, :3], rows[:, 3:6], rows[:, 6]


class TestCiede2000:
    def test_reference_vectors(self):
        lab1, lab2, expected = reference_pairs()
        assert len(expected) == 34
        got = ciede2000(lab1, lab2)
        assert np.abs(got - expected).max() < 1e-4

    def test_symmetric(self):
        lab1, lab2, _ = reference_pairs()
        np.testing.assert_array_equal(ciede2000(lab1, lab2), ciede2000(lab2, lab1))

    def test_identical_is_zero(self):
        lab = np.random.default_rng(0).uniform([0, -80, -80], [100, 80, 80], (100, 3))
        np.testing.assert_array_equal(ciede2000(lab, lab), 0.0)

    def test_agrees_with_skimage(self):
        rng = np.random.default_rng(1)
        a = rng.uniform([0, -80, -80], [100, 80, 80], (500, 3))
        b = a + rng.normal(0, 5, a.shape)
        np.testing.assert_allclose(ciede2000(a, b), deltaE_ciede2000(a, b), atol=1e-6)

    def test_image_level(self):
        x = np.random.default_rng(2).random((8, 8, 3))
        assert ciede2000_image(x, x) == 0.0
        assert ciede2000_image(x, np.clip(x + 0.1, 0, 1)) > 0.0


class TestPsnr:
    @pytest.mark.parametrize("mse,expected", [(0.01, 20.0), (0.0001, 40.0), (0.1, 10.0), (1.0, 0.0)])
    def test_log_arithmetic(self, mse, expected):
        target = np.zeros((4, 4, 3))
        pred = np.full((4, 4, 3), np.sqrt(mse))
        assert abs(psnr(pred, target) - expected) < 1e-9

    def test_identical_hits_cap(self):
        x = np.random.default_rng(3).random((4, 4, 3))
        assert psnr(x, x) == PSNR_CAP

    def test_prediction_is_clamped(self):
        target = np.ones((2, 2, 3))
        assert psnr(np.full((2, 2, 3), 5.0), target) == PSNR_CAP

    def test_shape_mismatch(self):
        with pytest.raises(ValueError, match="shape"):
            psnr(np.zeros((2, 2, 3)), np.zeros((3, 2, 3)))


class TestSsim:
    def test_identity(self):
        x = np.random.default_rng(4).random((32, 32, 3))
        assert abs(ssim(x, x) - 1.0) < 1e-6

    def test_matches_skimage_gaussian(self):
        rng = np.random.default_rng(5)
        a = rng.random((40, 36, 3))
        b = np.clip(a + rng.normal(0, 0.1, a.shape), 0, 1)
        ref = structural_similarity(a, b, gaussian_weights=True, sigma=1.5, use_sample_covariance=False,
                                    data_range=1.0, channel_axis=-1)
        assert abs(ssim(a, b) - ref) < 1e-6

    def test_too_small(self):
        with pytest.raises(ValueError, match="window"):
            ssim(np.zeros((8, 8, 3)), np.zeros((8, 8, 3)))


class TestGtMean:
    def test_scale_matches_mean_luminance(self):
        rng = np.random.default_rng(6)
        target = rng.uniform(0.3, 0.6, (16, 16, 3))
        pred = target * 0.5
        out, applied = gt_mean_adjust(pred, target, "scale")
        assert applied
        assert abs(luminance(out).mean() - luminance(target).mean()) < 1e-9

    def test_gamma_matches_mean_luminance(self):
        rng = np.random.default_rng(7)
        target = rng.uniform(0.2, 0.8, (16, 16, 3))
        pred = target ** 1.7
        out, applied = gt_mean_adjust(pred, target, "gamma")
        assert applied
        assert abs(luminance(out).mean() - luminance(target).mean()) < 1e-9

    def test_black_prediction_skipped(self):
        out, applied = gt_mean_adjust(np.zeros((4, 4, 3)), np.ones((4, 4, 3)), "scale")
        assert not applied

    def test_none_and_unknown(self):
        x = np.full((2, 2, 3), 0.5)
        assert gt_mean_adjust(x, x, "none")[1] is False
        with pytest.raises(ValueError):
            gt_mean_adjust(x, x, "bogus")


def test_evaluate_and_csv(tmp_path):
    rng = np.random.default_rng(8)
    target = rng.random((20, 20, 3))
    records = [evaluate_pair(f"{i}.png", np.clip(target + 0.05 * i, 0, 1), target, "scale")
               for i in range(3)]
    path = tmp_path / "eval.csv"
    write_csv(records, path)
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    assert tuple(rows[0]) == CSV_FIELDS
    assert [r["id"] for r in rows] == ["0.png", "1.png", "2.png"]
    assert all(r["gt_mean_applied"] == "true" for r in rows)
    summary = summarize(records)
    assert summary["n"] == 3
    assert summary["psnr"] == pytest.approx(np.mean([r.psnr for r in records]))
    with pytest.raises(ValueError):
        summarize([])
