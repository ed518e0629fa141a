import json
import math

import numpy as np
import pytest

from mambalitesr.errors import UsageError
from mambalitesr.metrics import MetricReport, gaussian_window, mean_psnr, psnr, ssim, ssim_map

from oracles import direct_psnr, direct_ssim, luma


def planes(seed, h=24, w=28):
    rng = np.random.default_rng(seed)
    a = rng.uniform(16, 235, size=(h, w))
    return a, np.clip(a + rng.normal(scale=8, size=(h, w)), 0, 255)


class TestPsnr:
    def test_identical_is_infinite(self):
        img = np.random.default_rng(0).random((3, 16, 16))
        assert psnr(img, img) == math.inf

    def test_unit_offset(self):
        a = np.full((20, 20), 100.0)
        assert psnr(a, a + 1.0, crop=4) == pytest.approx(48.1308036, abs=1e-6)
        assert psnr(a, a + 1.0, crop=4) == pytest.approx(20 * math.log10(255), abs=1e-12)

    def test_rgb_offset_through_luma(self):
        # a shift of 1/219 on every channel moves Y by exactly 1
        a = np.full((3, 16, 16), 0.4)
        assert psnr(a, a + 1.0 / 219.0) == pytest.approx(20 * math.log10(255), abs=1e-9)

    def test_direct_oracle(self):
        for seed in range(20):
            a, b = planes(seed)
            assert abs(psnr(a, b, crop=3) - direct_psnr(a, b, 3)) <= 1e-9

    def test_symmetry_and_monotone(self):
        a, b = planes(1)
        assert psnr(a, b) == psnr(b, a)
        vals = [psnr(a, a + c) for c in (0.5, 1.0, 2.0, 4.0)]
        assert all(x > y for x, y in zip(vals, vals[1:]))

    def test_crop_only_looks_inside(self):
        a = np.zeros((20, 20))
        b = a.copy()
        b[:4] = 50
        assert psnr(a, b, crop=4) == math.inf
        assert psnr(a, b, crop=0) < 30

    def test_errors(self):
        with pytest.raises(UsageError):
            psnr(np.zeros((10, 10)), np.zeros((10, 12)))
        with pytest.raises(UsageError):
            psnr(np.zeros((8, 8)), np.ones((8, 8)), crop=4)

    def test_mean_skips_identical(self):
        a, b = planes(2)
        assert mean_psnr([(a, b), (a, a)]) == pytest.approx(psnr(a, b))


class TestSsim:
    def test_identical_is_exactly_one(self):
        img = np.random.default_rng(0).random((3, 24, 24))
        assert ssim(img, img) == 1.0

    def test_equal_constants(self):
        a = np.full((20, 20), 77.0)
        assert ssim(a, a.copy()) == 1.0

    def test_window(self):
        g = gaussian_window()
        assert g.size == 11 and g.sum() == pytest.approx(1.0) and g[5] == g.max()

    def test_direct_oracle(self):
        for seed in range(5):
            a, b = planes(seed)
            assert abs(ssim(a, b, crop=2) - direct_ssim(a, b, 2)) <= 1e-6

    def test_bounds_symmetry_and_limit(self):
        a, b = planes(3)
        s = ssim(a, b)
        assert -1 <= s <= 1 and s == pytest.approx(ssim(b, a), abs=1e-15)
        vals = [ssim(a, a + c) for c in (8.0, 2.0, 0.5, 0.01)]
        assert all(0 < v <= 1 for v in vals)
        assert all(x <= y for x, y in zip(vals, vals[1:]))
        assert vals[-1] == pytest.approx(1.0, abs=1e-6)

    def test_map_covers_valid_positions(self):
        a, b = planes(4, 30, 25)
        assert ssim_map(a, b, crop=0).shape == (20, 15)

    def test_too_small(self):
        with pytest.raises(UsageError):
            ssim(np.zeros((18, 18)), np.zeros((18, 18)), crop=4)


class TestReport:
    def test_writes_csv_and_json(self, tmp_path):
        rng = np.random.default_rng(0)
        report = MetricReport("Set5", crop=4)
        for i in range(2):
            hr = rng.random((3, 32, 32))
            report.add(f"img{i}.png", np.clip(hr + 0.01, 0, 1), hr)
        csv_path, json_path = report.write(tmp_path)
        lines = csv_path.read_text().splitlines()
        assert lines[0] == "image,psnr,ssim" and len(lines) == 3
        summary = json.loads(json_path.read_text())
        assert summary["dataset"] == "Set5" and summary["crop"] == 4 and summary["images"] == 2
        assert summary["mean_psnr"] == pytest.approx(report.mean_psnr)

    def test_luma_agrees_with_oracle(self):
        img = np.random.default_rng(1).random((3, 16, 16))
        ref = np.clip(img + 0.02, 0, 1)
        assert psnr(ref, img, crop=0) == pytest.approx(direct_psnr(luma(ref), luma(img), 0), abs=1e-9)
