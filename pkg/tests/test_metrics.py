import math

import numpy as np
import pytest
import torch

from conftest import finite_diff_check, rand_image
from oracles import ssim_reference, ssim_reference_multichannel
from unirestore.metrics import PSNR_CAP_DB, MetricReport, psnr, ssim


class TestPsnr:
    def test_identical_images_hit_cap(self):
        x = rand_image((16, 16, 3), seed=1)
        assert psnr(x, x) == PSNR_CAP_DB

    def test_mse_001_gives_20db(self):
        x = np.zeros((8, 8, 3), dtype=np.float64)
        y = np.full((8, 8, 3), 0.1, dtype=np.float64)
        expected = 10.0 * math.log10(1.0 / np.mean((x - y) ** 2))
        assert abs(psnr(x, y) - expected) < 1e-12
        assert abs(psnr(x, y) - 20.0) < 1e-6

    def test_half_offset_scalar_case(self):
        x = np.zeros((8, 8, 3))
        y = np.full((8, 8, 3), 0.5)
        assert abs(psnr(x, y) - 10.0 * math.log10(4.0)) < 1e-9
        assert abs(psnr(x, y) - 6.0206) < 1e-4

    def test_tiny_error_capped_at_100(self):
        x = np.zeros((8, 8, 3))
        y = np.full((8, 8, 3), 1e-9)
        assert psnr(x, y) == PSNR_CAP_DB

    def test_strictly_decreasing_in_noise_level(self):
        rng = np.random.default_rng(0)
        base = rand_image((32, 32, 3), seed=9) * 0.6 + 0.2
        values = []
        for sigma in (15 / 255, 25 / 255, 50 / 255):
            noisy = np.clip(base + rng.normal(0, sigma, base.shape), 0, 1)
            values.append(psnr(base, noisy))
        assert values[0] > values[1] > values[2]

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            psnr(np.zeros((8, 8, 3)), np.zeros((8, 4, 3)))


class TestSsim:
    def test_self_similarity_exact(self):
        x = rand_image((16, 16, 3), seed=3)
        assert ssim(x, x) == 1.0

    def test_constant_images_closed_form(self):
        # mu_x=0, mu_y=1, zero variances: value = C1 / (1 + C1)
        x = np.zeros((16, 16), dtype=np.float64)
        y = np.ones((16, 16), dtype=np.float64)
        c1 = 0.01**2
        expected = (2 * 0 * 1 + c1) / (0 + 1 + c1)  # structure term is exactly 1
        got = ssim(x, y)
        assert abs(got - expected) < 1e-9
        assert abs(got - 1e-4) < 1e-7

    @pytest.mark.parametrize("seed", range(5))
    def test_matches_independent_reference_single_channel(self, seed):
        x = rand_image((16, 16), seed=seed).astype(np.float64)
        y = np.clip(x + np.random.default_rng(seed + 100).normal(0, 0.1, x.shape), 0, 1)
        assert abs(ssim(x, y) - ssim_reference(x, y)) < 1e-5

    def test_matches_reference_multichannel(self):
        x = rand_image((14, 18, 3), seed=11).astype(np.float64)
        y = rand_image((14, 18, 3), seed=12).astype(np.float64)
        assert abs(ssim(x, y) - ssim_reference_multichannel(x, y)) < 1e-5

    @pytest.mark.parametrize("seed", range(4))
    def test_symmetry_and_range(self, seed):
        x = rand_image((16, 16), seed=seed)
        y = rand_image((16, 16), seed=seed + 50)
        a, b = ssim(x, y), ssim(y, x)
        assert abs(a - b) < 1e-7
        assert -1.0 <= a <= 1.0

    def test_small_images_rejected(self):
        with pytest.raises(ValueError):
            ssim(np.zeros((10, 10)), np.zeros((10, 10)))

    def test_tensor_input_preserves_gradient(self):
        x = torch.rand(1, 1, 12, 12, dtype=torch.float64, requires_grad=True)
        y = torch.rand(1, 1, 12, 12, dtype=torch.float64)
        value = ssim(x, y)
        value.backward()
        assert x.grad is not None and torch.isfinite(x.grad).all()

    def test_gradient_matches_finite_differences(self):
        torch.manual_seed(0)
        x = torch.rand(1, 1, 12, 12, dtype=torch.float64)
        y = torch.rand(1, 1, 12, 12, dtype=torch.float64)
        x.requires_grad_(True)
        finite_diff_check(lambda: ssim(x, y), [("pred", x)], probe_limit=24)


def test_metric_report_fields():
    r = MetricReport(psnr_db=20.0, ssim=0.5)
    assert r.psnr_db == 20.0 and r.ssim == 0.5
