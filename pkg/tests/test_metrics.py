import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from skimage.metrics import structural_similarity

from wavedense import network as N
from wavedense.metrics import EvalReport, ImageScore, eval_dataset, eval_images, mse, noisy_baseline_psnr, psnr, ssim

from conftest import write_folder


class TestPSNR:
    def test_extreme_images(self):
        a, b = np.zeros((4, 4)), np.full((4, 4), 255.0)
        assert mse(a, b) == 65025
        assert psnr(a, b) == 0.0

    def test_thirty_db(self):
        a = np.zeros((10, 10))
        b = np.full((10, 10), math.sqrt(65.025))
        assert psnr(a, b) == pytest.approx(30.0, abs=1e-12)

    def test_identical_is_inf(self):
        a = np.random.default_rng(0).random((5, 5)) * 255
        assert psnr(a, a) == math.inf

    def test_sigma50_monte_carlo(self):
        clean = np.full((1000, 1000), 128.0)
        noisy = clean + np.random.default_rng(0).standard_normal(clean.shape) * 50
        assert abs(psnr(noisy, clean) - 14.15) < 0.05
        assert noisy_baseline_psnr(50) == pytest.approx(14.1514, abs=1e-4)
        assert noisy_baseline_psnr(15) == pytest.approx(24.6090, abs=1e-4)
        assert noisy_baseline_psnr(25) == pytest.approx(20.1720, abs=1e-4)

    @settings(max_examples=40, deadline=None)
    @given(seed=st.integers(0, 10_000), k=st.floats(1.01, 10))
    def test_monotone_and_symmetric(self, seed, k):
        rng = np.random.default_rng(seed)
        a = rng.random((6, 6)) * 255
        e = rng.standard_normal((6, 6)) + 0.1
        assert psnr(a, a + e) == psnr(a + e, a)
        assert psnr(a, a + k * e) < psnr(a, a + e)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            psnr(np.zeros((2, 2)), np.zeros((2, 3)))


class TestSSIM:
    def test_identity_exact(self):
        for seed in range(5):
            a = np.random.default_rng(seed).random((20, 31)) * 255
            assert ssim(a, a) == 1.0

    def test_constant_vs_constant(self):
        # luminance term only: (2*0*255 + C1) / (0 + 255^2 + C1)
        c1 = (0.01 * 255) ** 2
        assert ssim(np.zeros((16, 16)), np.full((16, 16), 255.0)) == pytest.approx(c1 / (255 ** 2 + c1), rel=1e-12)

    def test_symmetric(self):
        rng = np.random.default_rng(1)
        a, b = rng.random((2, 24, 24)) * 255
        assert ssim(a, b) == pytest.approx(ssim(b, a), abs=1e-15)

    def test_matches_skimage_gaussian_variant(self):
        rng = np.random.default_rng(2)
        clean = np.clip(rng.random((40, 40)).cumsum(1) * 10, 0, 255)
        noisy = np.clip(clean + rng.standard_normal(clean.shape) * 20, 0, 255)
        ref_map = structural_similarity(clean, noisy, gaussian_weights=True, sigma=1.5,
                                        use_sample_covariance=False, data_range=255, full=True)[1]
        # skimage pads; our value is the mean over the fully supported (valid) region
        valid = ref_map[5:-5, 5:-5]
        assert ssim(clean, noisy) == pytest.approx(valid.mean(), abs=1e-6)

    def test_small_image_rejected(self):
        with pytest.raises(ValueError, match="window"):
            ssim(np.zeros((10, 12)), np.zeros((10, 12)))


class TestEvaluation:
    def test_identity_model_is_noisy_baseline(self, test_images):
        report = eval_images(lambda z: z, test_images, 25, seed=0)
        assert len(report.images) == 10
        # clamping lifts the raw value slightly above the analytic baseline
        assert abs(report.mean_psnr - noisy_baseline_psnr(25)) < 0.5
        raw = eval_images(lambda z: z, test_images, 25, seed=0, report_unclamped=True)
        assert all(s.psnr_unclamped <= s.psnr for s in raw.images)

    def test_zero_noise_perfect_model(self, test_images, caplog):
        report = eval_images(lambda z: z, test_images[:2], 0, seed=0)
        assert all(s.psnr == math.inf and s.ssim == 1.0 for s in report.images)
        assert math.isnan(report.mean_psnr)
        assert "infinite" in caplog.text
        assert report.lines()[-1].startswith("MEAN nan")

    def test_deterministic_and_order_independent(self, test_images):
        a = eval_images(lambda z: z * 0.9, test_images, 15, seed=3)
        b = eval_images(lambda z: z * 0.9, test_images[::-1], 15, seed=3)
        assert a.lines() == b.lines()
        assert a.lines() != eval_images(lambda z: z * 0.9, test_images, 15, seed=4).lines()
        assert [s.name for s in a.images] == sorted(n for n, _ in test_images)

    def test_folder_with_checkpoint_params(self, test_folder):
        store = N.build(N.ModelConfig(levels=2, channels=(4, 4), rdb_depth=1, bn_policy="none"))
        report = eval_dataset(store, test_folder, 25, seed=0)
        assert len(report.images) == 10 and math.isfinite(report.mean_psnr)

    def test_unreadable_files_reported(self, tmp_path, test_images):
        folder = write_folder(tmp_path / "mixed", test_images[:2])
        (folder / "broken.pgm").write_bytes(b"P5\n4 4\n255\n\x00")
        report = eval_dataset(lambda z: z, folder, 25)
        assert len(report.images) == 2
        assert report.failures[0][0] == "broken.pgm"
        assert "FAILED broken.pgm" in report.table()

    def test_empty_folder(self, tmp_path):
        with pytest.raises(RuntimeError, match="no readable"):
            eval_dataset(lambda z: z, tmp_path, 25)

    def test_report_formats(self):
        r = EvalReport(25, 0, images=[ImageScore("b", 30.0, 0.9), ImageScore("a", 32.0, 0.7)])
        assert r.mean_psnr == 31.0 and r.mean_ssim == pytest.approx(0.8)
        assert r.lines() == ["b 30.0000 0.900000", "a 32.0000 0.700000", "MEAN 31.0000 0.800000"]
        assert "sigma=25" in r.table()
