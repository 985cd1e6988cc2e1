"""Image quality metrics on the 0-255 scale and folder evaluation."""
from __future__ import annotations

import logging
import math
import zlib
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

PEAK = 255.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1, SSIM_K2 = 0.01, 0.03

log = logging.getLogger(__name__)


def _pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    return a, b


def mse(a, b) -> float:
    a, b = _pair(a, b)
    return float(np.mean((a - b) ** 2))


def psnr(a, b) -> float:
    """10*log10(255^2 / MSE); identical images give ``math.inf``."""
    err = mse(a, b)
    if err == 0.0:
        return math.inf
    return 10.0 * math.log10(PEAK ** 2 / err)


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(x ** 2) / (2 * sigma ** 2))
    return g / g.sum()


def _filter_valid(img, g):
    k = g.size
    rows = sliding_window_view(img, k, axis=0) @ g
    return sliding_window_view(rows, k, axis=1) @ g


def ssim(a, b) -> float:
    """Mean SSIM over the valid region of an 11x11 Gaussian window (std 1.5), L = 255."""
    a, b = _pair(a, b)
    if a.ndim != 2:
        raise ValueError(f"ssim expects 2-D images, got shape {a.shape}")
    if min(a.shape) < SSIM_WINDOW:
        raise ValueError(f"image {a.shape} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window")
    g = gaussian_window()
    c1 = (SSIM_K1 * PEAK) ** 2
    c2 = (SSIM_K2 * PEAK) ** 2
    mu_a = _filter_valid(a, g)
    mu_b = _filter_valid(b, g)
    var_a = _filter_valid(a * a, g) - mu_a ** 2
    var_b = _filter_valid(b * b, g) - mu_b ** 2
    cov = _filter_valid(a * b, g) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


def noisy_baseline_psnr(sigma: float) -> float:
    """Expected PSNR of an unclipped AWGN-corrupted image: 10*log10(255^2 / sigma^2)."""
    return 10.0 * math.log10(PEAK ** 2 / sigma ** 2)


@dataclass
class ImageScore:
    name: str
    psnr: float
    ssim: float
    psnr_unclamped: float | None = None
    ssim_unclamped: float | None = None


@dataclass
class EvalReport:
    sigma: float
    seed: int
    clamped: bool = True
    images: list[ImageScore] = field(default_factory=list)
    failures: list[tuple[str, str]] = field(default_factory=list)

    @staticmethod
    def _mean(values):
        finite = [v for v in values if v is not None and math.isfinite(v)]
        return float(np.mean(finite)) if finite else math.nan

    @property
    def mean_psnr(self) -> float:
        return self._mean(s.psnr for s in self.images)

    @property
    def mean_ssim(self) -> float:
        return self._mean(s.ssim for s in self.images)

    def lines(self) -> list[str]:
        """Machine-readable ``name psnr ssim`` lines with a trailing ``MEAN`` line."""
        out = [f"{s.name} {s.psnr:.4f} {s.ssim:.6f}" for s in self.images]
        out.append(f"MEAN {self.mean_psnr:.4f} {self.mean_ssim:.6f}")
        return out

    def table(self) -> str:
        unclamped = any(s.psnr_unclamped is not None for s in self.images)
        head = f"{'image':<24} {'PSNR(dB)':>9} {'SSIM':>8}"
        if unclamped:
            head += f" {'PSNR-raw':>9} {'SSIM-raw':>8}"
        rows = [f"sigma={self.sigma:g} seed={self.seed} clamped={'yes' if self.clamped else 'no'}",
                head, "-" * len(head)]
        for s in self.images:
            row = f"{s.name:<24} {s.psnr:>9.4f} {s.ssim:>8.4f}"
            if unclamped:
                row += f" {s.psnr_unclamped:>9.4f} {s.ssim_unclamped:>8.4f}"
            rows.append(row)
        rows.append("-" * len(head))
        rows.append(f"{'mean':<24} {self.mean_psnr:>9.4f} {self.mean_ssim:>8.4f}")
        for name, why in self.failures:
            rows.append(f"FAILED {name}: {why}")
        return "\n".join(rows)


def image_seed(seed: int, name: str):
    """Per-image noise seed, stable across runs and independent of folder order."""
    return np.random.default_rng([seed, zlib.crc32(name.encode("utf-8"))])


def eval_images(model: Callable[[np.ndarray], np.ndarray], images, sigma: float, seed: int,
                report_unclamped: bool = False, failures=()) -> EvalReport:
    """Score ``model`` on ``(name, clean)`` pairs; noise is synthesized per image from ``seed``.

    ``sigma == 0`` evaluates on the clean images themselves.
    """
    from .training import add_gaussian_noise

    report = EvalReport(sigma, seed, True, failures=list(failures))
    for name, clean in sorted(images, key=lambda t: t[0]):
        noisy = clean if sigma == 0 else add_gaussian_noise(clean, sigma, image_seed(seed, name))
        out = np.asarray(model(noisy), dtype=np.float64)
        clamped = np.clip(out, 0.0, 1.0)
        score = ImageScore(name, psnr(clamped * PEAK, clean * PEAK), ssim(clamped * PEAK, clean * PEAK))
        if report_unclamped:
            score.psnr_unclamped = psnr(out * PEAK, clean * PEAK)
            score.ssim_unclamped = ssim(out * PEAK, clean * PEAK)
        if not math.isfinite(score.psnr):
            log.warning("%s: exact reconstruction, PSNR is infinite and left out of the mean", name)
        report.images.append(score)
    return report


def eval_dataset(checkpoint, folder, sigma: float, seed: int = 0,
                 report_unclamped: bool = False) -> EvalReport:
    """Evaluate a checkpoint (or ParamStore, or image->image callable) on a folder."""
    from .io import Checkpoint, load_folder
    from .network import ParamStore, denoise

    images, failures = load_folder(folder)
    for name, why in failures:
        log.warning("cannot read %s: %s", name, why)
    if not images:
        raise RuntimeError(f"no readable images in {folder}")
    if isinstance(checkpoint, Checkpoint):
        checkpoint = checkpoint.params
    if isinstance(checkpoint, ParamStore):
        params = checkpoint

        def model(img):
            return denoise(img, params)
    else:
        model = checkpoint
    return eval_images(model, images, sigma, seed, report_unclamped, failures)
