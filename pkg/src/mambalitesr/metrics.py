"""PSNR and SSIM on the BT.601 luma plane, with border cropping."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .data import rgb_to_y
from .errors import UsageError
from .reporting import write_csv

PEAK = 255.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = (0.01 * PEAK) ** 2
SSIM_C2 = (0.03 * PEAK) ** 2


def _as_y(img) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 3:
        return rgb_to_y(img)
    if img.ndim == 2:
        return img
    raise UsageError(f"expected a (3, H, W) image or an (H, W) luma plane, got {img.shape}")


def _crop(plane: np.ndarray, crop: int) -> np.ndarray:
    if crop < 0 or 2 * crop >= min(plane.shape):
        raise UsageError(f"crop {crop} must be below half of the smallest side of {plane.shape}")
    return plane[crop:plane.shape[0] - crop, crop:plane.shape[1] - crop] if crop else plane


def _prepare(a, b, crop: int) -> tuple[np.ndarray, np.ndarray]:
    ya, yb = _as_y(a), _as_y(b)
    if ya.shape != yb.shape:
        raise UsageError(f"image sizes differ: {ya.shape} vs {yb.shape}")
    return _crop(ya, crop), _crop(yb, crop)


def psnr(a, b, crop: int = 4) -> float:
    """Luma PSNR in dB; ``inf`` when the cropped planes are identical.

    RGB inputs are (3, H, W) in [0, 1]; 2-d inputs are taken as luma planes
    already on the 0-255 scale.
    """
    ya, yb = _prepare(a, b, crop)
    mse = float(np.mean((ya - yb) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(PEAK * PEAK / mse)


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(x * x) / (2.0 * sigma * sigma))
    return g / g.sum()


def _filter_valid(plane: np.ndarray, g: np.ndarray) -> np.ndarray:
    k = g.size
    rows = sliding_window_view(plane, k, axis=0) @ g
    return sliding_window_view(rows, k, axis=1) @ g


def ssim_map(a, b, crop: int = 4) -> np.ndarray:
    ya, yb = _prepare(a, b, crop)
    if min(ya.shape) < SSIM_WINDOW:
        raise UsageError(f"cropped luma plane {ya.shape} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")
    g = gaussian_window()
    mu_a = _filter_valid(ya, g)
    mu_b = _filter_valid(yb, g)
    var_a = _filter_valid(ya * ya, g) - mu_a * mu_a
    var_b = _filter_valid(yb * yb, g) - mu_b * mu_b
    cov = _filter_valid(ya * yb, g) - mu_a * mu_b
    num = (2.0 * mu_a * mu_b + SSIM_C1) * (2.0 * cov + SSIM_C2)
    den = (mu_a * mu_a + mu_b * mu_b + SSIM_C1) * (var_a + var_b + SSIM_C2)
    return num / den


def ssim(a, b, crop: int = 4) -> float:
    """Mean single-scale SSIM over valid 11x11 Gaussian window positions."""
    return float(np.mean(ssim_map(a, b, crop)))


@dataclass
class ImageScore:
    image: str
    psnr: float
    ssim: float


@dataclass
class MetricReport:
    dataset: str
    crop: int
    channel: str = "Y (BT.601)"
    scores: list[ImageScore] = field(default_factory=list)

    @property
    def mean_psnr(self) -> float:
        return float(np.mean([s.psnr for s in self.scores])) if self.scores else math.nan

    @property
    def mean_ssim(self) -> float:
        return float(np.mean([s.ssim for s in self.scores])) if self.scores else math.nan

    def add(self, name: str, sr, hr) -> ImageScore:
        score = ImageScore(name, psnr(sr, hr, self.crop), ssim(sr, hr, self.crop))
        self.scores.append(score)
        return score

    def summary(self) -> dict:
        return {"dataset": self.dataset, "mean_psnr": _num(self.mean_psnr),
                "mean_ssim": _num(self.mean_ssim), "crop": self.crop, "channel": self.channel,
                "images": len(self.scores)}

    def write(self, out_dir, stem: Optional[str] = None) -> tuple[Path, Path]:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        stem = stem or self.dataset
        csv_path = write_csv(out_dir / f"{stem}.csv", ["image", "psnr", "ssim"],
                             [(sc.image, sc.psnr, sc.ssim) for sc in self.scores])
        json_path = out_dir / f"{stem}.json"
        json_path.write_text(json.dumps(self.summary(), indent=2) + "\n")
        return csv_path, json_path


def _num(x: float):
    return x if math.isfinite(x) else str(x)


def mean_psnr(pairs: Iterable[tuple[np.ndarray, np.ndarray]], crop: int = 4) -> float:
    """Mean PSNR over (sr, hr) pairs; identical pairs are skipped as unbounded."""
    values = [psnr(sr, hr, crop) for sr, hr in pairs]
    finite = [v for v in values if math.isfinite(v)]
    return float(np.mean(finite)) if finite else math.inf
