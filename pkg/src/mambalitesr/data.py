"""Image I/O, bicubic degradation, patch sampling, and augmentation.

Images are float32 arrays of shape (3, H, W) with values in [0, 1].
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from PIL import Image as PILImage

from .errors import ConfigurationError, UsageError

logger = logging.getLogger(__name__)

PNG_SUFFIXES = (".png",)


# -- I/O -------------------------------------------------------------------

def load_png(path) -> np.ndarray:
    """Read a PNG as (3, H, W) float32 in [0, 1]; alpha dropped, gray replicated."""
    path = Path(path)
    try:
        with PILImage.open(path) as im:
            im.load()
            mode = im.mode
            if mode in ("I;16", "I;16B", "I;16L", "I"):
                arr = np.asarray(im, dtype=np.float64) / 65535.0
                arr = np.repeat(arr[None], 3, axis=0)
            else:
                if mode not in ("RGB", "L"):
                    im = im.convert("RGBA" if "A" in mode or mode == "P" else "RGB")
                arr = np.asarray(im, dtype=np.float64) / 255.0
                if arr.ndim == 2:
                    arr = np.repeat(arr[None], 3, axis=0)
                else:
                    arr = arr[..., :3].transpose(2, 0, 1)
    except FileNotFoundError:
        raise FileNotFoundError(f"image not found: {path}") from None
    except OSError as exc:
        raise OSError(f"cannot read image {path}: {exc}") from None
    return np.ascontiguousarray(np.clip(arr, 0.0, 1.0), dtype=np.float32)


def quantize(img: np.ndarray) -> np.ndarray:
    """Round to the nearest 8-bit level, returned as float32 in [0, 1]."""
    return (np.round(np.clip(img, 0.0, 1.0) * 255.0) / 255.0).astype(np.float32)


def save_png(img: np.ndarray, path) -> None:
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[0] != 3:
        raise UsageError(f"save_png expects (3, H, W), got {img.shape}")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    u8 = np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8).transpose(1, 2, 0)
    PILImage.fromarray(np.ascontiguousarray(u8), mode="RGB").save(path)


def list_pngs(directory) -> list[Path]:
    directory = Path(directory)
    if not directory.is_dir():
        raise FileNotFoundError(f"image directory not found: {directory}")
    return sorted(p for p in directory.iterdir() if p.suffix.lower() in PNG_SUFFIXES)


# -- bicubic ---------------------------------------------------------------

BICUBIC_A = -0.5


def cubic_kernel(x: np.ndarray, a: float = BICUBIC_A) -> np.ndarray:
    x = np.abs(x)
    x2, x3 = x * x, x * x * x
    near = (a + 2) * x3 - (a + 3) * x2 + 1
    far = a * x3 - 5 * a * x2 + 8 * a * x - 4 * a
    return np.where(x <= 1, near, np.where(x < 2, far, 0.0))


def resize_weights(in_size: int, out_size: int, antialias: bool = True) -> np.ndarray:
    """Row-normalized (out_size, in_size) bicubic interpolation matrix.

    Pixel centers are aligned; when shrinking with ``antialias`` the kernel is
    stretched by the downscale factor. Taps beyond the border are clamped.
    """
    ratio = out_size / in_size
    stretch = 1.0 / ratio if (antialias and ratio < 1.0) else 1.0
    support = 2.0 * stretch
    weights = np.zeros((out_size, in_size))
    for i in range(out_size):
        center = (i + 0.5) / ratio - 0.5
        lo = math.floor(center - support) + 1
        hi = math.ceil(center + support) - 1
        taps = np.arange(lo, hi + 1)
        w = cubic_kernel((taps - center) / stretch)
        total = w.sum()
        if total != 0:
            w = w / total
        np.add.at(weights[i], np.clip(taps, 0, in_size - 1), w)
    return weights


def bicubic_resize(img: np.ndarray, out_h: int, out_w: int, antialias: bool = True) -> np.ndarray:
    """Separable bicubic resize of a (C, H, W) image, clipped to [0, 1]."""
    if out_h < 1 or out_w < 1:
        raise UsageError(f"output size must be positive, got {out_h}x{out_w}")
    img = np.asarray(img, dtype=np.float64)
    _, h, w = img.shape
    if (h, w) == (out_h, out_w):
        return img.astype(np.float32)
    wy = resize_weights(h, out_h, antialias)
    wx = resize_weights(w, out_w, antialias)
    out = (wy @ img) @ wx.T
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def downscale(hr: np.ndarray, scale: int) -> np.ndarray:
    _, h, w = hr.shape
    return bicubic_resize(hr, h // scale, w // scale)


def upscale_bicubic(lr: np.ndarray, scale: int) -> np.ndarray:
    _, h, w = lr.shape
    return bicubic_resize(lr, h * scale, w * scale)


def modcrop(img: np.ndarray, scale: int) -> np.ndarray:
    _, h, w = img.shape
    return img[:, : h - h % scale, : w - w % scale]


# -- color -----------------------------------------------------------------

def rgb_to_y(img: np.ndarray) -> np.ndarray:
    """BT.601 studio-range luma of a (3, H, W) image in [0, 1], on the 0-255 scale."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 3 or img.shape[0] != 3:
        raise UsageError(f"rgb_to_y expects (3, H, W), got {img.shape}")
    r, g, b = img
    return 65.481 * r + 128.553 * g + 24.966 * b + 16.0


# -- patches ---------------------------------------------------------------

@dataclass
class PatchPair:
    lr: np.ndarray
    hr: np.ndarray
    source: str = ""
    offset: tuple[int, int] = (0, 0)
    augmentation: str = "h0v0r0"


def apply_augmentation(arr: np.ndarray, hflip: bool, vflip: bool, rot: int) -> np.ndarray:
    """Flip along width, flip along height, then rotate by ``rot`` quarter turns."""
    if hflip:
        arr = arr[..., ::-1]
    if vflip:
        arr = arr[..., ::-1, :]
    if rot % 4:
        arr = np.rot90(arr, k=rot % 4, axes=(-2, -1))
    return np.ascontiguousarray(arr)


def augment(pair: PatchPair, rng: np.random.Generator) -> PatchPair:
    """Independent 50% h-flip, 50% v-flip, and a uniform quarter-turn rotation."""
    if pair.lr.shape[-1] != pair.lr.shape[-2]:
        raise UsageError(f"augmentation requires square patches, got {pair.lr.shape}")
    hflip = bool(rng.random() < 0.5)
    vflip = bool(rng.random() < 0.5)
    rot = int(rng.integers(4))
    return PatchPair(
        lr=apply_augmentation(pair.lr, hflip, vflip, rot),
        hr=apply_augmentation(pair.hr, hflip, vflip, rot),
        source=pair.source,
        offset=pair.offset,
        augmentation=f"h{int(hflip)}v{int(vflip)}r{rot}",
    )


def sample_patches(hr: np.ndarray, lr: np.ndarray, n: int, rng: np.random.Generator, patch: int = 64,
                   scale: int = 4, augmentation: bool = True, strict: bool = False,
                   source: str = "") -> list[PatchPair]:
    """Draw ``n`` aligned LR/HR crops at uniformly random offsets.

    An LR image smaller than ``patch`` yields an empty list with a warning,
    or raises in ``strict`` mode.
    """
    _, lh, lw = lr.shape
    if hr.shape[-2:] != (lh * scale, lw * scale):
        raise ConfigurationError(f"HR {hr.shape} is not {scale}x LR {lr.shape}")
    if lh < patch or lw < patch:
        message = f"image {source or '<memory>'} LR size {lh}x{lw} smaller than patch {patch}"
        if strict:
            raise ConfigurationError(message)
        logger.warning("%s; skipped", message)
        return []
    hp = patch * scale
    pairs = []
    for _ in range(n):
        y = int(rng.integers(0, lh - patch + 1))
        x = int(rng.integers(0, lw - patch + 1))
        pair = PatchPair(
            lr=lr[:, y:y + patch, x:x + patch].copy(),
            hr=hr[:, y * scale:y * scale + hp, x * scale:x * scale + hp].copy(),
            source=source,
            offset=(y, x),
        )
        pairs.append(augment(pair, rng) if augmentation else pair)
    return pairs


@dataclass
class ImagePair:
    name: str
    hr: np.ndarray
    lr: np.ndarray


@dataclass
class PairedDataset:
    """Aligned HR/LR images; LR is synthesized by bicubic downscaling when absent."""

    pairs: list[ImagePair]
    scale: int = 4
    skipped: list[str] = field(default_factory=list)

    @classmethod
    def from_directory(cls, hr_dir, lr_dir=None, scale: int = 4) -> "PairedDataset":
        pairs = []
        hr_paths = list_pngs(hr_dir)
        if not hr_paths:
            raise FileNotFoundError(f"no PNG images in {hr_dir}")
        for path in hr_paths:
            hr = modcrop(load_png(path), scale)
            if lr_dir is not None:
                lr_path = Path(lr_dir) / path.name
                lr = load_png(lr_path)
                if lr.shape[-2:] != (hr.shape[1] // scale, hr.shape[2] // scale):
                    raise ConfigurationError(f"LR {lr_path} has shape {lr.shape}, expected HR/{scale}")
            else:
                lr = downscale(hr, scale)
            pairs.append(ImagePair(path.name, hr, lr))
        return cls(pairs=pairs, scale=scale)

    @classmethod
    def from_arrays(cls, images: Sequence[tuple[str, np.ndarray, Optional[np.ndarray]]],
                    scale: int = 4) -> "PairedDataset":
        pairs = []
        for name, hr, lr in images:
            hr = modcrop(np.asarray(hr, dtype=np.float32), scale)
            lr = downscale(hr, scale) if lr is None else np.asarray(lr, dtype=np.float32)
            pairs.append(ImagePair(name, hr, lr))
        return cls(pairs=pairs, scale=scale)

    def __len__(self) -> int:
        return len(self.pairs)

    def usable(self, patch: int) -> list[ImagePair]:
        return [p for p in self.pairs if min(p.lr.shape[-2:]) >= patch]

    def sample_batch(self, batch_size: int, rng: np.random.Generator, patch: int = 64,
                     per_image: int = 8, augmentation: bool = True,
                     strict: bool = False) -> tuple[np.ndarray, np.ndarray, list[PatchPair]]:
        """Collect ``batch_size`` pairs, ``per_image`` at a time from randomly chosen images."""
        if strict and len(self.usable(patch)) < len(self.pairs):
            small = [p.name for p in self.pairs if min(p.lr.shape[-2:]) < patch]
            raise ConfigurationError(f"images smaller than patch {patch}: {', '.join(small)}")
        candidates = self.usable(patch)
        if not candidates:
            raise ConfigurationError(f"no image has an LR side of at least {patch} pixels")
        pairs: list[PatchPair] = []
        while len(pairs) < batch_size:
            item = candidates[int(rng.integers(len(candidates)))]
            take = min(per_image, batch_size - len(pairs))
            pairs.extend(sample_patches(item.hr, item.lr, take, rng, patch=patch, scale=self.scale,
                                        augmentation=augmentation, source=item.name))
        lr = np.stack([p.lr for p in pairs]).astype(np.float32)
        hr = np.stack([p.hr for p in pairs]).astype(np.float32)
        return lr, hr, pairs


def find_images(path) -> list[Path]:
    """A single PNG path or every PNG in a directory."""
    path = Path(path)
    if path.is_dir():
        return list_pngs(path)
    if not path.exists():
        raise FileNotFoundError(f"input not found: {path}")
    return [path]

