"""Whole-image super-resolution by tiling, per-tile inference, and stitching."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Union

import numpy as np

from .errors import ConfigurationError, UsageError
from .model import SrModel
from .tensor import Tensor, no_grad

Upscaler = Callable[[np.ndarray], np.ndarray]


@dataclass(frozen=True)
class TileGrid:
    tile: int = 64
    overlap: int = 0

    def __post_init__(self):
        if self.tile < 1:
            raise UsageError(f"tile size must be positive, got {self.tile}")
        if not 0 <= self.overlap < self.tile:
            raise UsageError(f"overlap must be in [0, tile), got {self.overlap}")

    def offsets(self, length: int) -> list[int]:
        """Tile starts along one axis; the last tile is clamped to the border."""
        if length <= self.tile:
            return [0]
        stride = self.tile - self.overlap
        starts = list(range(0, length - self.tile, stride))
        starts.append(length - self.tile)
        return starts

    def tiles(self, height: int, width: int) -> list[tuple[int, int, int, int]]:
        """(y, x, h, w) LR boxes covering an image in raster order."""
        th, tw = min(self.tile, height), min(self.tile, width)
        return [(y, x, th, tw) for y in self.offsets(height) for x in self.offsets(width)]


def model_upscaler(model: SrModel, batch: int = 8) -> Callable[[np.ndarray], np.ndarray]:
    """Wrap a model as a gradient-free function on stacked (N, 3, h, w) tiles."""

    def run(tiles: np.ndarray) -> np.ndarray:
        outs = []
        with no_grad():
            for i in range(0, len(tiles), batch):
                chunk = Tensor(np.ascontiguousarray(tiles[i:i + batch], dtype=model.dtype))
                outs.append(model(chunk).data)
        return np.concatenate(outs)

    run.scale = model.config.scale  # type: ignore[attr-defined]
    return run


def super_resolve(model: Union[SrModel, Upscaler], lr: np.ndarray, grid: TileGrid = TileGrid(),
                  scale: int = None) -> np.ndarray:
    """Upscale ``lr`` (3, H, W) tile by tile and average overlapping HR pixels.

    ``model`` is an :class:`SrModel` or any callable mapping a stack of
    (N, 3, h, w) tiles to (N, 3, s*h, s*w). The result is clipped to [0, 1].
    """
    if isinstance(model, SrModel):
        fn = model_upscaler(model)
        scale = model.config.scale if scale is None else scale
        if scale != model.config.scale:
            raise ConfigurationError(f"requested scale {scale} but model upsamples by {model.config.scale}")
    else:
        fn = model
        scale = getattr(model, "scale", 4) if scale is None else scale
    lr = np.asarray(lr)
    if lr.ndim != 3 or lr.shape[0] != 3:
        raise UsageError(f"super_resolve expects (3, H, W), got {lr.shape}")
    _, h, w = lr.shape
    boxes = grid.tiles(h, w)
    tiles = np.stack([lr[:, y:y + th, x:x + tw] for y, x, th, tw in boxes])
    outs = np.asarray(fn(tiles))
    th, tw = boxes[0][2], boxes[0][3]
    if outs.shape != (len(boxes), 3, th * scale, tw * scale):
        raise ConfigurationError(f"upscaler returned {outs.shape[1:]} for {th}x{tw} tiles at scale {scale}")
    acc = np.zeros((3, h * scale, w * scale), dtype=np.float64)
    count = np.zeros((h * scale, w * scale), dtype=np.float64)
    for (y, x, bh, bw), out in zip(boxes, outs):
        ys, xs = y * scale, x * scale
        acc[:, ys:ys + bh * scale, xs:xs + bw * scale] += out
        count[ys:ys + bh * scale, xs:xs + bw * scale] += 1.0
    return np.clip(acc / count, 0.0, 1.0).astype(np.float32)


def nearest_upscale(tiles: np.ndarray, scale: int = 4) -> np.ndarray:
    """Nearest-neighbour upsampling along the last two axes."""
    return np.repeat(np.repeat(tiles, scale, axis=-2), scale, axis=-1)
