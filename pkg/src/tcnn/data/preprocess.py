"""Resize, crop, flip and mean-subtract images into (1, 3, h, w) tensors."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .images import read_image


@dataclass(frozen=True)
class PreprocessSpec:
    resize_to: tuple[int, int] | None = None
    crop: tuple[int, int] | None = None
    crop_policy: str = "random"  # applies in train mode; eval always center-crops
    mean: tuple[float, float, float] = (0.0, 0.0, 0.0)
    horizontal_flip: bool = False

    def __post_init__(self):
        if self.crop_policy not in ("center", "random"):
            raise ValueError(f"crop_policy must be 'center' or 'random', got {self.crop_policy!r}")
        if self.crop and self.resize_to and (self.crop[0] > self.resize_to[0] or self.crop[1] > self.resize_to[1]):
            raise ValueError(f"crop {self.crop} exceeds resize target {self.resize_to}")

    def output_size(self, h: int, w: int) -> tuple[int, int]:
        if self.crop:
            return self.crop
        return self.resize_to or (h, w)


def resize_bilinear(img: np.ndarray, h: int, w: int) -> np.ndarray:
    """Bilinear resample of (c, H, W) with half-pixel centres and edge clamping."""
    c, H, W = img.shape
    if (H, W) == (h, w):
        return img.copy()

    def axis(n_out, n_in):
        pos = np.clip((np.arange(n_out) + 0.5) * n_in / n_out - 0.5, 0, n_in - 1)
        lo = np.floor(pos).astype(int)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, pos - lo

    y0, y1, wy = axis(h, H)
    x0, x1, wx = axis(w, W)
    top = img[:, y0][:, :, x0] * (1 - wx) + img[:, y0][:, :, x1] * wx
    bot = img[:, y1][:, :, x0] * (1 - wx) + img[:, y1][:, :, x1] * wx
    return top * (1 - wy)[:, None] + bot * wy[:, None]


def crop_offset(h: int, w: int, ch: int, cw: int, mode: str, rng=None) -> tuple[int, int]:
    if ch > h or cw > w:
        raise ValueError(f"crop {ch}x{cw} larger than image {h}x{w}")
    if mode == "train" and rng is not None:
        return int(rng.integers(0, h - ch + 1)), int(rng.integers(0, w - cw + 1))
    return (h - ch) // 2, (w - cw) // 2


def preprocess(image, spec: PreprocessSpec, mode: str = "eval", rng=None) -> np.ndarray:
    """Image (path or (3, h, w) array in [0, 1]) to a mean-subtracted (1, 3, h, w) tensor.

    Random crops and flips happen only in train mode with an rng; eval mode
    consumes no randomness.
    """
    img = read_image(image) if isinstance(image, (str, Path)) else np.asarray(image, dtype=np.float64)
    if spec.resize_to:
        img = resize_bilinear(img, *spec.resize_to)
    if spec.crop:
        ch, cw = spec.crop
        use_rng = rng if spec.crop_policy == "random" else None
        oy, ox = crop_offset(img.shape[1], img.shape[2], ch, cw, mode, use_rng)
        img = img[:, oy : oy + ch, ox : ox + cw]
    if mode == "train" and spec.horizontal_flip and rng is not None and rng.random() < 0.5:
        img = img[:, :, ::-1]
    out = img - np.asarray(spec.mean, dtype=np.float64).reshape(3, 1, 1)
    return np.ascontiguousarray(out[None])


def channel_means(images) -> tuple[float, float, float]:
    """Per-channel mean over an iterable of (3, h, w) arrays, each pixel weighted equally."""
    total = np.zeros(3)
    count = 0
    for img in images:
        total += img.reshape(3, -1).sum(axis=1)
        count += img.shape[1] * img.shape[2]
    if count == 0:
        raise ValueError("no images to average")
    return tuple(float(v) for v in total / count)
