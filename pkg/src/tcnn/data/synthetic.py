"""Procedural texture classes for desk-scale experiments.

Each class is a stationary pattern with a random phase or offset, random
brightness, contrast and colour gain, and mild pixel noise, so neither the
position of structures nor the global colour identifies the class.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import gaussian_filter

from .manifest import DatasetManifest, Item

CLASS_NAMES = (
    "grating_30",
    "grating_120",
    "checkerboard",
    "blob_noise",
    "horizontal_stripes",
    "diagonal_stripes",
    "gaussian_noise",
    "speckle",
)


def _coords(size):
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    return yy, xx


def grating(size: int, angle_deg: float, period: float, phase: float) -> np.ndarray:
    """Sinusoid in [-1, 1] varying along direction ``angle_deg``."""
    yy, xx = _coords(size)
    t = np.deg2rad(angle_deg)
    return np.sin(2 * np.pi * (xx * np.cos(t) + yy * np.sin(t)) / period + phase)


def _square_wave(size, angle_deg, period, phase):
    return np.sign(grating(size, angle_deg, period, phase) + 1e-12)


def _pattern(cls: int, size: int, rng) -> np.ndarray:
    phase = rng.uniform(0, 2 * np.pi)
    if cls == 0:
        return grating(size, 30 + rng.uniform(-5, 5), rng.uniform(6, 10), phase)
    if cls == 1:
        return grating(size, 120 + rng.uniform(-5, 5), rng.uniform(6, 10), phase)
    if cls == 2:
        cell = rng.integers(4, 9)
        oy, ox = rng.integers(0, 2 * cell, size=2)
        yy, xx = _coords(size)
        return np.where(((yy + oy) // cell + (xx + ox) // cell) % 2 == 0, 1.0, -1.0)
    if cls == 3:
        blob = gaussian_filter(rng.standard_normal((size, size)), sigma=rng.uniform(2.0, 3.0), mode="wrap")
        return blob / (np.abs(blob).max() + 1e-12)
    if cls == 4:
        return _square_wave(size, 90 + rng.uniform(-3, 3), rng.uniform(8, 14), phase)
    if cls == 5:
        return _square_wave(size, 45 + rng.uniform(-3, 3), rng.uniform(8, 14), phase)
    if cls == 6:
        return np.clip(rng.standard_normal((size, size)) / 2.5, -1, 1)
    if cls == 7:
        out = np.zeros((size, size))
        hits = rng.random((size, size)) < 0.03
        out[hits] = rng.choice([-1.0, 1.0], size=int(hits.sum()))
        return out
    raise ValueError(f"no texture class {cls}")


def texture_image(cls: int, size: int, rng) -> np.ndarray:
    """One (3, size, size) image of class ``cls`` with values in [0, 1]."""
    pat = _pattern(cls, size, rng)
    level = rng.uniform(0.35, 0.65)
    contrast = rng.uniform(0.25, 0.35)
    gain = rng.uniform(0.85, 1.15, size=3)
    img = (level + contrast * pat)[None] * gain[:, None, None]
    img = img + rng.normal(0.0, 0.03, size=img.shape)
    return np.clip(img, 0.0, 1.0)


@dataclass
class SyntheticDataset:
    images: np.ndarray  # (n, 3, h, w) in [0, 1]
    labels: np.ndarray
    manifest: DatasetManifest

    def __len__(self):
        return len(self.labels)

    def subset(self, tag: str) -> "SyntheticDataset":
        idx = [i for i, it in enumerate(self.manifest.items) if it.split == tag]
        items = [self.manifest.items[i] for i in idx]
        return SyntheticDataset(self.images[idx], self.labels[idx], DatasetManifest(self.manifest.classes, items))


def synth_textures(
    class_count: int,
    per_class: int,
    image_size: int,
    rng,
    class_offset: int = 0,
    test_per_class: int = 0,
) -> SyntheticDataset:
    """``per_class`` training (plus ``test_per_class`` test) images for each class.

    Classes are ``CLASS_NAMES[class_offset : class_offset + class_count]`` and
    get dense ids from 0.  Items are generated class by class, train before
    test, from the single stream ``rng``.
    """
    if not 1 <= class_count or class_offset + class_count > len(CLASS_NAMES):
        raise ValueError(f"at most {len(CLASS_NAMES)} texture classes available")
    names = CLASS_NAMES[class_offset : class_offset + class_count]
    total = per_class + test_per_class
    images = np.empty((class_count * total, 3, image_size, image_size))
    labels = np.empty(class_count * total, dtype=np.int64)
    items = []
    for cid, name in enumerate(names):
        for j in range(total):
            i = cid * total + j
            images[i] = texture_image(class_offset + cid, image_size, rng)
            labels[i] = cid
            split = "train" if j < per_class else "test"
            items.append(Item(f"synthetic/{name}/{j:05d}", cid, split))
    manifest = DatasetManifest(list(enumerate(names)), items)
    return SyntheticDataset(images, labels, manifest)
