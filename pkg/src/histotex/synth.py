"""Procedurally generated texture dataset for desk-scale experiments.

Eight classes: stripes, checkerboard, dots and filtered noise, each at a fine
and a coarse spatial scale. Orientation, phase, tint and pixel noise vary per
image so the classes are only separable by texture, not colour.
"""

from __future__ import annotations

import math
from pathlib import Path
from typing import Optional

import numpy as np
from PIL import Image
from scipy import ndimage

from .rng import RngStream

TEXTURE_CLASS_NAMES = (
    "checker_coarse", "checker_fine", "dots_coarse", "dots_fine",
    "noise_coarse", "noise_fine", "stripes_coarse", "stripes_fine",
)

_FINE_PERIOD = 6.0
_COARSE_PERIOD = 20.0


def _stripes(gen: np.random.Generator, size: int, period: float) -> np.ndarray:
    theta = gen.uniform(0, math.pi)
    phase = gen.uniform(0, 2 * math.pi)
    period = period * gen.uniform(0.85, 1.15)
    ys, xs = np.mgrid[0:size, 0:size]
    wave = np.sin(2 * math.pi * (xs * math.cos(theta) + ys * math.sin(theta))
                  / period + phase)
    return 0.5 + 0.5 * wave


def _checker(gen: np.random.Generator, size: int, period: float) -> np.ndarray:
    period = period * gen.uniform(0.85, 1.15)
    ox, oy = gen.uniform(0, period, 2)
    ys, xs = np.mgrid[0:size, 0:size]
    a = np.sin(2 * math.pi * (xs + ox) / period)
    b = np.sin(2 * math.pi * (ys + oy) / period)
    return (np.sign(a * b) + 1.0) / 2.0


def _dots(gen: np.random.Generator, size: int, period: float) -> np.ndarray:
    period = period * gen.uniform(0.85, 1.15)
    ox, oy = gen.uniform(0, period, 2)
    ys, xs = np.mgrid[0:size, 0:size]
    # gaussian bumps on a square lattice
    dx = ((xs + ox) % period) - period / 2
    dy = ((ys + oy) % period) - period / 2
    r2 = dx ** 2 + dy ** 2
    sigma = period / 5.0
    return np.exp(-r2 / (2 * sigma ** 2))


def _noise(gen: np.random.Generator, size: int, period: float) -> np.ndarray:
    sigma = period / 4.0
    field = ndimage.gaussian_filter(gen.standard_normal((size, size)), sigma)
    lo, hi = field.min(), field.max()
    return (field - lo) / max(hi - lo, 1e-9)


_PATTERNS = {
    "stripes": _stripes,
    "checker": _checker,
    "dots": _dots,
    "noise": _noise,
}


def make_texture_image(class_name: str, gen: np.random.Generator,
                       size: int = 96) -> np.ndarray:
    """One (size, size, 3) uint8 texture sample."""
    pattern_name, scale = class_name.rsplit("_", 1)
    period = _FINE_PERIOD if scale == "fine" else _COARSE_PERIOD
    lum = _PATTERNS[pattern_name](gen, size, period)
    # random tint: colours carry no class signal
    lo = gen.uniform(0.0, 0.35, 3)
    hi = gen.uniform(0.65, 1.0, 3)
    img = lo + lum[:, :, None] * (hi - lo)
    img = img + gen.normal(0.0, 0.03, img.shape)
    return (np.clip(img, 0.0, 1.0) * 255).astype(np.uint8)


def make_texture_arrays(seed: int, per_class: int, size: int = 96,
                        class_names: tuple[str, ...] = TEXTURE_CLASS_NAMES
                        ) -> tuple[np.ndarray, np.ndarray]:
    """(images uint8 (N,H,W,3), labels) with ``per_class`` samples per class."""
    stream = RngStream(seed).child("synth")
    images = np.empty((per_class * len(class_names), size, size, 3), np.uint8)
    labels = np.empty(per_class * len(class_names), np.int64)
    pos = 0
    for label, cls in enumerate(class_names):
        for i in range(per_class):
            gen = stream.generator(cls, index=i)
            images[pos] = make_texture_image(cls, gen, size)
            labels[pos] = label
            pos += 1
    return images, labels


def texture_split_arrays(seed: int, per_class: tuple[int, int, int] = (100, 20, 20),
                         size: int = 96) -> dict[str, tuple[np.ndarray, np.ndarray]]:
    """In-memory train/val/test arrays scaled to [0,1]."""
    total = sum(per_class)
    images, labels = make_texture_arrays(seed, total, size)
    out: dict[str, tuple[np.ndarray, np.ndarray]] = {}
    offsets = (0, per_class[0], per_class[0] + per_class[1], total)
    for split, lo, hi in zip(("train", "val", "test"), offsets, offsets[1:]):
        keep = np.concatenate(
            [np.arange(c * total + lo, c * total + hi)
             for c in range(len(TEXTURE_CLASS_NAMES))])
        out[split] = (images[keep].astype(np.float32) / 255.0, labels[keep])
    return out


def generate_texture_dataset(root: str | Path, seed: int = 0,
                             per_class: int = 140, size: int = 96,
                             class_names: Optional[tuple[str, ...]] = None) -> int:
    """Write the dataset as a class-per-directory PNG tree; returns file count."""
    root = Path(root)
    names = class_names or TEXTURE_CLASS_NAMES
    stream = RngStream(seed).child("synth")
    count = 0
    for cls in names:
        cdir = root / cls
        cdir.mkdir(parents=True, exist_ok=True)
        for i in range(per_class):
            gen = stream.generator(cls, index=i)
            img = make_texture_image(cls, gen, size)
            Image.fromarray(img).save(cdir / f"{cls}_{i:04d}.png")
            count += 1
    return count
