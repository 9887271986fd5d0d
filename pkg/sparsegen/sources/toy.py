"""
Synthetic training corpora.

make_toy_corpus draws coloured rectangles over a dark background plus one
Gabor-like stroke per image; make_texture_corpus draws brick-wall textures
with random brick sizes, offsets and colours. Both are deterministic in seed.
"""

import logging
from pathlib import Path
from typing import List, Union

import numpy as np

from ..render import to_pixels, write_image
from ..tensor_ops import get_dtype
from .folder import Dataset

logger = logging.getLogger(__name__)


def _gabor(size: int, rng: np.random.Generator) -> np.ndarray:
    theta = rng.uniform(0.0, np.pi)
    wavelength = rng.uniform(4.0, 8.0)
    spread = rng.uniform(1.5, 3.0)
    phase = rng.uniform(0.0, 2 * np.pi)
    cx, cy = rng.uniform(size * 0.25, size * 0.75, size=2)
    x, y = np.meshgrid(np.arange(size) - cx, np.arange(size) - cy, indexing="ij")
    xr = x * np.cos(theta) + y * np.sin(theta)
    yr = -x * np.sin(theta) + y * np.cos(theta)
    envelope = np.exp(-(xr ** 2 + (0.5 * yr) ** 2) / (2 * spread ** 2))
    return envelope * np.cos(2 * np.pi * xr / wavelength + phase)


def _toy_image(size: int, channels: int, rng: np.random.Generator) -> np.ndarray:
    img = np.empty((size, size, channels))
    img[:] = rng.uniform(-1.0, -0.4, size=channels)
    for _ in range(rng.integers(1, 3, endpoint=True)):
        w, h = rng.integers(3, max(4, size // 2), size=2, endpoint=True)
        x0 = rng.integers(0, size - w + 1)
        y0 = rng.integers(0, size - h + 1)
        img[x0:x0 + w, y0:y0 + h] = rng.uniform(-1.0, 1.0, size=channels)
    color = rng.uniform(0.3, 1.0, size=channels) * rng.choice([-1.0, 1.0])
    img += 0.8 * _gabor(size, rng)[:, :, None] * color
    return np.clip(img, -1.0, 1.0)


def _brick_image(size: int, channels: int, rng: np.random.Generator) -> np.ndarray:
    brick_h = int(rng.integers(3, 5, endpoint=True))
    brick_w = int(rng.integers(5, 8, endpoint=True))
    shift_x, shift_y = rng.integers(0, brick_w), rng.integers(0, brick_h)
    brick = rng.uniform(-0.6, 0.6, size=channels)
    mortar = rng.uniform(0.6, 1.0, size=channels)
    x, y = np.meshgrid(
        np.arange(size) + shift_x, np.arange(size) + shift_y, indexing="ij"
    )
    row = y // brick_h
    x_in_row = x + (row % 2) * (brick_w // 2)
    is_mortar = (y % brick_h == 0) | (x_in_row % brick_w == 0)
    img = np.where(is_mortar[:, :, None], mortar, brick)
    img = img + rng.normal(0.0, 0.05, size=img.shape)
    return np.clip(img, -1.0, 1.0)


def _corpus(kind: str, make, n: int, size: int, seed: int, channels: int) -> Dataset:
    rng = np.random.default_rng(seed)
    images = np.stack([make(size, channels, rng) for _ in range(n)]).astype(get_dtype())
    logger.debug(f"Generated {n} {kind} images of size {size}")
    return Dataset(images=images, paths=[f"{kind}/{i:04d}" for i in range(n)])


def make_toy_corpus(
    n: int, size: int = 16, seed: int = 0, channels: int = 3
) -> Dataset:
    return _corpus("toy", _toy_image, n, size, seed, channels)


def make_texture_corpus(
    n: int, size: int = 16, seed: int = 0, channels: int = 3
) -> Dataset:
    return _corpus("texture", _brick_image, n, size, seed, channels)


def write_corpus(dataset: Dataset, directory: Union[str, Path]) -> List[Path]:
    """Write each image as a PPM (PGM for one channel) named by index."""
    directory = Path(directory)
    suffix = ".ppm" if dataset.images.shape[-1] == 3 else ".pgm"
    written = [
        write_image(directory / f"{i:04d}{suffix}", to_pixels(img, lo=-1.0, hi=1.0))
        for i, img in enumerate(dataset.images)
    ]
    logger.info(f"🖼️ Wrote {len(written)} images to {directory}")
    return written
