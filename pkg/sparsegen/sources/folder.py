"""
Image-folder ingestion.

Files are read in lexicographic order with Pillow, center-cropped to a square,
resized bilinearly to the target size and scaled to [-1, 1].
"""

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Tuple, Union

import numpy as np
from PIL import Image

from ..errors import DatasetError
from ..tensor_ops import get_dtype

logger = logging.getLogger(__name__)


@dataclass
class Dataset:
    """N images as (N, width, height, channels) in [-1, 1], with their source paths."""

    images: np.ndarray
    paths: List[str]

    def __post_init__(self):
        if self.images.ndim != 4:
            raise DatasetError(
                f"dataset images must be (N, w, h, c), got {self.images.shape}"
            )
        if len(self.paths) != self.images.shape[0]:
            raise DatasetError(
                f"{len(self.paths)} paths for {self.images.shape[0]} images"
            )

    def __len__(self) -> int:
        return self.images.shape[0]

    @property
    def image_shape(self) -> Tuple[int, int, int]:
        return tuple(self.images.shape[1:])


def read_pixels(path: Union[str, Path]) -> np.ndarray:
    """
    Decode any format Pillow reads into (rows, cols, channels) floats in [0, 1].

    16-bit grayscale keeps its depth; palette, alpha and CMYK images are
    converted to RGB.

    Raises:
        FileNotFoundError: the file does not exist
        DatasetError: Pillow cannot decode the file
    """
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"no image file at {path}")
    try:
        with Image.open(path) as img:
            img.load()
            if img.mode.startswith("I"):
                pixels = np.asarray(img, dtype=np.float64)[:, :, None] / 65535.0
            elif img.mode in ("1", "L"):
                gray = np.asarray(img.convert("L"), dtype=np.float64)
                pixels = gray[:, :, None] / 255.0
            else:
                pixels = np.asarray(img.convert("RGB"), dtype=np.float64) / 255.0
    except (OSError, ValueError, SyntaxError) as e:
        raise DatasetError(f"cannot decode {path}: {e}") from e
    return np.clip(pixels, 0.0, 1.0)


def center_crop(pixels: np.ndarray) -> np.ndarray:
    rows, cols = pixels.shape[:2]
    side = min(rows, cols)
    top = (rows - side) // 2
    left = (cols - side) // 2
    return pixels[top:top + side, left:left + side]


def bilinear_resize(pixels: np.ndarray, rows: int, cols: int) -> np.ndarray:
    """Resize (rows, cols, channels) floats channel by channel, bilinearly."""
    if pixels.shape[:2] == (rows, cols):
        return pixels
    planes = []
    for c in range(pixels.shape[2]):
        plane = Image.fromarray(np.ascontiguousarray(pixels[:, :, c], dtype=np.float32))
        resized = plane.resize((cols, rows), Image.Resampling.BILINEAR)
        planes.append(np.asarray(resized, dtype=np.float64))
    return np.stack(planes, axis=2)


def to_tensor(pixels: np.ndarray, size: int, channels: int = 3) -> np.ndarray:
    """Pixels (rows, cols, c) in [0, 1] -> tensor (width, height, c) in [-1, 1]."""
    img = bilinear_resize(center_crop(pixels), size, size)
    img = np.clip(img, 0.0, 1.0) * 2.0 - 1.0
    if img.shape[2] != channels:
        if img.shape[2] == 1:
            img = np.repeat(img, channels, axis=2)
        else:
            img = img.mean(axis=2, keepdims=True)
    return np.transpose(img, (1, 0, 2)).astype(get_dtype())


def load_image(path: Union[str, Path], size: int, channels: int = 3) -> np.ndarray:
    """One image file as a (size, size, channels) tensor in [-1, 1]."""
    return to_tensor(read_pixels(path), size, channels)


def load_dataset(
    directory: Union[str, Path],
    size: int,
    limit: Optional[int] = None,
    channels: int = 3,
) -> Dataset:
    """
    Load every decodable image of a directory.

    Args:
        directory: folder of images
        size: target width and height
        limit: keep at most this many images (first in lexicographic order)
        channels: 3 for colour, 1 for grayscale

    Returns:
        Dataset of (N, size, size, channels) tensors
    """
    directory = Path(directory)
    if not directory.is_dir():
        raise DatasetError(f"{directory} is not a directory")
    files = sorted(
        (p for p in directory.iterdir() if p.is_file()), key=lambda p: p.name
    )
    if not files:
        raise DatasetError(f"{directory} contains no files")

    images: List[np.ndarray] = []
    paths: List[str] = []
    for path in files:
        if limit is not None and len(images) >= limit:
            break
        try:
            pixels = read_pixels(path)
        except (DatasetError, OSError) as e:
            logger.warning(f"⚠️ Skipping {path}: {e}")
            continue
        images.append(to_tensor(pixels, size, channels))
        paths.append(str(path))

    if not images:
        raise DatasetError(f"no decodable images in {directory}")
    logger.info(f"📂 Loaded {len(images)} images from {directory}")
    return Dataset(images=np.stack(images), paths=paths)
