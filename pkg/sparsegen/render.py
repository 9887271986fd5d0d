"""
Image and tile-grid rendering.

Tensors are (width, height, channels); pixel (row, col) of the output file is
tensor element (x=col, y=row). Cells are normalized to [0, 255] by min-max over
the cell ("per-cell"), over all cells ("global") or on the fixed [-1, 1] scale
("fixed"). A cell whose min-max range is degenerate falls back to the fixed scale.
"""

import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import List, Literal, Optional, Sequence, Union

import numpy as np
from PIL import Image

from .errors import DimensionError

logger = logging.getLogger(__name__)

Normalization = Literal["per-cell", "global", "fixed"]


def _rgb(cell: np.ndarray) -> np.ndarray:
    if cell.ndim == 2:
        cell = cell[:, :, None]
    c = cell.shape[2]
    if c == 3:
        return cell
    if c == 1:
        return np.repeat(cell, 3, axis=2)
    return np.repeat(cell.mean(axis=2, keepdims=True), 3, axis=2)


def to_pixels(
    tensor: np.ndarray, lo: Optional[float] = None, hi: Optional[float] = None
) -> np.ndarray:
    """Map a (w, h, c) tensor to uint8 (rows, cols, c); [lo, hi] -> [0, 255]."""
    t = np.asarray(tensor, dtype=np.float64)
    if lo is None or hi is None:
        lo, hi = float(t.min()), float(t.max())
    if not hi > lo:
        lo, hi = -1.0, 1.0
    scaled = np.clip((t - lo) / (hi - lo), 0.0, 1.0) * 255.0
    return np.rint(scaled).astype(np.uint8).transpose(1, 0, 2)


@dataclass
class ImageGrid:
    cells: List[np.ndarray]
    rows: int
    cols: int
    pad: int = 1
    normalization: Normalization = "per-cell"
    pad_value: int = 255

    def __post_init__(self):
        if not self.cells:
            raise ValueError("an image grid needs at least one cell")
        if self.rows * self.cols < len(self.cells):
            raise ValueError(
                f"{self.rows}x{self.cols} grid cannot hold {len(self.cells)} cells"
            )
        shapes = {np.shape(c)[:2] for c in self.cells}
        if len(shapes) != 1:
            raise DimensionError(
                f"grid cells differ in size: {sorted(shapes)}", axis="cell"
            )

    @classmethod
    def auto(
        cls, cells: Sequence[np.ndarray], cols: Optional[int] = None, **kwargs
    ) -> "ImageGrid":
        cells = list(cells)
        cols = cols or max(1, math.ceil(math.sqrt(len(cells))))
        rows = max(1, math.ceil(len(cells) / cols))
        return cls(cells=cells, rows=rows, cols=cols, **kwargs)

    def to_pixels(self) -> np.ndarray:
        cells = [_rgb(np.asarray(c, dtype=np.float64)) for c in self.cells]
        cw, ch = cells[0].shape[:2]
        height = self.rows * ch + (self.rows + 1) * self.pad
        width = self.cols * cw + (self.cols + 1) * self.pad
        canvas = np.full((height, width, 3), self.pad_value, dtype=np.uint8)

        lo = hi = None
        if self.normalization == "fixed":
            lo, hi = -1.0, 1.0
        elif self.normalization == "global":
            lo = float(min(c.min() for c in cells))
            hi = float(max(c.max() for c in cells))
        for n, cell in enumerate(cells):
            r, q = divmod(n, self.cols)
            top = self.pad + r * (ch + self.pad)
            left = self.pad + q * (cw + self.pad)
            canvas[top:top + ch, left:left + cw] = to_pixels(cell, lo, hi)
        return canvas


def netpbm_path(path: Union[str, Path], channels: int = 3) -> Path:
    """The PPM (PGM for one channel) file written next to `path`."""
    return Path(path).with_suffix(".ppm" if channels == 3 else ".pgm")


def write_image(path: Union[str, Path], pixels: np.ndarray) -> Path:
    """
    Write uint8 (rows, cols) or (rows, cols, 1 | 3) pixels with Pillow.

    A binary PPM/PGM is always written: at `path` itself for a netpbm suffix,
    alongside it (see netpbm_path) when `path` asks for PNG.
    """
    path = Path(path)
    pixels = np.asarray(pixels)
    if pixels.dtype != np.uint8:
        raise ValueError(f"expected uint8 pixels, got {pixels.dtype}")
    if pixels.ndim == 3 and pixels.shape[2] == 1:
        pixels = pixels[:, :, 0]
    if pixels.ndim != 2 and not (pixels.ndim == 3 and pixels.shape[2] == 3):
        raise DimensionError(
            f"cannot write pixels of shape {pixels.shape}", axis="channel"
        )
    img = Image.fromarray(np.ascontiguousarray(pixels))
    path.parent.mkdir(parents=True, exist_ok=True)
    if path.suffix.lower() == ".png":
        img.save(path, format="PNG")
        img.save(netpbm_path(path, 1 if pixels.ndim == 2 else 3), format="PPM")
    else:
        img.save(path, format="PPM")
    return path


def render_grid(grid: ImageGrid, path: Union[str, Path]) -> Path:
    path = write_image(path, grid.to_pixels())
    logger.info(
        f"🖼️ Rendered {len(grid.cells)} cells ({grid.rows}x{grid.cols}) to {path}"
    )
    return path


def render_images(
    images: Sequence[np.ndarray], path: Union[str, Path], cols: Optional[int] = None
) -> Path:
    """Generated or reconstructed images, all on the fixed [-1, 1] scale."""
    cells = [np.asarray(img) for img in images]
    grid = ImageGrid.auto(cells, cols=cols, normalization="fixed")
    return render_grid(grid, path)
