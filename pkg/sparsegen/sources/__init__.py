"""
Image sources.

- folder: directory ingestion into a Dataset (decoding and resizing through Pillow)
- toy: synthetic corpora for desk-scale runs
"""

from .folder import Dataset, load_dataset, load_image, read_pixels
from .toy import make_texture_corpus, make_toy_corpus, write_corpus

__all__ = [
    "Dataset",
    "load_dataset",
    "load_image",
    "read_pixels",
    "make_toy_corpus",
    "make_texture_corpus",
    "write_corpus",
]
