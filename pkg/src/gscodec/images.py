"""8-bit PNG read/write for targets and renders."""

from __future__ import annotations

import os

import numpy as np
from PIL import Image


def read_png(path: str | os.PathLike) -> np.ndarray:
    """H x W x 3 float64 in [0, 1]."""
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0


def to_uint8(image: np.ndarray) -> np.ndarray:
    return np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)


def write_png(image: np.ndarray, path: str | os.PathLike) -> None:
    Image.fromarray(to_uint8(image)).save(path, format="PNG")
