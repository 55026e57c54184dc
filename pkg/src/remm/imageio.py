"""8-bit grayscale PNG input/output."""
from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image


def load_png(path) -> np.ndarray:
    """Read an image as float32 in [0, 1]; colour inputs are converted to luma."""
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"image not found: {p}")
    with Image.open(p) as im:
        return np.asarray(im.convert("L"), dtype=np.float32) / 255.0


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.clip(np.round(np.asarray(img, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def save_png(path, img: np.ndarray) -> None:
    Image.fromarray(to_uint8(img), mode="L").save(path, format="PNG")
