"""PNG helpers; images are float arrays (H, W, 3) in a known value range."""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image


def to_uint8(img: np.ndarray, value_range=(-1.0, 1.0)) -> np.ndarray:
    lo, hi = value_range
    x = (np.asarray(img, dtype=np.float64) - lo) / (hi - lo)
    return np.round(np.clip(x, 0.0, 1.0) * 255.0).astype(np.uint8)


def save_png(img: np.ndarray, path, value_range=(-1.0, 1.0)) -> None:
    arr = to_uint8(img, value_range)
    if arr.ndim == 3 and arr.shape[-1] == 1:
        arr = arr[..., 0]
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(arr).save(path)


def load_png(path, value_range=(-1.0, 1.0)) -> np.ndarray:
    arr = np.asarray(Image.open(path), dtype=np.float64) / 255.0
    lo, hi = value_range
    return arr * (hi - lo) + lo
