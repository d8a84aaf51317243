"""Image helpers. Images are ``H x W x C`` float arrays in [-1, 1].

Export maps ``v`` to ``round((v + 1) * 127.5)`` clipped to 0..255; import is
the inverse ``u / 127.5 - 1``.
"""
from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image as PILImage
from scipy import ndimage


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.clip(np.rint((np.asarray(img, np.float64) + 1.0) * 127.5), 0, 255).astype(np.uint8)


def from_uint8(arr: np.ndarray) -> np.ndarray:
    return (np.asarray(arr, np.float32) / np.float32(127.5) - np.float32(1.0)).astype(np.float32)


def save_png(path, img: np.ndarray) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    PILImage.fromarray(to_uint8(img)).save(path)
    return path


def load_png(path) -> np.ndarray:
    with PILImage.open(path) as im:
        return from_uint8(np.asarray(im.convert("RGB")))


def resize(img: np.ndarray, size: int) -> np.ndarray:
    """Bilinear resize to ``size x size``; identity when already that size."""
    img = np.asarray(img, np.float32)
    if img.ndim != 3 or img.shape[0] == 0 or img.shape[1] == 0:
        raise ValueError(f"cannot resize empty or malformed image of shape {img.shape}")
    h, w, _ = img.shape
    if (h, w) == (size, size):
        return img
    return ndimage.zoom(img, (size / h, size / w, 1), order=1, mode="nearest",
                        grid_mode=True).astype(np.float32)


def tile(images, columns: int, pad: int = 1, fill: float = 1.0) -> np.ndarray:
    """Arrange equally sized images in a grid."""
    images = [np.asarray(i) for i in images]
    h, w, c = images[0].shape
    rows = -(-len(images) // columns)
    grid = np.full((rows * (h + pad) + pad, columns * (w + pad) + pad, c), fill, np.float32)
    for k, im in enumerate(images):
        r, q = divmod(k, columns)
        y, x = pad + r * (h + pad), pad + q * (w + pad)
        grid[y:y + h, x:x + w] = im
    return grid
