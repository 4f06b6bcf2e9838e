"""Binary PGM (P5) output for prototype tiles and generated-sample sheets."""

from __future__ import annotations

import math

import numpy as np

from .errors import DomainError


def to_gray(image: np.ndarray) -> np.ndarray:
    """Min-max scale one 2-D image to uint8 [0, 255]."""
    img = np.asarray(image, dtype=np.float64)
    lo, hi = img.min(), img.max()
    if hi - lo < 1e-300:
        return np.zeros(img.shape, dtype=np.uint8)
    return np.round((img - lo) / (hi - lo) * 255.0).astype(np.uint8)


def tile_images(images: np.ndarray, grid_h: int | None = None,
                grid_w: int | None = None, pad: int = 1,
                pad_value: int = 128) -> np.ndarray:
    """Arrange (M, H, W) images into a padded uint8 tile grid.

    Each image is min-max scaled individually.  Without explicit grid
    extents a near-square layout is chosen.
    """
    images = np.asarray(images, dtype=np.float64)
    if images.ndim != 3:
        raise DomainError(f"expected (M, H, W) images, got shape {images.shape}")
    m, h, w = images.shape
    if grid_h is None or grid_w is None:
        grid_w = int(math.ceil(math.sqrt(m)))
        grid_h = int(math.ceil(m / grid_w))
    if grid_h * grid_w < m:
        raise DomainError(f"grid {grid_h}x{grid_w} too small for {m} images")
    out = np.full((grid_h * (h + pad) + pad, grid_w * (w + pad) + pad),
                  pad_value, dtype=np.uint8)
    for i in range(m):
        r, c = divmod(i, grid_w)
        y, x = pad + r * (h + pad), pad + c * (w + pad)
        out[y:y + h, x:x + w] = to_gray(images[i])
    return out


def write_pgm(image: np.ndarray, path) -> None:
    """Write a 2-D uint8 array as binary PGM with maxval 255."""
    img = np.asarray(image)
    if img.ndim != 2:
        raise DomainError("PGM output needs a 2-D image")
    if img.dtype != np.uint8:
        img = to_gray(img)
    h, w = img.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(img.tobytes())


def read_pgm(path) -> np.ndarray:
    """Read back a binary PGM written by :func:`write_pgm`."""
    with open(path, "rb") as f:
        if f.readline().strip() != b"P5":
            raise DomainError("not a binary PGM file")
        w, h = (int(v) for v in f.readline().split())
        maxval = int(f.readline())
        if maxval != 255:
            raise DomainError("expected maxval 255")
        data = f.read(w * h)
    return np.frombuffer(data, dtype=np.uint8).reshape(h, w)
