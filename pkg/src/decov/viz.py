"""Tile weight vectors into a grayscale image and write it as PGM/PNG."""

from __future__ import annotations

import math
from pathlib import Path

import numpy as np


def tile_weights(W: np.ndarray, tile_shape=(28, 28), grid=None) -> np.ndarray:
    """Arrange the columns of ``W`` (n_in x n_units) as image tiles.

    Each tile is min-max scaled on its own to [0, 255]; constant tiles map
    to mid-gray. Tiles abut with no border, so 256 units of 28x28 produce a
    448 x 448 image.
    """
    n_in, units = W.shape
    th, tw = tile_shape
    if th * tw != n_in:
        raise ValueError(f"tile shape {tile_shape} does not hold {n_in} weights")
    if grid is None:
        cols = math.ceil(math.sqrt(units))
        grid = (math.ceil(units / cols), cols)
    rows, cols = grid
    img = np.zeros((rows * th, cols * tw), dtype=np.uint8)
    for k in range(units):
        w = W[:, k]
        lo, hi = w.min(), w.max()
        if hi > lo:
            t = (w - lo) / (hi - lo) * 255.0
        else:
            t = np.full_like(w, 127.5)
        r, c = divmod(k, cols)
        img[r * th:(r + 1) * th, c * tw:(c + 1) * tw] = np.rint(t).astype(np.uint8).reshape(th, tw)
    return img


def write_pgm(path, img: np.ndarray) -> None:
    """Binary (P5) 8-bit PGM."""
    img = np.asarray(img, dtype=np.uint8)
    h, w = img.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode() + img.tobytes())


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    parts = raw.split(b"\n", 3)
    if parts[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM")
    w, h = map(int, parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8).reshape(h, w)


def write_png(path, img: np.ndarray) -> bool:
    """Write a PNG if Pillow is installed; returns whether a file was written."""
    try:
        from PIL import Image
    except ImportError:
        return False
    Image.fromarray(np.asarray(img, dtype=np.uint8), mode="L").save(path)
    return True
