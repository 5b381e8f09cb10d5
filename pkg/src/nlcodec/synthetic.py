"""Procedural images and code blocks for tests, demos and toy training."""

from __future__ import annotations

import numpy as np


def synthetic_image(rng: np.random.Generator, height: int, width: int) -> np.ndarray:
    """(3, H, W) image in [0, 1]: smooth color gradient, flat shapes and a stripe texture."""
    yy, xx = np.mgrid[0:height, 0:width] / max(height, width)
    img = np.empty((3, height, width))
    for c in range(3):
        a, b, d = rng.uniform(-0.5, 0.5, size=3)
        img[c] = 0.5 + a * xx + b * yy + d * xx * yy
    for _ in range(rng.integers(2, 6)):
        color = rng.uniform(0, 1, size=3)[:, None]
        cy, cx = rng.uniform(0, height), rng.uniform(0, width)
        if rng.random() < 0.5:
            rad = rng.uniform(0.1, 0.35) * min(height, width)
            mask = (np.arange(height)[:, None] - cy) ** 2 + (np.arange(width)[None, :] - cx) ** 2 < rad**2
        else:
            hh, ww = rng.uniform(0.1, 0.5, size=2) * (height, width)
            mask = (np.abs(np.arange(height)[:, None] - cy) < hh) & (np.abs(np.arange(width)[None, :] - cx) < ww)
        img[:, mask] = color
    if rng.random() < 0.5:
        freq = rng.uniform(0.1, 0.5)
        ang = rng.uniform(0, np.pi)
        stripes = 0.1 * np.sin(freq * (np.cos(ang) * np.arange(width)[None, :] + np.sin(ang) * np.arange(height)[:, None]))
        img += stripes[None]
    return np.clip(img, 0.0, 1.0)


def synthetic_images(rng: np.random.Generator, n: int, height: int, width: int | None = None) -> np.ndarray:
    width = height if width is None else width
    return np.stack([synthetic_image(rng, height, width) for _ in range(n)])


def uniform_codes(rng, n, dims, levels=8) -> np.ndarray:
    return rng.integers(0, levels, size=(n, *dims))


def iid_codes(rng, n, dims, probs) -> np.ndarray:
    return rng.choice(len(probs), size=(n, *dims), p=probs)


def left_copy_codes(rng, n, dims, levels=8) -> np.ndarray:
    """Every code equals its left neighbour; the first column is uniform."""
    m, h, w = dims
    first = rng.integers(0, levels, size=(n, m, h, 1))
    return np.repeat(first, w, axis=3)


def repeated_texture_codes(rng, n, dims, levels=8, patterns=4) -> np.ndarray:
    """Blocks built from a few code vectors repeated across space.

    Each block draws ``patterns`` random M-vectors and places one at every
    position. Channel ``r`` is predictable from earlier positions that share
    the same channel prefix, wherever they lie in the plane, but not from any
    fixed local rule since the vectors change from block to block.
    """
    m, h, w = dims
    out = np.empty((n, m, h, w), dtype=np.int64)
    for i in range(n):
        book = rng.integers(0, levels, size=(patterns, m))
        which = rng.integers(0, patterns, size=(h, w))
        out[i] = book[which].transpose(2, 0, 1)
    return out
