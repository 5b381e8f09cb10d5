"""PNG and binary PPM reading/writing."""

from __future__ import annotations

import io
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

from .errors import InputError
from .metrics import to_uint8

SUFFIXES = (".png", ".ppm")


def read_image(path) -> np.ndarray:
    """Load an image as a float64 (3, H, W) array in [0, 1]."""
    path = Path(path)
    if not path.is_file():
        raise InputError(f"no such image: {path}")
    try:
        with Image.open(path) as im:
            if im.format not in ("PNG", "PPM"):
                raise InputError(f"{path}: unsupported image format {im.format}")
            arr = np.asarray(im.convert("RGB"), dtype=np.float64)
    except (UnidentifiedImageError, OSError, SyntaxError, ValueError) as exc:
        if isinstance(exc, InputError):
            raise
        raise InputError(f"{path}: cannot decode image ({exc})") from None
    return arr.transpose(2, 0, 1) / 255.0


def image_bytes(x: np.ndarray, fmt: str = "PNG") -> bytes:
    buf = io.BytesIO()
    Image.fromarray(to_uint8(x).transpose(1, 2, 0)).save(buf, format=fmt)
    return buf.getvalue()


def write_image(path, x: np.ndarray):
    from .model import write_atomic

    path = Path(path)
    fmt = "PPM" if path.suffix.lower() == ".ppm" else "PNG"
    write_atomic(path, image_bytes(x, fmt))


def list_images(folder) -> list[Path]:
    folder = Path(folder)
    if not folder.is_dir():
        raise InputError(f"not a directory: {folder}")
    return sorted(p for p in folder.iterdir() if p.suffix.lower() in SUFFIXES)
