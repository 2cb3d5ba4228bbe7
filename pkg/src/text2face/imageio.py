"""8-bit RGB image files. PPM (P6) is handled natively; PNG goes through Pillow."""

from __future__ import annotations

import os
import re
from pathlib import Path

import numpy as np

from .errors import DataError


def to_uint8(img: np.ndarray) -> np.ndarray:
    """(3, H, W) floats in [-1, 1] -> (H, W, 3) uint8."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 3 or img.shape[0] != 3:
        raise DataError(f"expected a (3, H, W) image, got shape {img.shape}")
    q = np.rint((np.clip(img, -1.0, 1.0) + 1.0) * 127.5)
    return q.astype(np.uint8).transpose(1, 2, 0)


def from_uint8(pixels: np.ndarray) -> np.ndarray:
    """(H, W, 3) uint8 -> (3, H, W) floats in [-1, 1]."""
    return pixels.astype(np.float64).transpose(2, 0, 1) / 127.5 - 1.0


def quantize(img: np.ndarray) -> np.ndarray:
    """Round an image to the values an 8-bit file can represent."""
    return from_uint8(to_uint8(img))


def write_ppm(path: str | os.PathLike, pixels: np.ndarray) -> None:
    h, w, _ = pixels.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(pixels, dtype=np.uint8).tobytes())


_PPM_HEADER = re.compile(rb"^P6\s+(?:#[^\n]*\n\s*)*(\d+)\s+(?:#[^\n]*\n\s*)*(\d+)\s+(?:#[^\n]*\n\s*)*(\d+)\s")


def read_ppm(path: str | os.PathLike) -> np.ndarray:
    with open(path, "rb") as fh:
        blob = fh.read()
    m = _PPM_HEADER.match(blob)
    if not m:
        raise DataError(f"{path}: not a binary PPM (P6) image")
    w, h, maxval = (int(g) for g in m.groups())
    if maxval != 255:
        raise DataError(f"{path}: only 8-bit PPM (maxval 255) is supported, got {maxval}")
    body = blob[m.end():m.end() + w * h * 3]
    if len(body) != w * h * 3:
        raise DataError(f"{path}: truncated pixel data")
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w, 3).copy()


def save_image(path: str | os.PathLike, img: np.ndarray) -> None:
    """Write a (3, H, W) image in [-1, 1] as .ppm or .png (chosen by suffix)."""
    pixels = to_uint8(img)
    suffix = Path(path).suffix.lower()
    if suffix == ".ppm":
        write_ppm(path, pixels)
    elif suffix == ".png":
        from PIL import Image

        Image.fromarray(pixels).save(path, format="PNG")
    else:
        raise DataError(f"unsupported image format {suffix!r} (use .ppm or .png)")


def load_image(path: str | os.PathLike) -> np.ndarray:
    """Read a .ppm or .png file as a (3, H, W) image in [-1, 1]."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"image file not found: {path}")
    suffix = path.suffix.lower()
    try:
        if suffix == ".ppm":
            pixels = read_ppm(path)
        elif suffix == ".png":
            from PIL import Image

            with Image.open(path) as im:
                if im.mode != "RGB":
                    raise DataError(f"{path}: expected 8-bit RGB PNG, got mode {im.mode}")
                pixels = np.asarray(im, dtype=np.uint8).copy()
        else:
            raise DataError(f"unsupported image format {suffix!r} (use .ppm or .png)")
    except DataError:
        raise
    except Exception as exc:
        raise DataError(f"cannot decode image {path}: {exc}") from None
    return from_uint8(pixels)


def image_grid(images, separator: int = 2) -> np.ndarray:
    """Lay images out in one row with white separator columns."""
    images = [np.asarray(i, dtype=np.float64) for i in images]
    h = images[0].shape[1]
    sep = np.ones((3, h, separator))
    parts = []
    for i, img in enumerate(images):
        if img.shape[1] != h:
            raise DataError("grid images must share a height")
        if i:
            parts.append(sep)
        parts.append(img)
    return np.concatenate(parts, axis=2)
