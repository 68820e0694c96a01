"""
8-bit lossless raster I/O (binary PPM for colour, PGM for grey) via Pillow.

Floats in [0, 1] are quantised with round-half-to-even onto 0..255, so a
write/read round trip is off by at most 1/(2·255) per channel.
"""

from __future__ import annotations

import logging
from pathlib import Path
from typing import Optional, Tuple

import numpy as np
from PIL import Image, UnidentifiedImageError

from app.core.errors import ContractError, DatasetIOError, ImageDecodeError

logger = logging.getLogger(__name__)

_DECODE_FAILURES = (OSError, ValueError, SyntaxError, UnidentifiedImageError)


def quantize(image: np.ndarray) -> np.ndarray:
    return np.rint(np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0) * 255.0).astype(np.uint8)


def _save(pixels: np.ndarray, path: Path) -> Path:
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        Image.fromarray(pixels).save(path, format="PPM")
    except OSError as exc:
        raise DatasetIOError(f"cannot write image {path}: {exc}", path=str(path)) from exc
    return path


def write_image(path: str | Path, image: np.ndarray) -> Path:
    """Write an (H, W, 3) float image in [0, 1] as binary PPM."""
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ContractError(f"expected an H×W×3 image, got {image.shape}")
    return _save(quantize(image), Path(path))


def write_gray(path: str | Path, image: np.ndarray) -> Path:
    """Write an (H, W) uint8 or [0, 1] float image as binary PGM."""
    image = np.asarray(image)
    pixels = image if image.dtype == np.uint8 else quantize(image)
    return _save(pixels, Path(path))


def _decode(path: Path, mode: str) -> np.ndarray:
    if not path.is_file():
        raise DatasetIOError(f"image not found: {path}", path=str(path))
    try:
        with Image.open(path) as img:
            img.load()
            if img.mode != mode:
                raise ImageDecodeError(f"{path}: expected {mode} image, found {img.mode}", path=str(path))
            return np.asarray(img, dtype=np.uint8).copy()
    except ImageDecodeError:
        raise
    except _DECODE_FAILURES as exc:
        raise ImageDecodeError(f"cannot decode image {path}: {exc}", path=str(path)) from exc


def read_image(path: str | Path, expect_size: Optional[Tuple[int, int]] = None) -> np.ndarray:
    """Read a PPM as an (H, W, 3) float64 image in [0, 1].

    ``expect_size`` is (width, height); a mismatch is a decode error.
    """
    path = Path(path)
    pixels = _decode(path, "RGB")
    if expect_size is not None and (pixels.shape[1], pixels.shape[0]) != tuple(expect_size):
        raise ImageDecodeError(
            f"{path}: size {pixels.shape[1]}×{pixels.shape[0]} != declared {expect_size[0]}×{expect_size[1]}",
            path=str(path),
        )
    return pixels.astype(np.float64) / 255.0


def read_gray(path: str | Path) -> np.ndarray:
    return _decode(Path(path), "L")
