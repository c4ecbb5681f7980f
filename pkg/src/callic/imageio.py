"""8-bit PNG and PPM/PGM reading and writing via Pillow."""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

from .errors import FormatError

SUFFIXES = (".png", ".ppm", ".pgm", ".pnm")


def read_image(path) -> np.ndarray:
    """``(H, W, C)`` uint8 with ``C`` 1 (grayscale) or 3 (RGB).

    Alpha and high-bit-depth images are rejected rather than silently
    altered, since the codec must reproduce pixels exactly.
    """
    try:
        with Image.open(path) as im:
            im.load()
            mode = im.mode
            if mode == "1":
                im, mode = im.convert("L"), "L"
            elif mode == "P" and "transparency" not in im.info:
                im, mode = im.convert("RGB"), "RGB"
            if mode not in ("L", "RGB"):
                raise FormatError(f"{path}: unsupported pixel mode {im.mode}")
            arr = np.asarray(im, dtype=np.uint8)
    except UnidentifiedImageError as exc:
        raise FormatError(f"{path}: not a PNG/PPM image") from exc
    return arr[..., None] if arr.ndim == 2 else arr


def write_image(path, image: np.ndarray):
    image = np.asarray(image, dtype=np.uint8)
    if image.ndim == 3 and image.shape[-1] == 1:
        image = image[..., 0]
    suffix = Path(path).suffix.lower()
    if suffix not in SUFFIXES:
        raise FormatError(f"cannot write {suffix!r}; use one of {', '.join(SUFFIXES)}")
    fmt = "PNG" if suffix == ".png" else "PPM"
    Image.fromarray(image).save(path, format=fmt)


def list_images(folder) -> list[Path]:
    return sorted(p for p in Path(folder).iterdir() if p.suffix.lower() in SUFFIXES)
