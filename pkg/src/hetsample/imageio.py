"""Grayscale PNG/PGM reading and writing (8- and 16-bit)."""

from __future__ import annotations

import json
from pathlib import Path
from typing import Optional

import numpy as np
from PIL import Image, PngImagePlugin

from .errors import InputError

IMAGE_SUFFIXES = (".png", ".pgm")


def load_gray(path: str | Path) -> np.ndarray:
    """Load a grayscale image keeping its integer dtype (uint8 or uint16)."""
    try:
        with Image.open(path) as img:
            mode = img.mode
            if mode in ("1", "L", "P"):
                return np.asarray(img.convert("L"), dtype=np.uint8)
            if mode.startswith("I;16"):
                return np.asarray(img, dtype=np.uint16)
            if mode == "I":
                arr = np.asarray(img)
                if arr.min() < 0 or arr.max() > 65535:
                    raise InputError(f"{path}: pixel values outside the 16-bit range")
                return arr.astype(np.uint16)
    except OSError as exc:
        raise InputError(f"cannot read image {path}: {exc}") from exc
    raise InputError(f"{path}: expected a grayscale image, got mode {mode!r}")


def load_mask(path: str | Path) -> np.ndarray:
    """Nonzero pixels are foreground."""
    return load_gray(path) > 0


def save_png(path: str | Path, pixels: np.ndarray, metadata: Optional[dict] = None) -> None:
    pixels = np.ascontiguousarray(pixels)
    if pixels.dtype == bool:
        pixels = pixels.astype(np.uint8) * 255
    if pixels.dtype == np.uint8:
        img = Image.fromarray(pixels, mode="L")
    elif pixels.dtype == np.uint16:
        img = Image.fromarray(pixels)
    else:
        raise TypeError(f"unsupported pixel dtype {pixels.dtype}")
    info = PngImagePlugin.PngInfo()
    if metadata is not None:
        info.add_text("hetsample", json.dumps(metadata, sort_keys=True))
    img.save(path, format="PNG", pnginfo=info)
