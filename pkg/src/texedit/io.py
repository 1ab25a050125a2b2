"""Lossless image and mask I/O plus atomic file writes."""
from __future__ import annotations

import os
import tempfile
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import ShapeError, ValidationError


def read_image(path: str | Path) -> np.ndarray:
    """HxWx3 uint8."""
    try:
        with Image.open(path) as im:
            return np.asarray(im.convert("RGB"))
    except (OSError, ValueError) as exc:
        raise ValidationError(f"cannot read image {path}: {exc}") from exc


def read_mask(path: str | Path) -> np.ndarray:
    """HxW bool; any nonzero pixel is inside the mask."""
    try:
        with Image.open(path) as im:
            return np.asarray(im.convert("L")) > 127
    except (OSError, ValueError) as exc:
        raise ValidationError(f"cannot read mask {path}: {exc}") from exc


def _atomic(path: Path, write) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    os.close(fd)
    try:
        write(tmp)
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise
    return path


def write_image(path: str | Path, image: np.ndarray) -> Path:
    arr = np.asarray(image)
    if arr.dtype != np.uint8 or arr.ndim != 3 or arr.shape[-1] != 3:
        raise ShapeError(f"expected HxWx3 uint8, got {arr.dtype} {arr.shape}")
    return _atomic(path, lambda tmp: Image.fromarray(arr, "RGB").save(tmp, format="PNG"))


def write_mask(path: str | Path, mask: np.ndarray) -> Path:
    m = np.asarray(mask).astype(bool)
    if m.ndim != 2:
        raise ShapeError(f"expected an HxW mask, got {m.shape}")
    return _atomic(path, lambda tmp: Image.fromarray(m).convert("1").save(tmp, format="PNG"))


def atomic_write_text(path: str | Path, text: str) -> Path:
    return _atomic(path, lambda tmp: Path(tmp).write_text(text, encoding="utf-8"))
