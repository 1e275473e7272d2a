"""PNG read/write and a procedural stand-in target texture."""
from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image


def load_target(path, size: int | None = None) -> np.ndarray:
    """Read an image as float32 (1, 3, H, W) in [0, 1], bilinear-resized to ``size``."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"target image not found: {path}")
    try:
        img = Image.open(path).convert("RGB")
    except Exception as exc:  # PIL raises several unrelated types
        raise OSError(f"cannot read image {path}: {exc}") from exc
    if size is not None and img.size != (size, size):
        img = img.resize((size, size), Image.BILINEAR)
    arr = np.asarray(img, dtype=np.float32) / 255.0
    return arr.transpose(2, 0, 1)[None].copy()


def to_uint8(rgb: np.ndarray) -> np.ndarray:
    """clamp(x, 0, 1) * 255 rounded half-up; (3, H, W) -> (H, W, 3) uint8. NaN maps to 0."""
    x = np.nan_to_num(np.asarray(rgb, dtype=np.float64), nan=0.0)
    x = np.clip(x, 0.0, 1.0) * 255.0
    return np.floor(x + 0.5).astype(np.uint8).transpose(1, 2, 0)


def save_png(rgb: np.ndarray, path) -> None:
    Image.fromarray(to_uint8(rgb)).save(path, format="PNG", optimize=False)


def state_to_png(state: np.ndarray, path) -> None:
    """Write channels 0..2 of a (C, H, W) state."""
    save_png(np.asarray(state)[:3], path)


def synthetic_texture(size: int = 64, seed: int = 0) -> np.ndarray:
    """Colourful wavy stripes, periodic on the torus; (1, 3, size, size) in [0, 1]."""
    rng = np.random.default_rng(seed)
    y, x = np.mgrid[0:size, 0:size] / size * 2 * np.pi
    out = np.empty((3, size, size), dtype=np.float64)
    warp = np.sin(2 * y + rng.uniform(0, 2 * np.pi)) * 0.8
    for c in range(3):
        phase = rng.uniform(0, 2 * np.pi)
        out[c] = 0.5 + 0.5 * np.sin(4 * x + 3 * warp + phase + c * 2.1)
    return out.astype(np.float32)[None]
