"""8-bit PNG IO: images and mattes as float arrays in [0, 1], CHW layout."""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image


def read_image(path) -> np.ndarray:
    """Load a PNG as float64 [3, H, W] in [0, 1] (grayscale is broadcast)."""
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    return arr.transpose(2, 0, 1)


def read_alpha(path) -> np.ndarray:
    """Load a single-channel PNG as float64 [1, H, W] in [0, 1]."""
    with Image.open(path) as im:
        arr = np.asarray(im.convert("L"), dtype=np.float64) / 255.0
    return arr[None]


def _to_uint8(arr: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(arr * 255.0), 0, 255).astype(np.uint8)


def write_image(path, arr: np.ndarray) -> None:
    """Write [3, H, W] (RGB) or [1, H, W]/[H, W] (grayscale) in [0, 1]."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arr = np.asarray(arr)
    if arr.ndim == 3 and arr.shape[0] == 3:
        Image.fromarray(_to_uint8(arr.transpose(1, 2, 0)), mode="RGB").save(path)
    elif arr.ndim == 3 and arr.shape[0] == 1:
        Image.fromarray(_to_uint8(arr[0]), mode="L").save(path)
    elif arr.ndim == 2:
        Image.fromarray(_to_uint8(arr), mode="L").save(path)
    else:
        raise ValueError(f"cannot write array of shape {arr.shape} as an image")


write_alpha = write_image
