"""Input validation helpers shared across the package."""

from __future__ import annotations

import numpy as np

from .errors import ShapeMismatchError


def as_image_array(img) -> np.ndarray:
    """Coerce an ImageBuffer or ndarray to a float64 (H, W, C) array."""
    data = getattr(img, "data", img)
    arr = np.asarray(data, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    if arr.ndim != 3 or arr.shape[2] not in (1, 3):
        raise ValueError(f"expected (H, W, 1|3) image, got shape {arr.shape}")
    return arr


def check_same_shape(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise ShapeMismatchError(f"shape mismatch: {a.shape} vs {b.shape}")


def check_finite(arr: np.ndarray, what: str = "array") -> None:
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{what} contains non-finite values")


def check_min_side(arr: np.ndarray, min_side: int, what: str = "image") -> None:
    if min(arr.shape[0], arr.shape[1]) < min_side:
        raise ValueError(
            f"{what} too small: min side {min(arr.shape[:2])} < {min_side}"
        )
