"""Input validation helpers shared by the estimator surfaces."""

from __future__ import annotations

import numpy as np


def check_rgb_u8(image) -> np.ndarray:
    """Require an (H, W, 3) uint8 RGB image."""
    arr = np.asarray(image)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ValueError(f"expected an (H, W, 3) RGB image, got shape {arr.shape}")
    if arr.dtype != np.uint8:
        raise ValueError(f"expected uint8 pixels, got dtype {arr.dtype}")
    return arr


def check_unit_image(image) -> np.ndarray:
    """Require an (H, W, 3) float image with values in [0, 1]."""
    arr = np.asarray(image, dtype=np.float32)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ValueError(f"expected an (H, W, 3) image, got shape {arr.shape}")
    lo, hi = float(arr.min(initial=0.0)), float(arr.max(initial=0.0))
    if lo < -1e-6 or hi > 1.0 + 1e-6:
        raise ValueError(f"pixel values outside [0, 1]: range [{lo}, {hi}]")
    return np.clip(arr, 0.0, 1.0)


def check_image_batch(X) -> np.ndarray:
    """Accept (N,H,W,3) float [0,1] or uint8 arrays; return float32 in [0,1]."""
    arr = np.asarray(X)
    if arr.ndim != 4 or arr.shape[3] != 3:
        raise ValueError(f"expected an (N, H, W, 3) image batch, got shape {arr.shape}")
    if arr.dtype == np.uint8:
        return arr.astype(np.float32) / 255.0
    arr = arr.astype(np.float32)
    if arr.size and (arr.min() < -1e-6 or arr.max() > 1.0 + 1e-6):
        raise ValueError("float image batches must be scaled to [0, 1]")
    return np.clip(arr, 0.0, 1.0)


def check_labels(y, num_classes: int) -> np.ndarray:
    arr = np.asarray(y)
    if arr.ndim != 1:
        raise ValueError(f"labels must be 1-D, got shape {arr.shape}")
    if not np.issubdtype(arr.dtype, np.integer):
        if not np.all(arr == arr.astype(np.int64)):
            raise ValueError("labels must be integers")
    arr = arr.astype(np.int64)
    if arr.size and (arr.min() < 0 or arr.max() >= num_classes):
        raise ValueError(f"labels must lie in [0, {num_classes}), got "
                         f"range [{arr.min()}, {arr.max()}]")
    return arr
