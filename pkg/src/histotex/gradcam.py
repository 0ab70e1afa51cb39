"""Gradient-weighted class activation maps over the last fire block.

The map is ReLU(sum_k alpha_k A_k) where A is the final convolutional
feature stack and alpha_k is the spatial mean of the chosen class logit's
gradient on channel k; it is min-max normalized unless identically zero,
then bilinearly upsampled to the input resolution.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .data import resize_bilinear
from .network import TextureNet
from .tensor import Tensor, backward, weighted_sum


@dataclass
class CamResult:
    raw_map: np.ndarray        # (h, w) over feature cells, in [0, 1]
    upsampled: np.ndarray      # (input_size, input_size)
    class_index: int
    class_score: float         # pre-softmax logit of the chosen class
    predicted_probs: np.ndarray
    is_zero: bool = False


def grad_cam(model: TextureNet, image: np.ndarray,
             class_idx: Optional[int] = None) -> CamResult:
    """Localization map for one image; defaults to the predicted class."""
    x = np.asarray(image, dtype=np.float32)
    if x.ndim == 3:
        x = x[None]
    if x.shape[0] != 1:
        raise ValueError(f"grad_cam expects a single image, got batch {x.shape}")
    res = model.forward(Tensor(x), mode="eval", input_grad=True)
    k = res.logits.shape[1]
    if class_idx is None:
        class_idx = int(res.probs[0].argmax())
    if not 0 <= class_idx < k:
        raise ValueError(f"class index {class_idx} outside [0, {k})")

    onehot = np.zeros((1, k), dtype=np.float32)
    onehot[0, class_idx] = 1.0
    score = weighted_sum(res.logits, onehot)
    backward(score)

    features = res.features.data[0]              # (C, h, w)
    grads = res.features.grad
    if grads is None:
        grads = np.zeros_like(res.features.data)
    grads = grads[0]
    alphas = grads.mean(axis=(1, 2))              # channel weights
    cam = np.maximum((alphas[:, None, None] * features).sum(axis=0), 0.0)

    peak = float(cam.max())
    is_zero = peak <= 0.0
    if not is_zero:
        lo = float(cam.min())
        cam = (cam - lo) / (peak - lo) if peak > lo else cam / peak
    if min(cam.shape) >= 2:
        up = resize_bilinear(cam.astype(np.float32),
                             (model.input_size, model.input_size))
    else:  # degenerate feature grid (tiny inputs): constant expansion
        up = np.full((model.input_size, model.input_size), cam.flat[0], np.float32)
    return CamResult(raw_map=cam.astype(np.float32), upsampled=up,
                     class_index=class_idx, class_score=float(score.data),
                     predicted_probs=res.probs[0], is_zero=is_zero)


# five-stop linear ramp, blue through cyan/green/yellow to red
_HEAT_STOPS = np.array([
    [0.0, 0.0, 1.0],
    [0.0, 1.0, 1.0],
    [0.0, 1.0, 0.0],
    [1.0, 1.0, 0.0],
    [1.0, 0.0, 0.0],
])


def heat_colormap(values: np.ndarray) -> np.ndarray:
    """Map values in [0,1] to RGB floats through the 5-stop ramp."""
    v = np.clip(np.asarray(values, dtype=np.float32), 0.0, 1.0)
    pos = v * (len(_HEAT_STOPS) - 1)
    lo = np.floor(pos).astype(np.int64)
    hi = np.minimum(lo + 1, len(_HEAT_STOPS) - 1)
    frac = (pos - lo)[..., None]
    return (_HEAT_STOPS[lo] * (1.0 - frac) + _HEAT_STOPS[hi] * frac).astype(np.float32)


def overlay(image: np.ndarray, cam: CamResult, alpha: float = 0.5) -> np.ndarray:
    """Alpha-blend the heat map onto an 8-bit RGB image of the same size."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must be in [0,1], got {alpha}")
    img = np.asarray(image)
    if img.dtype != np.uint8 or img.ndim != 3:
        raise ValueError("overlay expects an (H,W,3) uint8 image")
    heat = cam.upsampled
    if heat.shape != img.shape[:2]:
        heat = resize_bilinear(heat, img.shape[:2])
    heat_rgb = heat_colormap(heat) * 255.0
    blended = (1.0 - alpha) * img.astype(np.float32) + alpha * heat_rgb
    return np.clip(np.rint(blended), 0, 255).astype(np.uint8)


def write_cam_csv(cam: CamResult, path: str | Path) -> None:
    """Raw map cells as rows of floats."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        for row in cam.raw_map:
            writer.writerow([f"{v:.9g}" for v in row])
