"""Sliding-window full-volume inference with overlap blending.

Axes are zero-padded up to the next multiple of the window size, windows start
at multiples of ``roi * (1 - overlap)``, and overlapping predictions average
with uniform weights by default. Accumulation runs in float64 over float32
window outputs, which makes the average of identical contributions bit-exact
(overlap counts here are powers of two at the default overlap of 0.5).
"""

from __future__ import annotations

import math
from typing import Callable

import numpy as np

from .errors import ConfigError, ShapeError

PredictFn = Callable[[np.ndarray], np.ndarray]
"""Maps one (h,w,d) float32 patch to (K,h,w,d) float32 class probabilities."""


def window_starts(length: int, roi: int, stride: int) -> list[int]:
    """Window start offsets along one padded axis."""
    return list(range(0, length - roi + 1, stride))


def _padded_length(length: int, roi: int) -> int:
    return max(roi, math.ceil(length / roi) * roi)


def _gaussian_weights(roi: int, sigma_scale: float = 0.125) -> np.ndarray:
    centre = (roi - 1) / 2.0
    sigma = max(roi * sigma_scale, 1e-3)
    axis = np.exp(-0.5 * ((np.arange(roi) - centre) / sigma) ** 2)
    w = axis[:, None, None] * axis[None, :, None] * axis[None, None, :]
    return np.maximum(w, w.max() * 1e-3)


def sliding_window_predict(
    predict_fn: PredictFn,
    image: np.ndarray,
    num_classes: int,
    roi: int,
    overlap: float = 0.5,
    blend: str = "uniform",
) -> np.ndarray:
    """Tile ``image`` with overlapping cubic windows and blend the predictions.

    Returns (K, *image.shape) float32 probabilities covering the whole volume.
    """
    if image.ndim != 3:
        raise ShapeError(f"expected a 3D volume, got shape {image.shape}")
    if not 0.0 <= overlap < 1.0:
        raise ConfigError(f"overlap must be in [0, 1), got {overlap}")
    if blend not in ("uniform", "gaussian"):
        raise ConfigError(f"unknown blend mode {blend!r}")
    stride = int(round(roi * (1.0 - overlap)))
    if stride < 1:
        raise ConfigError(f"overlap {overlap} leaves no stride for roi {roi}")

    orig = image.shape
    padded_shape = tuple(_padded_length(n, roi) for n in orig)
    if padded_shape != orig:
        pads = [(0, p - n) for n, p in zip(orig, padded_shape)]
        image = np.pad(image, pads, mode="constant")

    accum = np.zeros((num_classes, *padded_shape), dtype=np.float64)
    weight = np.zeros(padded_shape, dtype=np.float64)
    wmap = np.ones((roi,) * 3) if blend == "uniform" else _gaussian_weights(roi)

    for sx in window_starts(padded_shape[0], roi, stride):
        for sy in window_starts(padded_shape[1], roi, stride):
            for sz in window_starts(padded_shape[2], roi, stride):
                sl = (slice(sx, sx + roi), slice(sy, sy + roi), slice(sz, sz + roi))
                pred = np.asarray(predict_fn(image[sl]))
                if pred.shape != (num_classes, roi, roi, roi):
                    raise ShapeError(
                        f"predict_fn returned {pred.shape}, expected {(num_classes, roi, roi, roi)}"
                    )
                accum[(slice(None), *sl)] += pred * wmap
                weight[sl] += wmap

    out = accum / weight
    crop = (slice(None), *(slice(0, n) for n in orig))
    return out[crop].astype(np.float32)
