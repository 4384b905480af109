"""Mask types, IoU and the entropy kernels used by every uncertainty score.

Masks are plain numpy arrays: a *binary mask* is a 2-D ``bool`` array and a
*probability mask* is a 2-D float array with values in ``[0, 1]``. The
``check_*`` helpers validate and normalise inputs the way sklearn's
``check_array`` does, so the rest of the package can trust its arguments.
"""
from __future__ import annotations

import math

import numpy as np

EPS = 1e-7

__all__ = [
    "EPS",
    "MaskShapeError",
    "check_binary_mask",
    "check_prob_mask",
    "binary_entropy",
    "weighted_mask_entropy",
    "mean_mask_entropy",
    "iou",
    "threshold",
]


class MaskShapeError(ValueError):
    """Two masks that must be aligned have different shapes."""


def check_binary_mask(mask, name: str = "mask") -> np.ndarray:
    arr = np.asarray(mask)
    if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
        raise ValueError(f"{name} must be a non-empty 2-D array, got shape {arr.shape}")
    if arr.dtype != bool:
        if not np.isin(arr, (0, 1)).all():
            raise ValueError(f"{name} must only contain 0/1 values")
        arr = arr.astype(bool)
    return arr


def check_prob_mask(mask, name: str = "mask", dtype=np.float64) -> np.ndarray:
    arr = np.asarray(mask, dtype=dtype)
    if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
        raise ValueError(f"{name} must be a non-empty 2-D array, got shape {arr.shape}")
    if not np.isfinite(arr).all():
        raise ValueError(f"{name} contains non-finite values")
    if arr.min() < 0.0 or arr.max() > 1.0:
        raise ValueError(f"{name} values must lie in [0, 1]")
    return arr


def _check_same_shape(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise MaskShapeError(f"shape mismatch: {a.shape} vs {b.shape}")


def binary_entropy(p: float) -> float:
    """Entropy in bits of a Bernoulli variable with success probability ``p``."""
    p = float(p)
    if not math.isfinite(p) or p < 0.0 or p > 1.0:
        raise ValueError(f"probability must be finite and in [0, 1], got {p!r}")
    if p == 0.0 or p == 1.0:
        return 0.0
    p = min(max(p, EPS), 1.0 - EPS)
    return -(p * math.log2(p) + (1.0 - p) * math.log2(1.0 - p))


def _pixel_entropy(y: np.ndarray) -> np.ndarray:
    # 0*log(0) := 0 by branch; clamping only protects the log evaluation
    pc = np.clip(y, EPS, 1.0 - EPS)
    h = -(pc * np.log2(pc) + (1.0 - pc) * np.log2(1.0 - pc))
    return np.where((y == 0.0) | (y == 1.0), 0.0, h)


def weighted_mask_entropy(y, fast: bool = False) -> float:
    """Foreground-weighted mean of per-pixel binary entropies.

    Each pixel contributes with weight ``y_i / sum(y)``, so background pixels
    barely matter and the result stays in ``[0, 1]``. An all-zero map is
    treated as certain and scores 0.

    Parameters
    ----------
    y : array-like of shape (height, width)
        Foreground probabilities.
    fast : bool, default=False
        Evaluate in float32 instead of float64.
    """
    y = check_prob_mask(y, "y", dtype=np.float32 if fast else np.float64)
    total = y.sum()
    if total == 0.0:
        return 0.0
    value = float(np.sum(y * _pixel_entropy(y)) / total)
    return min(max(value, 0.0), 1.0)


def mean_mask_entropy(y, m, fast: bool = False) -> float:
    """Mean pixel entropy over the foreground of the predicted mask ``m``.

    Returns 0 for an empty prediction.
    """
    y = check_prob_mask(y, "y", dtype=np.float32 if fast else np.float64)
    m = check_binary_mask(m, "m")
    _check_same_shape(y, m)
    if not m.any():
        return 0.0
    return float(_pixel_entropy(y[m]).mean())


def iou(a, b) -> float:
    """Intersection over union of two binary masks; 1.0 if both are empty."""
    a = check_binary_mask(a, "a")
    b = check_binary_mask(b, "b")
    _check_same_shape(a, b)
    union = np.count_nonzero(a | b)
    if union == 0:
        return 1.0
    return np.count_nonzero(a & b) / union


def threshold(y, t: float = 0.5) -> np.ndarray:
    """Binarise a probability mask with the strict rule ``y > t``."""
    if not 0.0 < t < 1.0:
        raise ValueError(f"threshold must lie in (0, 1), got {t!r}")
    y = check_prob_mask(y, "y")
    return y > t
