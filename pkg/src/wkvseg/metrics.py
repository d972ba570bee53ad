"""Mask overlap metrics."""

from __future__ import annotations

import math

import numpy as np
from scipy import ndimage

from .errors import ContractError, DimensionError


def _pair(a, b) -> tuple[np.ndarray, np.ndarray]:
    a, b = np.asarray(a, dtype=bool), np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise DimensionError(f"mask shapes differ: {a.shape} vs {b.shape}")
    return a, b


def iou(a, b) -> float:
    """Intersection over union; two empty masks count as a perfect match."""
    a, b = _pair(a, b)
    union = np.logical_or(a, b).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(a, b).sum() / union)


def default_band_width(shape) -> int:
    h, w = shape[:2]
    return max(1, round(0.02 * math.hypot(h, w)))


def boundary_band(mask, d: int) -> np.ndarray:
    """Mask pixels within Chebyshev distance ``d`` of the complement.

    Pixels outside the image count as complement, so the image border is
    part of the band of a mask that touches it.
    """
    if d < 1:
        raise ContractError(f"band width must be >= 1, got {d}")
    mask = np.asarray(mask, dtype=bool)
    inner = ndimage.binary_erosion(mask, structure=np.ones((2 * d + 1, 2 * d + 1), bool),
                                   border_value=0)
    return mask & ~inner


def boundary_iou(a, b, d: int | None = None) -> float:
    a, b = _pair(a, b)
    d = default_band_width(a.shape) if d is None else d
    return iou(boundary_band(a, d), boundary_band(b, d))
