"""Statistics-based illuminant estimators used as reference rows."""

from __future__ import annotations

import numpy as np

from .core import LinearImage, normalize_illuminant
from .errors import AllMasked, ZeroChannel


def _usable(img: LinearImage) -> np.ndarray:
    px = img.usable_pixels()
    if px.shape[0] == 0:
        raise AllMasked("no unmasked pixels")
    return px


def gray_world(img: LinearImage) -> np.ndarray:
    """Per-channel mean of the unmasked pixels, normalized."""
    mean = _usable(img).mean(axis=0)
    if np.any(mean <= 0):
        raise ZeroChannel(f"channel mean is zero: {mean}")
    return normalize_illuminant(mean)


def white_patch(img: LinearImage, percentile: float = 100.0) -> np.ndarray:
    """Per-channel maximum (or ``percentile``) of the unmasked pixels, normalized."""
    px = _usable(img)
    est = px.max(axis=0) if percentile >= 100 else np.percentile(px, percentile, axis=0)
    if np.any(est <= 0):
        raise ZeroChannel(f"channel estimate is zero: {est}")
    return normalize_illuminant(est)


ESTIMATORS = {"gray-world": gray_world, "white-patch": white_patch}
