"""Color primitives: illuminant normalization, diagonal correction, angular error.

Illuminants are plain float64 arrays of shape ``(3,)`` (or ``(..., 3)`` where
noted) holding unit-norm linear camera RGB.  Images are ``LinearImage``
instances wrapping an ``H x W x 3`` array and an optional boolean mask.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateIlluminant, GreenUnderflow, NegativeComponent, ZeroVector

ZERO_NORM = 1e-12
MIN_CHANNEL = 1e-6


@dataclass(frozen=True)
class LinearImage:
    """Linear camera-RGB pixels, ``mask[i, j]`` true where the pixel is usable."""

    pixels: np.ndarray
    mask: np.ndarray | None = None

    def __post_init__(self):
        if self.pixels.ndim != 3 or self.pixels.shape[2] != 3:
            raise ValueError(f"expected H x W x 3 pixels, got {self.pixels.shape}")
        if self.mask is not None and self.mask.shape != self.pixels.shape[:2]:
            raise ValueError(
                f"mask shape {self.mask.shape} does not match image {self.pixels.shape[:2]}"
            )

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    def usable_pixels(self) -> np.ndarray:
        """Return the ``(m, 3)`` array of unmasked pixels."""
        flat = self.pixels.reshape(-1, 3)
        if self.mask is None:
            return flat
        return flat[self.mask.reshape(-1)]


def normalize_illuminant(v) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    if np.any(v < 0):
        raise NegativeComponent(f"illuminant has a negative component: {v}")
    norm = np.linalg.norm(v, axis=-1, keepdims=True)
    if np.any(norm < ZERO_NORM):
        raise ZeroVector("illuminant has (near) zero norm")
    return v / norm


def is_unit_rgb(v, atol: float = 1e-9) -> bool:
    v = np.asarray(v, dtype=np.float64)
    return bool(
        v.shape[-1] == 3
        and np.all(v >= 0)
        and np.all(np.abs(np.sum(v * v, axis=-1) - 1.0) <= atol)
    )


def angular_error(a, b) -> np.ndarray | float:
    """Angle in degrees between unit vectors ``a`` and ``b`` (broadcasts over ``...``)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    cos = np.clip(np.sum(a * b, axis=-1), -1.0, 1.0)
    deg = np.degrees(np.arccos(cos))
    return float(deg) if np.ndim(deg) == 0 else deg


def apply_correction(image: LinearImage, ell) -> LinearImage:
    """Divide every pixel channel-wise by the illuminant (von Kries correction)."""
    ell = np.asarray(ell, dtype=np.float64)
    if np.any(ell <= MIN_CHANNEL):
        raise DegenerateIlluminant(f"illuminant channel <= {MIN_CHANNEL}: {ell}")
    return LinearImage(image.pixels / ell, image.mask)


def chroma(ell) -> np.ndarray:
    """Project illuminant(s) to ``[r/g, b/g]``."""
    ell = np.asarray(ell, dtype=np.float64)
    g = ell[..., 1]
    if np.any(g <= MIN_CHANNEL):
        raise GreenUnderflow("green component too small for chroma projection")
    return np.stack([ell[..., 0] / g, ell[..., 2] / g], axis=-1)


def inverse_chroma(p) -> np.ndarray:
    """Map ``[r/g, b/g]`` back to a unit illuminant via ``(rg, 1, bg)``."""
    p = np.asarray(p, dtype=np.float64)
    v = np.stack([p[..., 0], np.ones_like(p[..., 0]), p[..., 1]], axis=-1)
    return normalize_illuminant(v)
