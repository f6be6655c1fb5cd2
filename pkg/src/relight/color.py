"""Color conversions: Rec. 601 luma and sRGB <-> CIE Lab (D65).

Conventions are pinned so downstream results are reproducible:
grayscale uses the 0.299/0.587/0.114 luma weights, and Lab assumes sRGB
primaries with a D65 white point and the standard piecewise sRGB
transfer function applied before the XYZ matrix.
"""

from __future__ import annotations

import numpy as np

from .errors import ShapeError
from .image import ImageF32

LUMA_WEIGHTS = np.array([0.299, 0.587, 0.114], dtype=np.float64)

_M_RGB2XYZ = np.array(
    [
        [0.4124564, 0.3575761, 0.1804375],
        [0.2126729, 0.7151522, 0.0721750],
        [0.0193339, 0.1191920, 0.9503041],
    ],
    dtype=np.float64,
)
_M_XYZ2RGB = np.linalg.inv(_M_RGB2XYZ)
# D65 white point taken as the matrix row sums so that RGB (1,1,1) maps to
# exactly L=100, a=b=0
_WHITE = _M_RGB2XYZ.sum(axis=1)

_LAB_EPS = 216.0 / 24389.0
_LAB_KAPPA = 24389.0 / 27.0


def rgb_to_gray(img: ImageF32) -> ImageF32:
    """Per-pixel luma 0.299 R + 0.587 G + 0.114 B."""
    if img.channels != 3:
        raise ShapeError("rgb_to_gray: input is already grayscale")
    gray = img.data.astype(np.float64) @ LUMA_WEIGHTS
    return ImageF32(gray.astype(np.float32)[:, :, None])


def luma_u8(data: np.ndarray) -> np.ndarray:
    """Luma of a byte or byte-scaled array in [0, 255] units, unquantized float64."""
    if data.ndim == 3 and data.shape[2] == 3:
        return data.astype(np.float64) @ LUMA_WEIGHTS
    return data.astype(np.float64).reshape(data.shape[0], data.shape[1])


def _srgb_to_linear(srgb: np.ndarray) -> np.ndarray:
    return np.where(srgb <= 0.04045, srgb / 12.92, ((srgb + 0.055) / 1.055) ** 2.4)


def _linear_to_srgb(linear: np.ndarray) -> np.ndarray:
    linear = np.maximum(linear, 0.0)
    return np.where(
        linear <= 0.0031308, linear * 12.92, 1.055 * linear ** (1.0 / 2.4) - 0.055
    )


def _lab_f(t: np.ndarray) -> np.ndarray:
    return np.where(t > _LAB_EPS, np.cbrt(t), (_LAB_KAPPA * t + 16.0) / 116.0)


def _lab_f_inv(f: np.ndarray) -> np.ndarray:
    delta = 6.0 / 29.0
    return np.where(f > delta, f**3, (116.0 * f - 16.0) / _LAB_KAPPA)


def rgb_to_lab(img: ImageF32) -> np.ndarray:
    """sRGB [0,1] -> CIE Lab planes (H, W, 3) float64, L in [0, 100]."""
    if img.channels != 3:
        raise ShapeError("rgb_to_lab: 3-channel input required")
    linear = _srgb_to_linear(img.data.astype(np.float64))
    xyz = linear @ _M_RGB2XYZ.T
    f = _lab_f(xyz / _WHITE)
    lab = np.empty_like(f)
    lab[:, :, 0] = 116.0 * f[:, :, 1] - 16.0
    lab[:, :, 1] = 500.0 * (f[:, :, 0] - f[:, :, 1])
    lab[:, :, 2] = 200.0 * (f[:, :, 1] - f[:, :, 2])
    return lab


def lab_to_rgb(lab: np.ndarray) -> ImageF32:
    """CIE Lab planes -> sRGB ImageF32, out-of-gamut values clamped to [0, 1]."""
    lab = np.asarray(lab, dtype=np.float64)
    if lab.ndim != 3 or lab.shape[2] != 3:
        raise ShapeError(f"lab_to_rgb: expected (H, W, 3) planes, got {lab.shape}")
    fy = (lab[:, :, 0] + 16.0) / 116.0
    fx = fy + lab[:, :, 1] / 500.0
    fz = fy - lab[:, :, 2] / 200.0
    xyz = np.stack([_lab_f_inv(fx), _lab_f_inv(fy), _lab_f_inv(fz)], axis=-1) * _WHITE
    linear = xyz @ _M_XYZ2RGB.T
    srgb = np.clip(_linear_to_srgb(linear), 0.0, 1.0)
    return ImageF32(srgb.astype(np.float32))
