"""Raster image types and 8-bit PNG I/O.

Two representations are used throughout the package: ``ImageU8`` holds
interleaved bytes exactly as they sit in a PNG, ``ImageF32`` holds the
normalized [0, 1] float view that all enhancement math operates on.
Conversion between the two is lossless byte -> float -> byte.
"""

from __future__ import annotations

import io
import logging
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image as PILImage
from PIL import UnidentifiedImageError

from .errors import DataError, ShapeError

log = logging.getLogger(__name__)

_PNG_SIGNATURE = b"\x89PNG\r\n\x1a\n"
# IHDR color types for 8-bit grayscale and truecolor; everything else
# (palette, alpha, 16-bit) is out of scope.
_SUPPORTED_COLOR_TYPES = {0: "L", 2: "RGB"}


def _check_raster(data: np.ndarray, dtype: np.dtype, kind: str) -> None:
    if data.ndim != 3:
        raise ShapeError(f"{kind} data must be (height, width, channels), got shape {data.shape}")
    if data.shape[2] not in (1, 3):
        raise ShapeError(f"{kind} channels must be 1 or 3, got {data.shape[2]}")
    if data.shape[0] < 1 or data.shape[1] < 1:
        raise ShapeError(f"{kind} must have at least one pixel, got shape {data.shape}")
    if data.dtype != dtype:
        raise ShapeError(f"{kind} data must be {dtype}, got {data.dtype}")


@dataclass(frozen=True)
class ImageU8:
    """Row-major interleaved byte image, 1 or 3 channels."""

    data: np.ndarray  # (H, W, C) uint8

    def __post_init__(self) -> None:
        _check_raster(self.data, np.dtype(np.uint8), "ImageU8")

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]


@dataclass(frozen=True)
class ImageF32:
    """Row-major interleaved float image, nominal range [0, 1]."""

    data: np.ndarray  # (H, W, C) float32

    def __post_init__(self) -> None:
        _check_raster(self.data, np.dtype(np.float32), "ImageF32")

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]


def to_f32(img: ImageU8) -> ImageF32:
    """Map bytes to floats: value = byte / 255."""
    return ImageF32(img.data.astype(np.float32) / np.float32(255.0))


def to_u8(img: ImageF32) -> ImageU8:
    """Map floats to bytes: clamp to [0, 1], scale by 255, round half away from zero.

    NaN values map to byte 0 and are logged; the rounding convention matters
    for PSNR at high values and is pinned here on purpose.
    """
    data = img.data
    nan_mask = np.isnan(data)
    if nan_mask.any():
        log.warning("to_u8: %d NaN values mapped to 0", int(nan_mask.sum()))
        data = np.where(nan_mask, np.float32(0.0), data)
    clamped = np.clip(data, 0.0, 1.0)
    # values are non-negative, so floor(x + 0.5) == round-half-away-from-zero
    scaled = np.floor(clamped.astype(np.float64) * 255.0 + 0.5)
    return ImageU8(scaled.astype(np.uint8))


def _parse_ihdr(data: bytes) -> tuple[int, int]:
    """Return (bit_depth, color_type) from the IHDR chunk, validating the signature."""
    if len(data) < 26 or data[:8] != _PNG_SIGNATURE:
        raise DataError("not a PNG file (bad signature)")
    length, ctype = struct.unpack(">I4s", data[8:16])
    if ctype != b"IHDR" or length != 13:
        raise DataError("malformed PNG: missing IHDR chunk")
    bit_depth = data[24]
    color_type = data[25]
    return bit_depth, color_type


def decode_png(data: bytes) -> ImageU8:
    """Decode an 8-bit grayscale or RGB PNG byte string."""
    bit_depth, color_type = _parse_ihdr(data)
    if bit_depth != 8:
        raise DataError(f"unsupported bit depth {bit_depth}: only 8-bit PNGs are supported")
    if color_type not in _SUPPORTED_COLOR_TYPES:
        raise DataError(
            f"unsupported color type {color_type}: only grayscale (0) and RGB (2) are supported"
        )
    try:
        with PILImage.open(io.BytesIO(data)) as pil:
            pil.load()
            arr = np.asarray(pil, dtype=np.uint8)
    except (UnidentifiedImageError, OSError, SyntaxError) as exc:
        raise DataError(f"malformed PNG: {exc}") from exc
    if arr.ndim == 2:
        arr = arr[:, :, None]
    return ImageU8(np.ascontiguousarray(arr))


def encode_png(img: ImageU8) -> bytes:
    """Encode to PNG bytes; decode(encode(img)) round-trips bit-exactly."""
    arr = img.data[:, :, 0] if img.channels == 1 else img.data
    pil = PILImage.fromarray(arr, mode="L" if img.channels == 1 else "RGB")
    buf = io.BytesIO()
    pil.save(buf, format="PNG")
    return buf.getvalue()


def read_png(path: str | Path) -> ImageU8:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    try:
        return decode_png(raw)
    except DataError as exc:
        raise DataError(f"{path}: {exc}") from exc


def write_png(img: ImageU8, path: str | Path) -> None:
    Path(path).write_bytes(encode_png(img))
