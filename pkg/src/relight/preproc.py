"""Stage-1 frozen preprocessors and assembly of the 9-channel network input.

The trainable network never sees a raw low-light image alone: it gets
three stacked views [input1 | original | input2], where the two side
slots are brightness-normalizing algorithms (gamma, histogram
equalization, CLAHE, or an external trained model). The default pair is
gamma 0.5 plus CLAHE(2.0, 8x8).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Union

import numpy as np

from .color import lab_to_rgb, luma_u8, rgb_to_lab
from .errors import ConfigError, ShapeError
from .image import ImageF32

DEFAULT_GAMMA = 0.5  # solves (15.5/255)^g * 255 ~= 61.7, the observed dataset-level shift
DEFAULT_CLAHE_CLIP = 2.0
DEFAULT_CLAHE_TILES = 8


@dataclass(frozen=True)
class Gamma:
    gamma: float = DEFAULT_GAMMA

    def __post_init__(self) -> None:
        if not self.gamma > 0:
            raise ConfigError(f"gamma exponent must be > 0, got {self.gamma}")


@dataclass(frozen=True)
class HistEq:
    per_channel: bool = False  # default equalizes luma and scales RGB (hue-preserving)


@dataclass(frozen=True)
class Clahe:
    clip_limit: float = DEFAULT_CLAHE_CLIP  # multiples of the uniform bin count
    tiles: int = DEFAULT_CLAHE_TILES

    def __post_init__(self) -> None:
        if not self.clip_limit >= 1.0:
            raise ConfigError(f"CLAHE clip limit must be >= 1.0, got {self.clip_limit}")
        if self.tiles < 1:
            raise ConfigError(f"CLAHE tile count must be >= 1, got {self.tiles}")


@dataclass(frozen=True)
class External:
    """A trained enhancement checkpoint used as a frozen preprocessor."""

    path: str


PreprocessorKind = Union[Gamma, HistEq, Clahe, External]


def parse_preproc(spec: str) -> PreprocessorKind:
    """Parse a CLI preprocessor spec: gamma:<g> | he | he:rgb | clahe:<clip>:<tiles> | ext:<path>."""
    parts = spec.strip().split(":")
    name = parts[0].lower()
    try:
        if name == "gamma":
            if len(parts) != 2:
                raise ConfigError(f"gamma spec needs one exponent, got {spec!r}")
            return Gamma(float(parts[1]))
        if name == "he":
            if len(parts) == 1:
                return HistEq()
            if len(parts) == 2 and parts[1] == "rgb":
                return HistEq(per_channel=True)
            raise ConfigError(f"histogram-equalization spec is 'he' or 'he:rgb', got {spec!r}")
        if name == "clahe":
            if len(parts) != 3:
                raise ConfigError(f"clahe spec is clahe:<clip>:<tiles>, got {spec!r}")
            return Clahe(float(parts[1]), int(parts[2]))
        if name == "ext":
            if len(parts) < 2 or not spec.partition(":")[2]:
                raise ConfigError(f"external spec is ext:<checkpoint-path>, got {spec!r}")
            return External(spec.partition(":")[2])
    except ValueError as exc:
        raise ConfigError(f"bad preprocessor spec {spec!r}: {exc}") from exc
    raise ConfigError(f"unknown preprocessor {spec!r} (expected gamma/he/clahe/ext)")


def format_preproc(kind: PreprocessorKind) -> str:
    """Inverse of parse_preproc, used for checkpoint metadata."""
    if isinstance(kind, Gamma):
        return f"gamma:{kind.gamma:g}"
    if isinstance(kind, HistEq):
        return "he:rgb" if kind.per_channel else "he"
    if isinstance(kind, Clahe):
        return f"clahe:{kind.clip_limit:g}:{kind.tiles}"
    if isinstance(kind, External):
        return f"ext:{kind.path}"
    raise ConfigError(f"unknown preprocessor kind {kind!r}")


def apply_gamma(img: ImageF32, gamma: float) -> ImageF32:
    """Pointwise out = in ** gamma; monotone, preserves 0 and 1."""
    if not gamma > 0:
        raise ConfigError(f"gamma exponent must be > 0, got {gamma}")
    return ImageF32(np.power(img.data, np.float32(gamma)))


def _quantize_levels(values: np.ndarray) -> np.ndarray:
    """Round [0, 255]-scaled floats to integer levels, half away from zero."""
    return np.floor(np.clip(values, 0.0, 255.0) + 0.5).astype(np.int64)


def _equalize_levels(levels: np.ndarray) -> Optional[np.ndarray]:
    """256-entry CDF remap table for integer levels, or None when degenerate.

    table[v] = round((cdf(v) - cdf_min) / (N - cdf_min) * 255) with cdf_min
    the CDF at the smallest populated level.
    """
    hist = np.bincount(levels.ravel(), minlength=256).astype(np.float64)
    cdf = np.cumsum(hist)
    nonzero = np.nonzero(hist)[0]
    cdf_min = cdf[nonzero[0]]
    n = levels.size
    if n == cdf_min:  # single populated level
        return None
    table = np.floor((cdf - cdf_min) / (n - cdf_min) * 255.0 + 0.5)
    return np.clip(table, 0.0, 255.0)


def apply_hist_eq(img: ImageF32) -> ImageF32:
    """Global histogram equalization of the luma channel with a per-pixel RGB gain."""
    if img.channels != 3:
        raise ShapeError("apply_hist_eq: 3-channel input required")
    luma = luma_u8(img.data * np.float32(255.0))
    levels = _quantize_levels(luma)
    table = _equalize_levels(levels)
    if table is None:
        return ImageF32(img.data.copy())
    remapped = table[levels]
    gain = np.where(levels > 0, remapped / np.maximum(levels, 1), 0.0)
    out = np.clip(img.data.astype(np.float64) * gain[:, :, None], 0.0, 1.0)
    return ImageF32(out.astype(np.float32))


def _hist_eq_per_channel(img: ImageF32) -> ImageF32:
    out = np.empty_like(img.data)
    for c in range(3):
        levels = _quantize_levels(img.data[:, :, c].astype(np.float64) * 255.0)
        table = _equalize_levels(levels)
        if table is None:
            out[:, :, c] = img.data[:, :, c]
        else:
            out[:, :, c] = (table[levels] / 255.0).astype(np.float32)
    return ImageF32(out)


def _tile_mapping(hist: np.ndarray, clip_limit: float) -> np.ndarray:
    """Clip/redistribute a 256-bin tile histogram and build its 256-level CDF remap.

    Bins are clipped at clip_limit * (N / 256); the pooled excess is added
    back uniformly across all bins in a single pass (secondary overflow is
    ignored). Returns the identity ramp for degenerate tiles.
    """
    hist = hist.astype(np.float64)
    n = hist.sum()
    identity = np.arange(256, dtype=np.float64)
    if n == 0 or hist.max() == n:  # empty or single-level tile
        return identity
    if math.isfinite(clip_limit):
        clip = clip_limit * n / 256.0
        clipped = np.minimum(hist, clip)
        excess = n - clipped.sum()
        hist = clipped + excess / 256.0
    cdf = np.cumsum(hist)
    nonzero = np.nonzero(hist)[0]
    cdf_min = cdf[nonzero[0]]
    if n == cdf_min:
        return identity
    table = np.floor((cdf - cdf_min) / (n - cdf_min) * 255.0 + 0.5)
    return np.clip(table, 0.0, 255.0)


def _tile_edges(extent: int, tiles: int) -> np.ndarray:
    """Start offsets of ceil-divided tile regions plus the final extent."""
    size = -(-extent // tiles)
    starts = np.arange(tiles) * size
    if starts[-1] >= extent:
        raise ConfigError(
            f"CLAHE tile grid {tiles} does not fit an extent of {extent} pixels"
        )
    return np.append(starts, extent)


def apply_clahe(img: ImageF32, clip_limit: float, tiles: int) -> ImageF32:
    """Contrast-limited adaptive histogram equalization on the Lab L channel.

    Per-tile histograms of the 256-level quantized L plane are clipped and
    equalized; each pixel is remapped by bilinear interpolation between the
    four surrounding tile mappings (nearest mapping outside tile centers).
    """
    if img.channels != 3:
        raise ShapeError("apply_clahe: 3-channel input required")
    h, w = img.height, img.width
    if h < 2 or w < 2:
        raise ShapeError(f"apply_clahe: image must be at least 2x2, got {h}x{w}")
    if not clip_limit >= 1.0:
        raise ConfigError(f"CLAHE clip limit must be >= 1.0, got {clip_limit}")
    if tiles < 1:
        raise ConfigError(f"CLAHE tile count must be >= 1, got {tiles}")

    lab = rgb_to_lab(img)
    levels = _quantize_levels(lab[:, :, 0] / 100.0 * 255.0)

    row_edges = _tile_edges(h, tiles)
    col_edges = _tile_edges(w, tiles)
    mappings = np.empty((tiles, tiles, 256), dtype=np.float64)
    for ti in range(tiles):
        for tj in range(tiles):
            tile = levels[row_edges[ti] : row_edges[ti + 1], col_edges[tj] : col_edges[tj + 1]]
            hist = np.bincount(tile.ravel(), minlength=256)
            mappings[ti, tj] = _tile_mapping(hist, clip_limit)

    centers_r = (row_edges[:-1] + row_edges[1:] - 1) / 2.0
    centers_c = (col_edges[:-1] + col_edges[1:] - 1) / 2.0
    i0, wy = _interp_coords(np.arange(h), centers_r)
    j0, wx = _interp_coords(np.arange(w), centers_c)
    i1 = np.minimum(i0 + 1, tiles - 1)
    j1 = np.minimum(j0 + 1, tiles - 1)

    m00 = mappings[i0[:, None], j0[None, :], levels]
    m01 = mappings[i0[:, None], j1[None, :], levels]
    m10 = mappings[i1[:, None], j0[None, :], levels]
    m11 = mappings[i1[:, None], j1[None, :], levels]
    wy = wy[:, None]
    wx = wx[None, :]
    remapped = (1 - wy) * ((1 - wx) * m00 + wx * m01) + wy * ((1 - wx) * m10 + wx * m11)

    out_lab = lab.copy()
    out_lab[:, :, 0] = remapped / 255.0 * 100.0
    return lab_to_rgb(out_lab)


def _interp_coords(pos: np.ndarray, centers: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Lower tile index and fractional weight toward the upper tile for each pixel."""
    if len(centers) == 1:
        return np.zeros(len(pos), dtype=np.int64), np.zeros(len(pos))
    idx = np.clip(np.searchsorted(centers, pos, side="right") - 1, 0, len(centers) - 2)
    span = centers[idx + 1] - centers[idx]
    frac = np.clip((pos - centers[idx]) / span, 0.0, 1.0)
    return idx, frac


def apply_preproc(kind: Optional[PreprocessorKind], img: ImageF32) -> ImageF32:
    """Dispatch a preprocessor; None is the identity."""
    if kind is None:
        return img
    if isinstance(kind, Gamma):
        return apply_gamma(img, kind.gamma)
    if isinstance(kind, HistEq):
        return _hist_eq_per_channel(img) if kind.per_channel else apply_hist_eq(img)
    if isinstance(kind, Clahe):
        return apply_clahe(img, kind.clip_limit, kind.tiles)
    if isinstance(kind, External):
        return _apply_external(kind, img)
    raise ConfigError(f"unknown preprocessor kind {kind!r}")


def _apply_external(kind: External, img: ImageF32) -> ImageF32:
    # imported here to keep preproc free of a hard dependency on the network stack
    from . import checkpoint as ckpt
    from . import unet
    from .autograd import Tensor, no_grad

    model, _meta = ckpt.load_checkpoint(kind.path)
    if model.config.in_channels != 3:
        raise ConfigError(
            f"external preprocessor {kind.path} must take 3 input channels, "
            f"got {model.config.in_channels}"
        )
    x = Tensor(img.data.transpose(2, 0, 1)[None])
    with no_grad():
        out = unet.forward(model, x)
    return ImageF32(out.data[0].transpose(1, 2, 0).copy())


@dataclass(frozen=True)
class NineChannelInput:
    """The stacked [input1 | original | input2] planes fed to the network."""

    input1: ImageF32
    original: ImageF32
    input2: ImageF32
    residual_source: int = 0  # slot index whose plane feeds the global residual

    def __post_init__(self) -> None:
        dims = {(p.height, p.width) for p in (self.input1, self.original, self.input2)}
        if len(dims) != 1:
            raise ShapeError(f"9-channel slots disagree on dimensions: {sorted(dims)}")

    def to_chw(self) -> np.ndarray:
        """(9, H, W) float32 array in slot order."""
        stacked = np.concatenate(
            [self.input1.data, self.original.data, self.input2.data], axis=2
        )
        return np.ascontiguousarray(stacked.transpose(2, 0, 1))


def assemble_nine_channel(
    low: ImageF32,
    p1: Optional[PreprocessorKind],
    p2: Optional[PreprocessorKind],
) -> NineChannelInput:
    """Build the network input [p1(low) | low | p2(low)]; residual comes from slot 1."""
    if low.channels != 3:
        raise ShapeError("assemble_nine_channel: low image must have 3 channels")
    return NineChannelInput(
        input1=apply_preproc(p1, low),
        original=low,
        input2=apply_preproc(p2, low),
    )
