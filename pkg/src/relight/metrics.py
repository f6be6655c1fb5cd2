"""Full-reference PSNR and SSIM on uint8 images.

Both metrics run on [0, 255] byte values with no rescaling of the
prediction toward ground-truth statistics anywhere: scores describe what
a viewer would actually be shown. SSIM uses an 11x11 Gaussian window
(sigma 1.5, normalized to sum 1), C1 = (0.01*255)^2, C2 = (0.03*255)^2,
and valid-region windowing on the luma plane.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .color import luma_u8
from .errors import DataError, ShapeError
from .image import ImageU8, read_png

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
_C1 = (0.01 * 255.0) ** 2
_C2 = (0.03 * 255.0) ** 2


def psnr(a: ImageU8, b: ImageU8) -> float:
    """10*log10(255^2 / MSE) in dB; identical images give inf."""
    if a.data.shape != b.data.shape:
        raise ShapeError(f"psnr: shape mismatch {a.data.shape} vs {b.data.shape}")
    diff = a.data.astype(np.float64) - b.data.astype(np.float64)
    mse = float(np.mean(diff * diff))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(255.0**2 / mse)


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    """1-D Gaussian taps normalized to sum exactly 1."""
    half = (size - 1) / 2.0
    x = np.arange(size, dtype=np.float64) - half
    w = np.exp(-(x**2) / (2.0 * sigma**2))
    return w / w.sum()


def _filter_valid(img: np.ndarray, taps: np.ndarray) -> np.ndarray:
    """Separable valid-mode correlation with a 1-D window along both axes."""
    k = len(taps)
    out = np.zeros((img.shape[0] - k + 1, img.shape[1]), dtype=np.float64)
    for i in range(k):
        out += taps[i] * img[i : i + out.shape[0], :]
    final = np.zeros((out.shape[0], img.shape[1] - k + 1), dtype=np.float64)
    for j in range(k):
        final += taps[j] * out[:, j : j + final.shape[1]]
    return final


def _ssim_plane(x: np.ndarray, y: np.ndarray) -> float:
    taps = gaussian_window()
    mu_x = _filter_valid(x, taps)
    mu_y = _filter_valid(y, taps)
    var_x = _filter_valid(x * x, taps) - mu_x * mu_x
    var_y = _filter_valid(y * y, taps) - mu_y * mu_y
    cov = _filter_valid(x * y, taps) - mu_x * mu_y
    num = (2.0 * mu_x * mu_y + _C1) * (2.0 * cov + _C2)
    den = (mu_x * mu_x + mu_y * mu_y + _C1) * (var_x + var_y + _C2)
    return float(np.mean(num / den))


def ssim(a: ImageU8, b: ImageU8, per_channel: bool = False) -> float:
    """Single-scale SSIM; luma-plane by default, channel-averaged behind the flag."""
    if a.data.shape != b.data.shape:
        raise ShapeError(f"ssim: shape mismatch {a.data.shape} vs {b.data.shape}")
    if min(a.height, a.width) < SSIM_WINDOW:
        raise ShapeError(
            f"ssim: image {a.height}x{a.width} smaller than the {SSIM_WINDOW}x"
            f"{SSIM_WINDOW} window"
        )
    if per_channel and a.channels == 3:
        scores = [
            _ssim_plane(a.data[:, :, c].astype(np.float64),
                        b.data[:, :, c].astype(np.float64))
            for c in range(3)
        ]
        return float(np.mean(scores))
    return _ssim_plane(luma_u8(a.data), luma_u8(b.data))


@dataclass(frozen=True)
class MetricRow:
    filename: str
    psnr: float
    ssim: float


@dataclass(frozen=True)
class MetricReport:
    rows: list[MetricRow]
    mean_psnr: float
    mean_ssim: float


def evaluate_folder(
    pred_folder: str | Path, gt_folder: str | Path, per_channel_ssim: bool = False
) -> MetricReport:
    """Pair files by name across two folders and score each pair."""
    pred_folder, gt_folder = Path(pred_folder), Path(gt_folder)
    pred_names = _png_names(pred_folder)
    gt_names = _png_names(gt_folder)
    for name in sorted(pred_names - gt_names):
        raise DataError(f"no ground-truth counterpart for {pred_folder / name}")
    for name in sorted(gt_names - pred_names):
        raise DataError(f"no prediction counterpart for {gt_folder / name}")
    rows = []
    for name in sorted(pred_names):
        p = read_png(pred_folder / name)
        g = read_png(gt_folder / name)
        rows.append(MetricRow(name, psnr(p, g), ssim(p, g, per_channel_ssim)))
    return MetricReport(
        rows=rows,
        mean_psnr=float(np.mean([r.psnr for r in rows])),
        mean_ssim=float(np.mean([r.ssim for r in rows])),
    )


def _png_names(folder: Path) -> set[str]:
    if not folder.is_dir():
        raise DataError(f"not a folder: {folder}")
    names = {p.name for p in folder.glob("*.png")}
    if not names:
        raise DataError(f"no PNG files in {folder}")
    return names


def _fmt(value: float) -> str:
    return "inf" if math.isinf(value) else f"{value:.4f}"


def write_report_csv(report: MetricReport, path: str | Path) -> None:
    """filename,psnr,ssim rows plus a final MEAN row; infinite PSNR prints as 'inf'."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["filename", "psnr", "ssim"])
        for r in report.rows:
            writer.writerow([r.filename, _fmt(r.psnr), f"{r.ssim:.4f}"])
        writer.writerow(["MEAN", _fmt(report.mean_psnr), f"{report.mean_ssim:.4f}"])
