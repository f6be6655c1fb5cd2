"""Inter-/intra-image brightness distribution statistics.

Quantifies how spread out a dataset is before and after preprocessing:
per-image mean brightness and contrast, then the across-image mean and
population standard deviation of each. All values are in [0, 255] byte
units, computed on the quantized image a preprocessor would actually
emit.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .color import luma_u8
from .errors import DataError
from .image import ImageU8, read_png, to_f32, to_u8
from .preproc import PreprocessorKind, apply_preproc


@dataclass(frozen=True)
class ImageStats:
    mu: float  # mean grayscale byte value
    sigma: float  # population std of grayscale byte values


@dataclass(frozen=True)
class DatasetStats:
    mu_bar: float  # mean of per-image mu
    sigma_inter: float  # population std of per-image mu
    sigma_bar: float  # mean of per-image sigma
    sigma_intra: float  # population std of per-image sigma
    n_images: int


def image_stats(img: ImageU8) -> ImageStats:
    """Mean and population std of the grayscale representation, in byte units."""
    if img.data.size == 0:
        raise DataError("image_stats: zero-pixel image")
    gray = luma_u8(img.data)
    return ImageStats(mu=float(gray.mean()), sigma=float(gray.std()))


def list_pngs(folder: str | Path) -> list[Path]:
    folder = Path(folder)
    if not folder.is_dir():
        raise DataError(f"not a folder: {folder}")
    files = sorted(p for p in folder.iterdir() if p.suffix.lower() == ".png")
    if not files:
        raise DataError(f"no PNG files in {folder}")
    return files


def dataset_stats(
    folder: str | Path, preproc: Optional[PreprocessorKind] = None
) -> DatasetStats:
    """Aggregate per-image stats over a folder, optionally preprocessing first.

    Preprocessed images are re-quantized to bytes before measuring, so the
    statistics describe what the network input distribution looks like.
    """
    per_image = [image_stats(_load_variant(p, preproc)) for p in list_pngs(folder)]
    return aggregate_stats(per_image)


def _load_variant(path: Path, preproc: Optional[PreprocessorKind]) -> ImageU8:
    img = read_png(path)
    if preproc is None:
        return img
    return to_u8(apply_preproc(preproc, to_f32(img)))


def aggregate_stats(per_image: list[ImageStats]) -> DatasetStats:
    if not per_image:
        raise DataError("aggregate_stats: no images")
    mus = np.array([s.mu for s in per_image], dtype=np.float64)
    sigmas = np.array([s.sigma for s in per_image], dtype=np.float64)
    return DatasetStats(
        mu_bar=float(mus.mean()),
        sigma_inter=float(mus.std()),
        sigma_bar=float(sigmas.mean()),
        sigma_intra=float(sigmas.std()),
        n_images=len(per_image),
    )


STATS_CSV_HEADER = ["variant", "mu_bar", "sigma_inter", "sigma_bar", "sigma_intra", "n"]


def write_stats_csv(rows: list[tuple[str, DatasetStats]], path: str | Path) -> None:
    """One CSV row per (variant, stats), matching the summary-table layout."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(STATS_CSV_HEADER)
        for variant, s in rows:
            writer.writerow(
                [variant, f"{s.mu_bar:.4f}", f"{s.sigma_inter:.4f}",
                 f"{s.sigma_bar:.4f}", f"{s.sigma_intra:.4f}", s.n_images]
            )


def write_per_image_csv(
    folder: str | Path, preproc: Optional[PreprocessorKind], path: str | Path
) -> None:
    """Per-image (filename, mu, sigma) rows, enough to re-plot any brightness histogram."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["filename", "mu", "sigma"])
        for p in list_pngs(folder):
            s = image_stats(_load_variant(p, preproc))
            writer.writerow([p.name, f"{s.mu:.4f}", f"{s.sigma:.4f}"])
