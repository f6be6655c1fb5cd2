"""Matplotlib figures rendered next to the delimited reports.

Kept deliberately small: a loss/LR curve for training logs and a
per-image bar chart for metric reports. Uses the Agg backend so figures
render in headless runs.
"""

from __future__ import annotations

import math
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .metrics import MetricReport
from .train import EpochLog


def save_training_curves(logs: list[EpochLog], path: str | Path) -> None:
    epochs = [r.epoch for r in logs]
    fig, ax = plt.subplots(figsize=(7, 4))
    ax.plot(epochs, [r.loss for r in logs], color="tab:blue", label="loss")
    ax.set_xlabel("epoch")
    ax.set_ylabel("mean loss", color="tab:blue")
    ax.set_yscale("log")
    ax2 = ax.twinx()
    ax2.plot(epochs, [r.lr for r in logs], color="tab:orange", alpha=0.7, label="lr")
    ax2.set_ylabel("learning rate", color="tab:orange")
    ax.set_title("training loss and learning-rate schedule")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_metric_chart(report: MetricReport, path: str | Path) -> None:
    names = [r.filename for r in report.rows]
    psnrs = [0.0 if math.isinf(r.psnr) else r.psnr for r in report.rows]
    ssims = [r.ssim for r in report.rows]
    x = np.arange(len(names))
    fig, (ax1, ax2) = plt.subplots(2, 1, figsize=(max(6, 0.5 * len(names)), 6), sharex=True)
    ax1.bar(x, psnrs, color="tab:blue")
    ax1.set_ylabel("PSNR (dB)")
    if not math.isinf(report.mean_psnr):
        ax1.axhline(report.mean_psnr, color="tab:red", linestyle="--", linewidth=1,
                    label=f"mean {report.mean_psnr:.2f}")
        ax1.legend(fontsize=8)
    ax2.bar(x, ssims, color="tab:green")
    ax2.axhline(report.mean_ssim, color="tab:red", linestyle="--", linewidth=1,
                label=f"mean {report.mean_ssim:.3f}")
    ax2.set_ylabel("SSIM")
    ax2.set_ylim(0, 1.05)
    ax2.legend(fontsize=8)
    ax2.set_xticks(x)
    ax2.set_xticklabels(names, rotation=45, ha="right", fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
