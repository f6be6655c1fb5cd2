"""Paired-dataset training: loading, augmentation, loss, AdamW, LR schedule, loop.

The protocol: AdamW (lr 2e-4, weight decay 1e-4), cosine annealing with a
10-epoch linear warmup, random 384x384 crops and random horizontal/vertical
flips, L1 loss plus an optional perceptual-loss plugin. Preprocessing runs
on the full low image before cropping so crops see the same statistics as
whole-image inference.
"""

from __future__ import annotations

import math
import re
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from . import autograd as ag
from . import checkpoint as ckpt
from .autograd import Tensor
from .errors import ConfigError, DataError, NumericError, ShapeError
from .image import ImageF32, read_png, to_f32
from .preproc import (
    Clahe,
    Gamma,
    PreprocessorKind,
    apply_preproc,
    format_preproc,
    parse_preproc,
)
from .unet import DwUNet, forward

# callable (pred, gt) -> non-negative scalar Tensor participating in backward
PerceptualLossPlugin = Callable[[Tensor, Tensor], Tensor]


@dataclass
class TrainConfig:
    epochs: int = 500
    lr_max: float = 2e-4
    weight_decay: float = 1e-4
    warmup_epochs: int = 10
    crop: int = 384
    batch_size: int = 8
    seed: int = 0
    # None resolves to 1.0 when a perceptual plugin is registered, else 0.0
    lambda_perceptual: Optional[float] = None
    preproc1: PreprocessorKind = field(default_factory=Gamma)
    preproc2: PreprocessorKind = field(default_factory=Clahe)
    checkpoint_every: int = 50
    cache_preproc: bool = False
    deterministic: bool = True

    def __post_init__(self) -> None:
        if self.epochs < 0 or self.warmup_epochs < 0:
            raise ConfigError("epochs and warmup_epochs must be >= 0")
        if self.crop < 1 or self.batch_size < 1:
            raise ConfigError("crop and batch_size must be >= 1")
        if self.lambda_perceptual is not None and self.lambda_perceptual < 0:
            raise ConfigError("lambda_perceptual must be >= 0")

    def resolve_lambda(self, plugin: Optional[PerceptualLossPlugin]) -> float:
        if self.lambda_perceptual is not None:
            return self.lambda_perceptual
        return 1.0 if plugin is not None else 0.0


_CONFIG_PARSERS = {
    "epochs": int,
    "lr_max": float,
    "weight_decay": float,
    "warmup_epochs": int,
    "crop": int,
    "batch_size": int,
    "seed": int,
    "lambda_perceptual": float,
    "preproc1": parse_preproc,
    "preproc2": parse_preproc,
    "checkpoint_every": int,
    "cache_preproc": lambda s: s.lower() in ("1", "true", "yes"),
    "deterministic": lambda s: s.lower() in ("1", "true", "yes"),
}
# keys consumed by the CLI rather than TrainConfig itself
_CLI_CONFIG_KEYS = ("data_root", "out_dir")


def parse_train_config(path: str | Path) -> tuple[TrainConfig, dict[str, str]]:
    """Read a key=value config file; '#' starts a comment. Unknown keys are errors."""
    values: dict = {}
    extras: dict[str, str] = {}
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key=value, got {raw!r}")
        key, _, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if key in _CLI_CONFIG_KEYS:
            extras[key] = value
        elif key in _CONFIG_PARSERS:
            try:
                values[key] = _CONFIG_PARSERS[key](value)
            except (ValueError, ConfigError) as exc:
                raise ConfigError(f"{path}:{lineno}: bad value for {key}: {exc}") from exc
        else:
            raise ConfigError(f"{path}:{lineno}: unknown config key {key!r}")
    return TrainConfig(**values), extras


class PairedDataset:
    """low/ and gt/ subfolders with identically named PNG pairs of equal dims."""

    def __init__(self, root: str | Path):
        self.root = Path(root)
        low_dir = self.root / "low"
        gt_dir = self.root / "gt"
        if not low_dir.is_dir() or not gt_dir.is_dir():
            raise DataError(f"dataset root {self.root} must contain low/ and gt/ subfolders")
        low_names = {p.name for p in low_dir.glob("*.png")}
        gt_names = {p.name for p in gt_dir.glob("*.png")}
        if not low_names:
            raise DataError(f"no PNG files in {low_dir}")
        unmatched = low_names.symmetric_difference(gt_names)
        if unmatched:
            raise DataError(f"unpaired files in {self.root}: {sorted(unmatched)[:5]}")
        self.names = sorted(low_names)
        self._cache: dict[int, tuple[ImageF32, ImageF32]] = {}

    def __len__(self) -> int:
        return len(self.names)

    def pair(self, index: int) -> tuple[ImageF32, ImageF32]:
        if index not in self._cache:
            name = self.names[index]
            low = to_f32(read_png(self.root / "low" / name))
            gt = to_f32(read_png(self.root / "gt" / name))
            if low.data.shape != gt.data.shape:
                raise DataError(
                    f"pair {name}: low is {low.data.shape}, gt is {gt.data.shape}"
                )
            self._cache[index] = (low, gt)
        return self._cache[index]


class _PreprocProvider:
    """Per-item preprocessed planes, optionally cached to .npy files on disk."""

    def __init__(self, dataset: PairedDataset, p1: PreprocessorKind,
                 p2: PreprocessorKind, cache_dir: Optional[Path] = None):
        self.dataset = dataset
        self.kinds = (p1, p2)
        self.cache_dir = cache_dir
        self._mem: dict[tuple[int, int], np.ndarray] = {}
        if cache_dir is not None:
            cache_dir.mkdir(parents=True, exist_ok=True)

    def _slug(self, slot: int) -> str:
        return re.sub(r"[^A-Za-z0-9._-]", "_", format_preproc(self.kinds[slot]))

    def plane(self, index: int, slot: int) -> np.ndarray:
        key = (index, slot)
        if key in self._mem:
            return self._mem[key]
        if self.cache_dir is not None:
            path = self.cache_dir / f"{self.dataset.names[index]}.{self._slug(slot)}.npy"
            if path.exists():
                arr = np.load(path)
            else:
                arr = apply_preproc(self.kinds[slot], self.dataset.pair(index)[0]).data
                np.save(path, arr)
            self._mem[key] = arr
            return arr
        return apply_preproc(self.kinds[slot], self.dataset.pair(index)[0]).data


def _pad_to_min(arr: np.ndarray, crop: int) -> np.ndarray:
    pad_h = max(0, crop - arr.shape[0])
    pad_w = max(0, crop - arr.shape[1])
    if pad_h or pad_w:
        arr = np.pad(arr, ((0, pad_h), (0, pad_w), (0, 0)), mode="reflect")
    return arr


def augment_group(
    planes: list[np.ndarray], crop: int, rng: np.random.Generator
) -> list[np.ndarray]:
    """One crop offset and one flip decision per axis, applied to every plane.

    RNG draw order is fixed: crop row, crop col, h-flip, v-flip.
    """
    planes = [_pad_to_min(p, crop) for p in planes]
    h, w = planes[0].shape[:2]
    for p in planes:
        if p.shape[:2] != (h, w):
            raise ShapeError(f"augment_group: plane dims disagree: {p.shape[:2]} vs {(h, w)}")
    top = int(rng.integers(0, h - crop + 1))
    left = int(rng.integers(0, w - crop + 1))
    h_flip = bool(rng.random() < 0.5)
    v_flip = bool(rng.random() < 0.5)
    out = []
    for p in planes:
        q = p[top : top + crop, left : left + crop]
        if h_flip:
            q = q[:, ::-1]
        if v_flip:
            q = q[::-1, :]
        out.append(np.ascontiguousarray(q))
    return out


def augment_pair(
    low: ImageF32, gt: ImageF32, rng: np.random.Generator, crop: int = 384
) -> tuple[ImageF32, ImageF32]:
    """Identically crop and flip a low/gt pair."""
    a, b = augment_group([low.data, gt.data], crop, rng)
    return ImageF32(a), ImageF32(b)


def lr_schedule(epoch: int, cfg: TrainConfig) -> float:
    """Linear warmup to lr_max, then cosine annealing to zero."""
    if not 0 <= epoch < cfg.epochs:
        raise ConfigError(f"epoch {epoch} outside [0, {cfg.epochs})")
    if epoch < cfg.warmup_epochs:
        return cfg.lr_max * (epoch + 1) / cfg.warmup_epochs
    span = cfg.epochs - cfg.warmup_epochs
    return cfg.lr_max * 0.5 * (1.0 + math.cos(math.pi * (epoch - cfg.warmup_epochs) / span))


class AdamW:
    """Adam with decoupled weight decay (applied separately from the moment update)."""

    def __init__(self, params: dict[str, Tensor], weight_decay: float = 1e-4,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.weight_decay = weight_decay
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self, lr: float) -> None:
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1**t
        bc2 = 1.0 - self.beta2**t
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            if g.shape != p.data.shape:
                raise ShapeError(f"AdamW: grad shape {g.shape} != param shape "
                                 f"{p.data.shape} for {name!r}")
            if self.weight_decay:
                p.data -= (lr * self.weight_decay) * p.data
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * np.square(g)
            m_hat = m / bc1
            v_hat = v / bc2
            p.data -= lr * m_hat / (np.sqrt(v_hat) + self.eps)


def total_loss(pred: Tensor, gt: Tensor, lam: float,
               plugin: Optional[PerceptualLossPlugin] = None) -> Tensor:
    """L1 plus lam * perceptual term; lam > 0 requires a plugin."""
    loss = ag.l1_loss(pred, gt)
    if lam > 0:
        if plugin is None:
            raise ConfigError("lambda_perceptual > 0 but no perceptual plugin registered")
        loss = ag.add(loss, ag.mul_scalar(plugin(pred, gt), lam))
    return loss


@dataclass(frozen=True)
class EpochLog:
    epoch: int
    loss: float
    lr: float
    seconds: float


def write_train_log(rows: list[EpochLog], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        fh.write("epoch,loss,lr,seconds\n")
        for r in rows:
            fh.write(f"{r.epoch},{r.loss:.8f},{r.lr:.8e},{r.seconds:.3f}\n")


def train(
    cfg: TrainConfig,
    dataset: PairedDataset,
    model: DwUNet,
    plugin: Optional[PerceptualLossPlugin] = None,
    out_dir: Optional[str | Path] = None,
    log_fn: Optional[Callable[[EpochLog], None]] = None,
) -> list[EpochLog]:
    """Run the training loop, mutating the model in place; returns per-epoch logs.

    Shuffling and augmentation use two independent named generators derived
    from cfg.seed: default_rng([seed, 0]) for the epoch shuffle and
    default_rng([seed, 1]) for crop/flip decisions.
    """
    lam = cfg.resolve_lambda(plugin)
    if lam > 0 and plugin is None:
        raise ConfigError("lambda_perceptual > 0 but no perceptual plugin registered")
    shuffle_rng = np.random.default_rng([cfg.seed, 0])
    augment_rng = np.random.default_rng([cfg.seed, 1])
    cache_dir = Path(out_dir) / "preproc_cache" if (cfg.cache_preproc and out_dir) else None
    provider = _PreprocProvider(dataset, cfg.preproc1, cfg.preproc2, cache_dir)
    optimizer = AdamW(dict(model.named_params()), weight_decay=cfg.weight_decay)
    metadata = checkpoint_metadata(cfg, model)
    logs: list[EpochLog] = []

    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)

    for epoch in range(cfg.epochs):
        started = time.perf_counter()
        lr = lr_schedule(epoch, cfg)
        order = shuffle_rng.permutation(len(dataset))
        batch_losses = []
        for b0 in range(0, len(order), cfg.batch_size):
            indices = order[b0 : b0 + cfg.batch_size]
            inputs, targets = _assemble_batch(dataset, provider, indices, cfg, augment_rng)
            optimizer.zero_grad()
            pred = forward(model, Tensor(inputs), training=True)
            loss = total_loss(pred, Tensor(targets), lam, plugin)
            loss_value = loss.item()
            if not math.isfinite(loss_value):
                raise NumericError(
                    f"non-finite loss {loss_value} at epoch {epoch}, "
                    f"batch indices {indices.tolist()}"
                )
            ag.backward(loss)
            optimizer.step(lr)
            batch_losses.append(loss_value)
        row = EpochLog(epoch=epoch, loss=float(np.mean(batch_losses)), lr=lr,
                       seconds=time.perf_counter() - started)
        logs.append(row)
        if log_fn is not None:
            log_fn(row)
        if out_dir is not None and cfg.checkpoint_every > 0 \
                and (epoch + 1) % cfg.checkpoint_every == 0:
            ckpt.save_checkpoint(model, Path(out_dir) / f"epoch{epoch + 1:05d}.dwun",
                                 metadata=metadata)

    if out_dir is not None:
        ckpt.save_checkpoint(model, Path(out_dir) / "model.dwun", metadata=metadata)
        write_train_log(logs, Path(out_dir) / "train_log.csv")
    return logs


def checkpoint_metadata(cfg: TrainConfig, model: DwUNet) -> dict:
    return {
        "config": model.config.to_dict(),
        "preproc1": format_preproc(cfg.preproc1),
        "preproc2": format_preproc(cfg.preproc2),
    }


def _assemble_batch(
    dataset: PairedDataset,
    provider: _PreprocProvider,
    indices: np.ndarray,
    cfg: TrainConfig,
    rng: np.random.Generator,
) -> tuple[np.ndarray, np.ndarray]:
    xs, ys = [], []
    for i in indices:
        low, gt = dataset.pair(int(i))
        p1 = provider.plane(int(i), 0)
        p2 = provider.plane(int(i), 1)
        a1, al, a2, agt = augment_group([p1, low.data, p2, gt.data], cfg.crop, rng)
        xs.append(np.concatenate([a1, al, a2], axis=2).transpose(2, 0, 1))
        ys.append(agt.transpose(2, 0, 1))
    return np.stack(xs), np.stack(ys)
