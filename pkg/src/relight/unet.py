"""The 3-level depthwise-separable U-Net that learns residual color correction.

Architecture: a 3x3 stem projects the 9-channel input to f1 channels;
two stride-2 convolutions double the width down the encoder (f1 -> 2f1
-> 4f1); the decoder mirrors with bilinear x2 upsampling, a 3x3 conv
halving channels, skip concatenation, and a 1x1 fusion conv. Every
level runs n_blocks inverted-residual blocks (1x1 expand -> GELU ->
depthwise 3x3 -> GroupNorm -> GELU -> 1x1 project -> skip add). The 3x3
head is zero-initialized so a fresh model is an exact identity over the
global residual branch.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Iterator, Optional

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .errors import ConfigError, ShapeError


@dataclass(frozen=True)
class ModelConfig:
    f1: int
    n_blocks: int
    in_channels: int = 9
    out_channels: int = 3
    expansion: int = 4  # pointwise expansion factor inside each block
    gn_groups: int = 2

    def __post_init__(self) -> None:
        if self.f1 < 1 or self.n_blocks < 1:
            raise ConfigError(f"f1 and n_blocks must be >= 1, got {self.f1}, {self.n_blocks}")
        if self.expansion < 1:
            raise ConfigError(f"expansion must be >= 1, got {self.expansion}")
        for width in self.level_widths:
            if (width * self.expansion) % self.gn_groups:
                raise ConfigError(
                    f"expanded width {width * self.expansion} not divisible by "
                    f"gn_groups={self.gn_groups}"
                )

    @property
    def level_widths(self) -> tuple[int, int, int]:
        return (self.f1, 2 * self.f1, 4 * self.f1)

    def to_dict(self) -> dict:
        return {
            "f1": self.f1,
            "n_blocks": self.n_blocks,
            "in_channels": self.in_channels,
            "out_channels": self.out_channels,
            "expansion": self.expansion,
            "gn_groups": self.gn_groups,
        }

    @staticmethod
    def from_dict(d: dict) -> "ModelConfig":
        try:
            return ModelConfig(**{k: int(v) for k, v in d.items()})
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"bad model config {d!r}: {exc}") from exc


PRESETS = {
    "tiny": ModelConfig(f1=22, n_blocks=2),
    "mid": ModelConfig(f1=32, n_blocks=3),
    "large": ModelConfig(f1=48, n_blocks=4),
}


@dataclass
class DwUNet:
    config: ModelConfig
    params: dict[str, Tensor] = field(default_factory=dict)

    def param(self, name: str) -> Tensor:
        return self.params[name]

    def named_params(self) -> Iterator[tuple[str, Tensor]]:
        return iter(self.params.items())

    def set_requires_grad(self, flag: bool) -> None:
        for p in self.params.values():
            p.requires_grad = flag

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None


class _Init:
    """Deterministic parameter factory; creation order defines the RNG stream."""

    def __init__(self, model: DwUNet, seed: int):
        self.model = model
        self.rng = np.random.default_rng(seed)

    def conv(self, name: str, c_out: int, c_in_per_group: int, k: int,
             zero: bool = False) -> None:
        shape = (c_out, c_in_per_group, k, k)
        if zero:
            w = np.zeros(shape, dtype=np.float32)
        else:
            fan_in = c_in_per_group * k * k
            bound = np.sqrt(6.0 / fan_in)
            w = self.rng.uniform(-bound, bound, size=shape).astype(np.float32)
        self.model.params[f"{name}.w"] = Tensor(w, requires_grad=True)
        self.model.params[f"{name}.b"] = Tensor(
            np.zeros(c_out, dtype=np.float32), requires_grad=True
        )

    def group_norm(self, name: str, channels: int) -> None:
        self.model.params[f"{name}.gain"] = Tensor(
            np.ones(channels, dtype=np.float32), requires_grad=True
        )
        self.model.params[f"{name}.bias"] = Tensor(
            np.zeros(channels, dtype=np.float32), requires_grad=True
        )

    def block(self, name: str, channels: int, expansion: int) -> None:
        expanded = channels * expansion
        self.conv(f"{name}.expand", expanded, channels, 1)
        self.conv(f"{name}.dw", expanded, 1, 3)
        self.group_norm(f"{name}.gn", expanded)
        self.conv(f"{name}.project", channels, expanded, 1)


def build(config: ModelConfig, seed: int = 0) -> DwUNet:
    """Instantiate all parameters with deterministic Kaiming-uniform init."""
    model = DwUNet(config=config)
    init = _Init(model, seed)
    f1, f2, f3 = config.level_widths
    n = config.n_blocks
    e = config.expansion

    init.conv("stem", f1, config.in_channels, 3)
    for i in range(n):
        init.block(f"enc1.block{i}", f1, e)
    init.conv("down1", f2, f1, 3)
    for i in range(n):
        init.block(f"enc2.block{i}", f2, e)
    init.conv("down2", f3, f2, 3)
    for i in range(n):
        init.block(f"bottleneck.block{i}", f3, e)
    init.conv("dec2.up", f2, f3, 3)
    init.conv("dec2.fuse", f2, 2 * f2, 1)
    for i in range(n):
        init.block(f"dec2.block{i}", f2, e)
    init.conv("dec1.up", f1, f2, 3)
    init.conv("dec1.fuse", f1, 2 * f1, 1)
    for i in range(n):
        init.block(f"dec1.block{i}", f1, e)
    init.conv("head", config.out_channels, f1, 3, zero=True)
    return model


def _run_block(model: DwUNet, name: str, x: Tensor) -> Tensor:
    p = model.params
    cfg = model.config
    expanded = x.shape[1] * cfg.expansion
    t = ag.conv2d(x, p[f"{name}.expand.w"], p[f"{name}.expand.b"])
    t = ag.gelu(t)
    t = ag.conv2d(t, p[f"{name}.dw.w"], p[f"{name}.dw.b"], padding=1, groups=expanded)
    t = ag.group_norm(t, cfg.gn_groups, p[f"{name}.gn.gain"], p[f"{name}.gn.bias"])
    t = ag.gelu(t)
    t = ag.conv2d(t, p[f"{name}.project.w"], p[f"{name}.project.b"])
    return ag.add(t, x)


def forward(
    model: DwUNet,
    x: Tensor,
    training: bool = False,
    residual_slot: Optional[int] = 0,
) -> Tensor:
    """Run the network on a (B, 9, H, W) input.

    Inputs are reflect-padded to a multiple of 4 and the output cropped
    back, so any H, W >= 3 works. residual_slot selects which 3-channel
    slot of the input feeds the global residual (None disables it, giving
    the raw correction term). Output is clamped to [0, 1] except during
    training, where gradients must flow unclamped into the loss.
    """
    if x.data.ndim != 4:
        raise ShapeError(f"forward: rank-4 input required, got {x.shape}")
    if x.shape[1] != model.config.in_channels:
        raise ShapeError(
            f"forward: expected {model.config.in_channels} input channels, got {x.shape[1]}"
        )
    p = model.params
    n = model.config.n_blocks
    h, w = x.shape[2], x.shape[3]
    pad_h = (-h) % 4
    pad_w = (-w) % 4
    t = ag.pad_reflect(x, 0, pad_h, 0, pad_w) if (pad_h or pad_w) else x

    t = ag.gelu(ag.conv2d(t, p["stem.w"], p["stem.b"], padding=1))
    for i in range(n):
        t = _run_block(model, f"enc1.block{i}", t)
    skip1 = t
    t = ag.conv2d(t, p["down1.w"], p["down1.b"], stride=2, padding=1)
    for i in range(n):
        t = _run_block(model, f"enc2.block{i}", t)
    skip2 = t
    t = ag.conv2d(t, p["down2.w"], p["down2.b"], stride=2, padding=1)
    for i in range(n):
        t = _run_block(model, f"bottleneck.block{i}", t)

    t = ag.upsample_bilinear_x2(t)
    t = ag.conv2d(t, p["dec2.up.w"], p["dec2.up.b"], padding=1)
    t = ag.concat_channels(t, skip2)
    t = ag.conv2d(t, p["dec2.fuse.w"], p["dec2.fuse.b"])
    for i in range(n):
        t = _run_block(model, f"dec2.block{i}", t)

    t = ag.upsample_bilinear_x2(t)
    t = ag.conv2d(t, p["dec1.up.w"], p["dec1.up.b"], padding=1)
    t = ag.concat_channels(t, skip1)
    t = ag.conv2d(t, p["dec1.fuse.w"], p["dec1.fuse.b"])
    for i in range(n):
        t = _run_block(model, f"dec1.block{i}", t)

    t = ag.conv2d(t, p["head.w"], p["head.b"], padding=1)
    if pad_h or pad_w:
        t = ag.crop(t, 0, 0, h, w)
    if residual_slot is not None:
        c0 = model.config.out_channels * residual_slot
        residual = ag.slice_channels(x, c0, c0 + model.config.out_channels)
        t = ag.add(t, residual)
    if not training:
        t = ag.clamp01(t)
    return t


def count_params(model: DwUNet) -> tuple[list[tuple[str, tuple, int]], int]:
    """Per-parameter (name, shape, count) table plus the trainable total."""
    rows = [(name, p.shape, p.size) for name, p in model.named_params()]
    return rows, sum(r[2] for r in rows)


def tiny_config() -> ModelConfig:
    return PRESETS["tiny"]


def config_from_preset_or_dict(name_or_dict) -> ModelConfig:
    if isinstance(name_or_dict, str):
        key = name_or_dict.lower()
        if key not in PRESETS:
            raise ConfigError(f"unknown model preset {name_or_dict!r} "
                              f"(expected one of {sorted(PRESETS)})")
        return PRESETS[key]
    return ModelConfig.from_dict(name_or_dict)


def scaled_config(base: ModelConfig, **overrides) -> ModelConfig:
    return replace(base, **overrides)
