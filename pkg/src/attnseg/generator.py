"""Multi-stage superresolving segmentation generator.

A residual trunk extracts features at the input resolution; each stage then
doubles the resolution with a transposed bottleneck block and emits a
per-pixel class distribution through a 1x1 head. Attention, when configured,
sits immediately before a stage head and its output feeds the next stage.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

from attnseg.attention import AttentionBlock, AttentionConfig
from attnseg.errors import ConfigurationError, ShapeError


@dataclass
class GeneratorConfig:
    input_size: tuple[int, int] = (16, 16)
    in_channels: int = 1
    base_width: int = 32
    n_residual: int = 4
    n_stages: int = 2
    n_classes: int = 8
    attention: AttentionConfig = field(default_factory=AttentionConfig)

    def validate(self) -> None:
        if self.n_stages < 1:
            raise ConfigurationError("generator.n_stages must be >= 1")
        if self.n_classes < 2:
            raise ConfigurationError("generator.n_classes must be >= 2")
        if self.base_width < 2 or self.n_residual < 0 or self.in_channels < 1:
            raise ConfigurationError("generator widths/depths out of range")
        if min(self.input_size) < 1:
            raise ConfigurationError("generator.input_size must be positive")
        self.attention.validate()
        if self.attention.kind in ("channel", "serial", "parallel") and (
            self.base_width % self.attention.reduction
        ):
            raise ConfigurationError(
                f"base_width {self.base_width} not divisible by attention.reduction "
                f"{self.attention.reduction}"
            )

    def stage_size(self, stage: int) -> tuple[int, int]:
        """Spatial size of stage ``stage`` (1-based)."""
        h, w = self.input_size
        return h * 2**stage, w * 2**stage

    @property
    def output_size(self) -> tuple[int, int]:
        return self.stage_size(self.n_stages)

    def attended_stages(self) -> list[int]:
        if self.attention.kind == "none":
            return []
        if self.attention.placement == "last_stage":
            return [self.n_stages]
        return list(range(1, self.n_stages + 1))


@dataclass
class StageOutput:
    stage: int
    prediction: torch.Tensor  # [B, K, h, w], simplex-normalized per pixel
    attention_maps: list[torch.Tensor]  # spatial maps from this and earlier stages


class ResidualBlock(nn.Module):
    def __init__(self, width: int):
        super().__init__()
        self.body = nn.Sequential(
            nn.Conv2d(width, width, 3, padding=1),
            nn.InstanceNorm2d(width, affine=True),
            nn.ReLU(inplace=True),
            nn.Conv2d(width, width, 3, padding=1),
            nn.InstanceNorm2d(width, affine=True),
        )

    def forward(self, x):
        return x + self.body(x)


class TransposedBottleneck(nn.Module):
    """1x1 reduce -> stride-2 transposed conv -> 1x1 restore, with an upsampled skip."""

    def __init__(self, width: int):
        super().__init__()
        mid = max(1, width // 2)
        self.body = nn.Sequential(
            nn.Conv2d(width, mid, 1),
            nn.InstanceNorm2d(mid, affine=True),
            nn.ReLU(inplace=True),
            nn.ConvTranspose2d(mid, mid, 4, stride=2, padding=1),
            nn.InstanceNorm2d(mid, affine=True),
            nn.ReLU(inplace=True),
            nn.Conv2d(mid, width, 1),
            nn.InstanceNorm2d(width, affine=True),
        )
        self.skip = nn.Conv2d(width, width, 1)

    def forward(self, x):
        up = F.interpolate(x, scale_factor=2, mode="nearest")
        return torch.relu(self.body(x) + self.skip(up))


class Generator(nn.Module):
    def __init__(self, cfg: GeneratorConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        w = cfg.base_width
        self.stem = nn.Sequential(
            nn.Conv2d(cfg.in_channels, w, 3, padding=1),
            nn.InstanceNorm2d(w, affine=True),
            nn.ReLU(inplace=True),
        )
        self.trunk = nn.Sequential(*[ResidualBlock(w) for _ in range(cfg.n_residual)])
        self.ups = nn.ModuleList([TransposedBottleneck(w) for _ in range(cfg.n_stages)])
        attended = set(cfg.attended_stages())
        self.attention = nn.ModuleDict(
            {str(s): AttentionBlock(w, cfg.attention) for s in sorted(attended)}
        )
        self.heads = nn.ModuleList([nn.Conv2d(w, cfg.n_classes, 1) for _ in range(cfg.n_stages)])

    def forward(self, x: torch.Tensor) -> list[StageOutput]:
        squeeze = x.dim() == 3
        if squeeze:
            x = x.unsqueeze(0)
        if x.dim() != 4 or x.shape[1] != self.cfg.in_channels:
            raise ShapeError(f"generator expects [B,{self.cfg.in_channels},h,w], got {tuple(x.shape)}")
        if tuple(x.shape[-2:]) != tuple(self.cfg.input_size):
            raise ShapeError(
                f"generator input must be {tuple(self.cfg.input_size)}, got {tuple(x.shape[-2:])}"
            )
        feat = self.trunk(self.stem(x))
        maps: list[torch.Tensor] = []
        outputs = []
        for s in range(1, self.cfg.n_stages + 1):
            feat = self.ups[s - 1](feat)
            block = self.attention[str(s)] if str(s) in self.attention else None
            if block is not None:
                feat, amap = block(feat)
                if amap is not None:
                    maps.append(amap[0] if squeeze else amap)
            pred = torch.softmax(self.heads[s - 1](feat), dim=1)
            outputs.append(StageOutput(s, pred[0] if squeeze else pred, list(maps)))
        return outputs


def build_generator(cfg: GeneratorConfig, seed: int = 0) -> Generator:
    """Construct a generator with parameters drawn from ``seed`` (global RNG untouched)."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return Generator(cfg)


def forward(gen: Generator, x: torch.Tensor) -> list[StageOutput]:
    return gen(x)


def one_hot(label: torch.Tensor, n_classes: int) -> torch.Tensor:
    """``[..., H, W]`` integer labels to ``[..., K, H, W]`` float one-hot."""
    oh = F.one_hot(label.long(), n_classes).to(torch.get_default_dtype())
    return oh.movedim(-1, -3)


def nearest_downsample(t: torch.Tensor, factor: int) -> torch.Tensor:
    """Pick the pixel nearest each ``factor x factor`` block centre (lower-right of centre for even sizes)."""
    if factor == 1:
        return t
    off = factor // 2
    return t[..., off::factor, off::factor]


def stage_targets(label: torch.Tensor, n_stages: int, n_classes: int = 8) -> list[torch.Tensor]:
    """One-hot targets for stages 1..S; the last is full resolution."""
    h, w = label.shape[-2:]
    scale = 2 ** (n_stages - 1)
    if h % scale or w % scale:
        raise ShapeError(f"label size {h}x{w} not divisible by {scale}")
    oh = one_hot(label, n_classes)
    return [nearest_downsample(oh, 2 ** (n_stages - s)) for s in range(1, n_stages + 1)]


def parameter_count(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())
