"""Per-stage conditional PatchGAN discriminators."""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn

from attnseg.errors import ConfigurationError, ShapeError
from attnseg.generator import GeneratorConfig

NORMS = ("none", "instance")


@dataclass
class DiscriminatorConfig:
    n_layers: int = 3
    base_width: int = 16
    kernel: int = 4
    padding: int = 1
    max_width: int = 128
    conditional: bool = True
    # Instance norm pools statistics over the whole map, which breaks patch locality.
    norm: str = "none"

    def validate(self) -> None:
        if self.n_layers < 1:
            raise ConfigurationError("discriminator.n_layers must be >= 1")
        if self.kernel < 1 or self.padding < 0 or self.base_width < 1:
            raise ConfigurationError("discriminator kernel/padding/width out of range")
        if self.norm not in NORMS:
            raise ConfigurationError(f"discriminator.norm must be one of {NORMS}")

    def layer_specs(self) -> list[tuple[int, int, int]]:
        """``(kernel, stride, padding)`` for every conv, final logit conv included."""
        return [(self.kernel, 2, self.padding)] * self.n_layers + [(self.kernel, 1, self.padding)]

    def output_size(self, size: int) -> int:
        for k, s, p in self.layer_specs():
            size = (size + 2 * p - k) // s + 1
        return size

    def receptive_field(self) -> int:
        rf, jump = 1, 1
        for k, s, _ in self.layer_specs():
            rf += (k - 1) * jump
            jump *= s
        return rf


def input_span(cfg: DiscriminatorConfig, index: int) -> tuple[int, int]:
    """Inclusive range of input coordinates (along one axis) that logit ``index`` sees.

    May extend past the image edge into the zero padding.
    """
    lo = hi = index
    for k, s, p in reversed(cfg.layer_specs()):
        lo = lo * s - p
        hi = hi * s - p + k - 1
    return lo, hi


class PatchDiscriminator(nn.Module):
    def __init__(self, in_channels: int, cfg: DiscriminatorConfig, stage_size: tuple[int, int] | None = None):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        self.in_channels = in_channels
        self.stage_size = stage_size
        if stage_size is not None and min(cfg.output_size(n) for n in stage_size) < 1:
            raise ConfigurationError(
                f"{cfg.n_layers} stride-2 layers leave no logits for a {stage_size} stage"
            )
        layers: list[nn.Module] = []
        c_in, width = in_channels, cfg.base_width
        for i in range(cfg.n_layers):
            layers.append(nn.Conv2d(c_in, width, cfg.kernel, stride=2, padding=cfg.padding))
            if i > 0 and cfg.norm == "instance":
                layers.append(nn.InstanceNorm2d(width, affine=True))
            layers.append(nn.LeakyReLU(0.2, inplace=True))
            c_in, width = width, min(width * 2, cfg.max_width)
        layers.append(nn.Conv2d(c_in, 1, cfg.kernel, stride=1, padding=cfg.padding))
        self.net = nn.Sequential(*layers)

    def forward(self, condition: torch.Tensor, candidate: torch.Tensor) -> torch.Tensor:
        return discriminate(self, condition, candidate)


def discriminate(d: PatchDiscriminator, condition: torch.Tensor, candidate: torch.Tensor) -> torch.Tensor:
    """Logit map for a (scan, label candidate) pair; ``[1, h', w']`` or ``[B, 1, h', w']``."""
    squeeze = candidate.dim() == 3
    if squeeze:
        candidate = candidate.unsqueeze(0)
        condition = condition.unsqueeze(0) if condition is not None else None
    if d.cfg.conditional:
        if condition is None or condition.shape[-2:] != candidate.shape[-2:]:
            raise ShapeError("condition and candidate must share spatial size")
        x = torch.cat([condition, candidate], dim=1)
    else:
        x = candidate
    if x.shape[1] != d.in_channels:
        raise ShapeError(f"discriminator expects {d.in_channels} channels, got {x.shape[1]}")
    out = d.net(x)
    return out[0] if squeeze else out


def build_discriminators(
    gen_cfg: GeneratorConfig, cfg: DiscriminatorConfig | None = None, seed: int = 0
) -> nn.ModuleList:
    """One discriminator per generator stage, seeded independently of the generator."""
    cfg = cfg or DiscriminatorConfig()
    in_ch = gen_cfg.n_classes + (gen_cfg.in_channels if cfg.conditional else 0)
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return nn.ModuleList(
            [
                PatchDiscriminator(in_ch, cfg, gen_cfg.stage_size(s))
                for s in range(1, gen_cfg.n_stages + 1)
            ]
        )
