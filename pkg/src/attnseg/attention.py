"""Channel and spatial attention, their serial/parallel combinations, and the
guided-attention penalty.

The functional forms take explicit parameter containers so they can be checked
against scalar oracles; :class:`AttentionBlock` wraps them as a module for the
generator. Feature tensors are ``[C, H, W]`` or batched ``[B, C, H, W]``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn

from attnseg.data.transforms import downsample_mask
from attnseg.errors import ConfigurationError, ShapeError

KINDS = ("none", "channel", "spatial", "serial", "parallel")
PLACEMENTS = ("last_stage", "multi_stage")
CHANNEL_GATES = ("sum_of_sigmoids", "single_sigmoid")


@dataclass
class AttentionConfig:
    kind: str = "none"
    placement: str = "multi_stage"
    guided: bool = False
    reduction: int = 8
    channel_gate: str = "sum_of_sigmoids"
    shared_mlp: bool = True

    def validate(self) -> None:
        if self.kind not in KINDS:
            raise ConfigurationError(f"attention.kind must be one of {KINDS}, got {self.kind!r}")
        if self.placement not in PLACEMENTS:
            raise ConfigurationError(
                f"attention.placement must be one of {PLACEMENTS}, got {self.placement!r}"
            )
        if self.channel_gate not in CHANNEL_GATES:
            raise ConfigurationError(f"attention.channel_gate must be one of {CHANNEL_GATES}")
        if self.reduction < 1:
            raise ConfigurationError("attention.reduction must be >= 1")
        if self.guided and not self.has_spatial_map:
            raise ConfigurationError(
                f"guided attention needs a spatial map; kind {self.kind!r} produces none"
            )

    @property
    def has_spatial_map(self) -> bool:
        return self.kind in ("spatial", "serial", "parallel")


@dataclass
class ChannelAttentionParams:
    """Weights of the C -> C/r -> C perceptron.

    ``w1`` is ``[C/r, C]``, ``w2`` is ``[C, C/r]``. When ``avg`` and ``max``
    branches use separate perceptrons, the second set lives in the ``*_max``
    fields.
    """

    w1: torch.Tensor
    b1: torch.Tensor
    w2: torch.Tensor
    b2: torch.Tensor
    w1_max: torch.Tensor | None = None
    b1_max: torch.Tensor | None = None
    w2_max: torch.Tensor | None = None
    b2_max: torch.Tensor | None = None

    @property
    def channels(self) -> int:
        return self.w1.shape[1]

    @property
    def shared(self) -> bool:
        return self.w1_max is None


@dataclass
class SpatialAttentionParams:
    """1x1 convolution from C channels to one: ``weight`` is ``[C]``, ``bias`` a scalar."""

    weight: torch.Tensor
    bias: torch.Tensor

    @property
    def channels(self) -> int:
        return self.weight.shape[0]


def _batched(feat: torch.Tensor) -> tuple[torch.Tensor, bool]:
    if feat.dim() == 3:
        return feat.unsqueeze(0), True
    if feat.dim() == 4:
        return feat, False
    raise ShapeError(f"expected [C,H,W] or [B,C,H,W] features, got shape {tuple(feat.shape)}")


def _mlp(v: torch.Tensor, w1, b1, w2, b2) -> torch.Tensor:
    return torch.relu(v @ w1.T + b1) @ w2.T + b2


def channel_attention(
    feat: torch.Tensor, p: ChannelAttentionParams, gate: str = "sum_of_sigmoids"
) -> torch.Tensor:
    """Per-channel gate from globally average- and max-pooled features.

    With ``gate="sum_of_sigmoids"`` the two pooled branches are squashed separately and
    summed, so entries lie in (0, 2). ``"single_sigmoid"`` squashes the sum of
    the branch outputs instead, giving (0, 1).
    Returns ``[C]`` (or ``[B, C]`` for batched input).
    """
    x, squeeze = _batched(feat)
    if x.shape[1] != p.channels:
        raise ShapeError(f"features have {x.shape[1]} channels, attention expects {p.channels}")
    avg = x.mean(dim=(2, 3))
    mx = x.amax(dim=(2, 3))
    a = _mlp(avg, p.w1, p.b1, p.w2, p.b2)
    if p.shared:
        m = _mlp(mx, p.w1, p.b1, p.w2, p.b2)
    else:
        m = _mlp(mx, p.w1_max, p.b1_max, p.w2_max, p.b2_max)
    if gate == "sum_of_sigmoids":
        out = torch.sigmoid(a) + torch.sigmoid(m)
    elif gate == "single_sigmoid":
        out = torch.sigmoid(a + m)
    else:
        raise ConfigurationError(f"unknown channel gate {gate!r}")
    return out[0] if squeeze else out


def spatial_attention(feat: torch.Tensor, p: SpatialAttentionParams) -> torch.Tensor:
    """Sigmoid of a 1x1 convolution to a single channel; ``[1, H, W]`` (or ``[B, 1, H, W]``)."""
    x, squeeze = _batched(feat)
    if x.shape[1] != p.channels:
        raise ShapeError(f"features have {x.shape[1]} channels, attention expects {p.channels}")
    logits = torch.einsum("bchw,c->bhw", x, p.weight) + p.bias
    out = torch.sigmoid(logits).unsqueeze(1)
    return out[0] if squeeze else out


def apply_channel(feat: torch.Tensor, p: ChannelAttentionParams, gate: str = "sum_of_sigmoids") -> torch.Tensor:
    g = channel_attention(feat, p, gate)
    return feat * g[..., None, None]


def apply_spatial(feat: torch.Tensor, p: SpatialAttentionParams) -> torch.Tensor:
    return feat * spatial_attention(feat, p)


def apply_serial(feat, cp: ChannelAttentionParams, sp: SpatialAttentionParams, gate: str = "sum_of_sigmoids"):
    """Channel gate first, then a spatial gate computed from the channel-gated features."""
    refined = apply_channel(feat, cp, gate)
    amap = spatial_attention(refined, sp)
    return refined * amap, amap


def apply_parallel(feat, cp: ChannelAttentionParams, sp: SpatialAttentionParams, gate: str = "sum_of_sigmoids"):
    """Both gates from the same input, applied multiplicatively."""
    g = channel_attention(feat, cp, gate)
    amap = spatial_attention(feat, sp)
    return feat * g[..., None, None] * amap, amap


def guided_attention_penalty(maps, mask: torch.Tensor) -> torch.Tensor:
    """Mean over maps of the mean absolute gap between each map and the mask
    block-averaged down to that map's resolution.

    ``maps`` holds ``[1, h, w]`` or ``[B, 1, h, w]`` tensors; ``mask`` is
    ``[H, W]`` or ``[B, H, W]``.
    """
    maps = list(maps)
    if not maps:
        raise ShapeError("guided attention penalty needs at least one attention map")
    mask_hw = mask.shape[-2:]
    terms = []
    for amap in maps:
        h, w = amap.shape[-2:]
        if mask_hw[0] % h or mask_hw[1] % w or mask_hw[0] // h != mask_hw[1] // w:
            raise ShapeError(f"map size {h}x{w} does not evenly divide mask size {tuple(mask_hw)}")
        target = downsample_mask(mask.to(amap.dtype), mask_hw[0] // h)
        if amap.dim() == 4 and target.dim() == 3:
            target = target.unsqueeze(1)
        terms.append((amap - target).abs().mean())
    return torch.stack(terms).mean()


def _uniform(shape, fan_in: int) -> torch.Tensor:
    bound = 1.0 / math.sqrt(fan_in)
    return (torch.rand(shape) * 2 - 1) * bound


class ChannelAttention(nn.Module):
    def __init__(self, channels: int, reduction: int = 8, gate: str = "sum_of_sigmoids", shared: bool = True):
        super().__init__()
        if reduction < 1 or channels % reduction:
            raise ConfigurationError(
                f"channel count {channels} must be divisible by reduction {reduction}"
            )
        hidden = channels // reduction
        self.gate = gate
        self.w1 = nn.Parameter(_uniform((hidden, channels), channels))
        self.b1 = nn.Parameter(torch.zeros(hidden))
        self.w2 = nn.Parameter(_uniform((channels, hidden), hidden))
        self.b2 = nn.Parameter(torch.zeros(channels))
        if not shared:
            self.w1_max = nn.Parameter(_uniform((hidden, channels), channels))
            self.b1_max = nn.Parameter(torch.zeros(hidden))
            self.w2_max = nn.Parameter(_uniform((channels, hidden), hidden))
            self.b2_max = nn.Parameter(torch.zeros(channels))
        self.shared = shared

    def params(self) -> ChannelAttentionParams:
        extra = {}
        if not self.shared:
            extra = dict(w1_max=self.w1_max, b1_max=self.b1_max, w2_max=self.w2_max, b2_max=self.b2_max)
        return ChannelAttentionParams(self.w1, self.b1, self.w2, self.b2, **extra)

    def forward(self, feat: torch.Tensor) -> torch.Tensor:
        return channel_attention(feat, self.params(), self.gate)


class SpatialAttention(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.weight = nn.Parameter(_uniform((channels,), channels))
        self.bias = nn.Parameter(torch.zeros(()))

    def params(self) -> SpatialAttentionParams:
        return SpatialAttentionParams(self.weight, self.bias)

    def forward(self, feat: torch.Tensor) -> torch.Tensor:
        return spatial_attention(feat, self.params())


class AttentionBlock(nn.Module):
    """Attention of a configured kind; ``forward`` returns ``(features, spatial_map | None)``."""

    def __init__(self, channels: int, cfg: AttentionConfig):
        super().__init__()
        cfg.validate()
        if cfg.kind == "none":
            raise ConfigurationError("AttentionBlock needs a kind other than 'none'")
        self.kind = cfg.kind
        self.gate = cfg.channel_gate
        self.channel = (
            ChannelAttention(channels, cfg.reduction, cfg.channel_gate, cfg.shared_mlp)
            if cfg.kind in ("channel", "serial", "parallel")
            else None
        )
        self.spatial = SpatialAttention(channels) if cfg.has_spatial_map else None

    def forward(self, feat: torch.Tensor):
        if self.kind == "channel":
            return apply_channel(feat, self.channel.params(), self.gate), None
        if self.kind == "spatial":
            amap = spatial_attention(feat, self.spatial.params())
            return feat * amap, amap
        if self.kind == "serial":
            return apply_serial(feat, self.channel.params(), self.spatial.params(), self.gate)
        return apply_parallel(feat, self.channel.params(), self.spatial.params(), self.gate)
