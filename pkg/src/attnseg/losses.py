"""Segmentation, similarity and adversarial objectives.

Tensor layout for the per-class losses: ``[H, W]`` is a single channel,
``[K, H, W]`` is one sample with K class channels, ``[B, K, H, W]`` a batch.
Per-class terms are reduced over batch and space, then averaged over classes.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F

from attnseg.attention import guided_attention_penalty
from attnseg.errors import ConfigurationError, ShapeError

DICE_EPS = 1e-6
SSIM_WINDOW = 11
SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2


@dataclass
class LossWeights:
    adv: float = 0.1
    dice: float = 1.0
    ssim: float = 1.0
    l1: float = 1.0
    guide: float = 1.0
    ce: float = 0.0
    stage_weights: list[float] | None = None

    def validate(self) -> None:
        values = [self.adv, self.dice, self.ssim, self.l1, self.guide, self.ce]
        if any(v < 0 for v in values):
            raise ConfigurationError("loss weights must be non-negative")
        if max(self.dice, self.ssim, self.l1) <= 0:
            raise ConfigurationError("at least one of loss.dice, loss.ssim, loss.l1 must be positive")
        if self.stage_weights is not None and any(w < 0 for w in self.stage_weights):
            raise ConfigurationError("loss.stage_weights must be non-negative")

    def stage_weight(self, stage: int, n_stages: int) -> float:
        if self.stage_weights is None:
            return 1.0
        if len(self.stage_weights) != n_stages:
            raise ConfigurationError(
                f"loss.stage_weights has {len(self.stage_weights)} entries for {n_stages} stages"
            )
        return float(self.stage_weights[stage - 1])


def _check_pair(pred: torch.Tensor, target: torch.Tensor) -> None:
    if pred.shape != target.shape:
        raise ShapeError(f"prediction {tuple(pred.shape)} and target {tuple(target.shape)} differ")


def _class_major(t: torch.Tensor) -> torch.Tensor:
    """Reshape to ``[K, N]`` with every non-class element flattened into N."""
    if t.dim() == 2:
        return t.reshape(1, -1)
    if t.dim() == 3:
        return t.reshape(t.shape[0], -1)
    if t.dim() == 4:
        return t.transpose(0, 1).reshape(t.shape[1], -1)
    raise ShapeError(f"expected 2-4 dims, got {tuple(t.shape)}")


def l1_loss(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Mean absolute difference over all elements."""
    _check_pair(pred, target)
    return (pred - target).abs().mean()


def dice_loss(pred: torch.Tensor, target: torch.Tensor, eps: float = DICE_EPS) -> torch.Tensor:
    """``1 - (2 sum(p y) + eps) / (sum(p^2) + sum(y^2) + eps)`` per class, averaged."""
    _check_pair(pred, target)
    p, y = _class_major(pred), _class_major(target)
    num = 2 * (p * y).sum(dim=1) + eps
    den = (p * p).sum(dim=1) + (y * y).sum(dim=1) + eps
    return (1 - num / den).mean()


def _ssim_window(h: int, w: int) -> int:
    win = min(SSIM_WINDOW, h, w)
    return win if win % 2 else win - 1


def _box_filter(t: torch.Tensor, win: int) -> torch.Tensor:
    """Uniform ``win x win`` mean with reflect padding via running sums; ``t`` is ``[..., H, W]``."""
    pad = win // 2
    if pad:
        t = F.pad(t, (pad, pad, pad, pad), mode="reflect")
    c = F.pad(t.cumsum(-1), (1, 0))
    t = (c[..., win:] - c[..., :-win]) / win
    c = F.pad(t.cumsum(-2), (0, 0, 1, 0))
    return (c[..., win:, :] - c[..., :-win, :]) / win


def ssim_map(a: torch.Tensor, b: torch.Tensor, c1: float = SSIM_C1, c2: float = SSIM_C2) -> torch.Tensor:
    """Local SSIM over an 11x11 uniform window (shrunk for tiny images), reflect-padded."""
    _check_pair(a, b)
    h, w = a.shape[-2:]
    x = a.reshape(-1, 1, h, w)
    y = b.reshape(-1, 1, h, w)
    win = _ssim_window(h, w)
    moments = _box_filter(torch.cat([x, y, x * x, y * y, x * y], dim=1), win)
    mu_x, mu_y, xx, yy, xy = moments.unbind(dim=1)
    var_x = (xx - mu_x * mu_x).clamp_min(0)
    var_y = (yy - mu_y * mu_y).clamp_min(0)
    cov = xy - mu_x * mu_y
    num = (2 * mu_x * mu_y + c1) * (2 * cov + c2)
    den = (mu_x * mu_x + mu_y * mu_y + c1) * (var_x + var_y + c2)
    return (num / den).reshape(a.shape)


def ssim(a: torch.Tensor, b: torch.Tensor, c1: float = SSIM_C1, c2: float = SSIM_C2) -> torch.Tensor:
    """Mean SSIM over all windows (and channels, for stacked inputs)."""
    return ssim_map(a, b, c1, c2).mean()


def ssim_loss(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """``1 - ssim`` computed per class channel and averaged over classes."""
    return 1 - _class_major(ssim_map(pred, target)).mean(dim=1).mean()


def adversarial_g_loss(logit_maps) -> torch.Tensor:
    """Least-squares generator objective, averaged over the given logit maps."""
    if isinstance(logit_maps, torch.Tensor):
        logit_maps = [logit_maps]
    return torch.stack([((m - 1) ** 2).mean() for m in logit_maps]).mean()


def adversarial_d_loss(real_logits: torch.Tensor, fake_logits: torch.Tensor) -> torch.Tensor:
    return ((real_logits - 1) ** 2).mean() + (fake_logits**2).mean()


def cross_entropy_loss(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Cross-entropy between simplex predictions and one-hot targets (off by default)."""
    _check_pair(pred, target)
    dim = 0 if pred.dim() == 3 else 1
    return -(target * pred.clamp_min(1e-8).log()).sum(dim=dim).mean()


def total_generator_loss(stages, targets, mask, weights: LossWeights, adv_logits=None, guided: bool = True):
    """Weighted multi-stage objective.

    Per stage ``s``: ``w_s * (adv*adv_s + dice*dice_s + ssim*ssim_s + l1*l1_s)``,
    plus ``guide`` times the guided-attention penalty over all collected maps.
    ``adv_logits`` holds one discriminator logit map per stage and may be omitted
    when ``weights.adv`` is zero. Returns ``(total, breakdown)`` where breakdown
    maps ``(stage, term)`` to a detached float; stage 0 marks whole-network terms.
    """
    n = len(stages)
    if len(targets) != n:
        raise ShapeError(f"{len(targets)} targets for {n} stages")
    total = None
    breakdown: dict[tuple[int, str], float] = {}

    def add(term_value, scale, key):
        nonlocal total
        breakdown[key] = float(term_value.detach())
        if scale:
            contrib = scale * term_value
            total = contrib if total is None else total + contrib

    for i, (out, target) in enumerate(zip(stages, targets)):
        pred = out.prediction if hasattr(out, "prediction") else out
        s = i + 1
        ws = weights.stage_weight(s, n)
        add(dice_loss(pred, target), ws * weights.dice, (s, "dice"))
        add(ssim_loss(pred, target), ws * weights.ssim, (s, "ssim"))
        add(l1_loss(pred, target), ws * weights.l1, (s, "l1"))
        if weights.ce:
            add(cross_entropy_loss(pred, target), ws * weights.ce, (s, "ce"))
        if weights.adv and adv_logits is not None:
            add(adversarial_g_loss(adv_logits[i]), ws * weights.adv, (s, "adv"))

    maps = getattr(stages[-1], "attention_maps", None) if stages else None
    if maps and mask is not None:
        # Logged for unguided runs too; only weighted in when guidance is on.
        add(guided_attention_penalty(maps, mask), weights.guide if guided else 0.0, (0, "guide"))

    if total is None:
        first = getattr(stages[0], "prediction", stages[0]) if stages else None
        total = torch.zeros((), dtype=first.dtype if first is not None else torch.float32)
    breakdown[(0, "total")] = float(total.detach())
    return total, breakdown
