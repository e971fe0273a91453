"""Augmentation, crop windowing and guidance-mask utilities."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from scipy import ndimage

from attnseg.data.phantom import N_LAYERS, ScanSample
from attnseg.errors import ConfigurationError, ShapeError

log = logging.getLogger(__name__)

ALL_LAYERS = frozenset(range(1, N_LAYERS + 1))
AUGMENT_KINDS = ("hflip", "translate", "rotate")


def derive_guidance_mask(label: torch.Tensor, guided_layers=None) -> torch.Tensor:
    """Binary float mask that is 1 exactly where ``label`` is in ``guided_layers``."""
    layers = ALL_LAYERS if guided_layers is None else frozenset(int(v) for v in guided_layers)
    if not layers <= ALL_LAYERS:
        raise ConfigurationError(f"guided layers must be a subset of 1..{N_LAYERS}, got {sorted(layers)}")
    index = torch.tensor(sorted(layers), dtype=label.dtype)
    return torch.isin(label, index).to(torch.float32)


def downsample_mask(mask: torch.Tensor, factor: int) -> torch.Tensor:
    """Average ``factor x factor`` blocks of a mask (zero-padded on the far edges).

    Works on ``[H, W]`` or any ``[..., H, W]`` batch.
    """
    if factor <= 0:
        raise ConfigurationError(f"downsample factor must be positive, got {factor}")
    if factor == 1:
        return mask.to(torch.get_default_dtype()) if not mask.is_floating_point() else mask
    m = mask if mask.is_floating_point() else mask.to(torch.get_default_dtype())
    lead = m.shape[:-2]
    h, w = m.shape[-2:]
    flat = m.reshape(-1, 1, h, w)
    pad_h, pad_w = (-h) % factor, (-w) % factor
    if pad_h or pad_w:
        flat = F.pad(flat, (0, pad_w, 0, pad_h))
    out = F.avg_pool2d(flat, factor)
    return out.reshape(*lead, *out.shape[-2:])


@dataclass(frozen=True)
class Augmentation:
    """One geometric augmentation. Unset parameters are drawn from the seed."""

    kind: str
    dx: int | None = None
    dy: int | None = None
    angle: float | None = None  # degrees, counter-clockwise


def hflip() -> Augmentation:
    return Augmentation("hflip")


def translate(dx: int, dy: int) -> Augmentation:
    return Augmentation("translate", dx=dx, dy=dy)


def rotate(angle: float) -> Augmentation:
    return Augmentation("rotate", angle=angle)


def _resample(arr: np.ndarray, matrix: np.ndarray, offset: np.ndarray, order: int) -> np.ndarray:
    return ndimage.affine_transform(
        arr, matrix, offset=offset, order=order, mode="constant", cval=0.0, prefilter=False
    )


def augment(
    sample: ScanSample,
    op: Augmentation | str,
    seed: int | None = None,
    max_angle: float = 15.0,
    max_shift: float = 0.125,
) -> ScanSample:
    """Apply one geometric augmentation identically to image, label and mask.

    Image uses bilinear resampling; label and mask use nearest neighbour.
    Pixels brought in from outside the frame are background (0). Out-of-range
    parameters are clamped and the clamp is logged. ``max_shift`` bounds a
    drawn translation as a fraction of the image size.
    """
    if isinstance(op, str):
        op = Augmentation(op)
    if op.kind not in AUGMENT_KINDS:
        raise ConfigurationError(f"unknown augmentation {op.kind!r}")
    h, w = sample.shape
    rng = np.random.default_rng(seed)

    image = sample.image[0].numpy().astype(np.float64)
    label = sample.label.numpy()
    mask = sample.mask.numpy()

    if op.kind == "hflip":
        new = [a[:, ::-1].copy() for a in (image, label, mask)]
    elif op.kind == "translate":
        lim_y, lim_x = int(h * max_shift), int(w * max_shift)
        dx = op.dx if op.dx is not None else int(rng.integers(-lim_x, lim_x + 1))
        dy = op.dy if op.dy is not None else int(rng.integers(-lim_y, lim_y + 1))
        cdx, cdy = int(np.clip(dx, -(w - 1), w - 1)), int(np.clip(dy, -(h - 1), h - 1))
        if (cdx, cdy) != (dx, dy):
            log.warning("translation (%d, %d) clamped to (%d, %d)", dx, dy, cdx, cdy)
        new = [_shift(a, cdy, cdx) for a in (image, label, mask)]
    else:
        angle = op.angle if op.angle is not None else float(rng.uniform(-max_angle, max_angle))
        clamped = float(np.clip(angle, -max_angle, max_angle))
        if clamped != angle:
            log.warning("rotation %.3f deg clamped to %.3f deg", angle, clamped)
        matrix, offset = _rotation(clamped, h, w)
        new = [
            _resample(image, matrix, offset, 1),
            _resample(label, matrix, offset, 0),
            _resample(mask, matrix, offset, 0),
        ]

    img, lab, msk = new
    return sample.replace(
        image=torch.from_numpy(np.clip(img, 0.0, 1.0).astype(np.float32))[None],
        label=torch.from_numpy(np.ascontiguousarray(lab).astype(np.int64)),
        mask=torch.from_numpy(np.ascontiguousarray(msk).astype(np.float32)),
    )


def _shift(arr: np.ndarray, dy: int, dx: int) -> np.ndarray:
    out = np.zeros_like(arr)
    h, w = arr.shape
    src_y = slice(max(0, -dy), min(h, h - dy))
    dst_y = slice(max(0, dy), min(h, h + dy))
    src_x = slice(max(0, -dx), min(w, w - dx))
    dst_x = slice(max(0, dx), min(w, w + dx))
    out[dst_y, dst_x] = arr[src_y, src_x]
    return out


def _rotation(angle_deg: float, h: int, w: int) -> tuple[np.ndarray, np.ndarray]:
    # affine_transform maps output coords to input coords: in = M @ out + offset
    theta = np.deg2rad(angle_deg)
    c, s = np.cos(theta), np.sin(theta)
    # (row, col) with rows pointing down: counter-clockwise on screen
    matrix = np.array([[c, s], [-s, c]])
    center = np.array([(h - 1) / 2.0, (w - 1) / 2.0])
    offset = center - matrix @ center
    return matrix, offset


def random_augmentation(sample: ScanSample, seed: int, p_identity: float = 0.25, **kwargs) -> ScanSample:
    """Draw one of identity/hflip/translate/rotate from ``seed`` and apply it."""
    rng = np.random.default_rng(seed)
    if rng.uniform() < p_identity:
        return sample
    kind = AUGMENT_KINDS[int(rng.integers(len(AUGMENT_KINDS)))]
    return augment(sample, kind, seed=int(rng.integers(2**31)), **kwargs)


def window_positions(extent: int, window: int, stride: int) -> list[int]:
    positions = list(range(0, extent - window + 1, stride))
    if positions[-1] != extent - window:
        positions.append(extent - window)
    return positions


def crop_windows(
    sample: ScanSample, window: int = 224, overlap: float = 0.75, min_foreground: float = 0.0
) -> list[ScanSample]:
    """Slide a square window over the scan with the given fractional overlap.

    Windows sit at multiples of ``round(window * (1 - overlap))`` along each
    axis, plus one window flush with the far border whenever the strided
    positions stop short of it. Crops whose foreground fraction is below
    ``min_foreground`` are dropped.
    """
    h, w = sample.shape
    if window <= 0 or window > min(h, w):
        raise ShapeError(f"window {window} does not fit inside a {h}x{w} image")
    if not 0.0 <= overlap < 1.0:
        raise ConfigurationError(f"overlap must lie in [0, 1), got {overlap}")
    stride = max(1, int(round(window * (1.0 - overlap))))
    crops = []
    for y in window_positions(h, window, stride):
        for x in window_positions(w, window, stride):
            label = sample.label[y : y + window, x : x + window]
            if min_foreground > 0 and (label > 0).float().mean().item() < min_foreground:
                continue
            crops.append(
                sample.replace(
                    image=sample.image[:, y : y + window, x : x + window].clone(),
                    label=label.clone(),
                    mask=sample.mask[y : y + window, x : x + window].clone(),
                )
            )
    return crops
