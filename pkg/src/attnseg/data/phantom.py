"""Synthetic layered-retina phantoms.

A phantom is a stack of seven wavy horizontal bands over a dark background.
Each band is rendered at a constant intensity and the whole image is then
corrupted by multiplicative, mean-one gamma speckle. Optional vertical vessel
shadows darken every band below a vessel's row.
"""

from __future__ import annotations

import zlib
from dataclasses import asdict, dataclass, field

import numpy as np
import torch

from attnseg.errors import ConfigurationError

N_LAYERS = 7
DEFAULT_LAYER_MEANS = (0.70, 0.40, 0.55, 0.30, 0.50, 0.25, 0.65)


@dataclass
class ScanSample:
    """One 2-D scan with its layer labels and guidance mask.

    ``image`` is ``[1, H, W]`` float in [0, 1], ``label`` is ``[H, W]`` int64 with
    0 for background and 1..7 for layers, ``mask`` is ``[H, W]`` float in {0, 1}.
    """

    image: torch.Tensor
    label: torch.Tensor
    mask: torch.Tensor
    subject_id: str
    scan_index: int

    @property
    def shape(self) -> tuple[int, int]:
        return tuple(self.label.shape)

    def replace(self, **changes) -> "ScanSample":
        values = dict(
            image=self.image,
            label=self.label,
            mask=self.mask,
            subject_id=self.subject_id,
            scan_index=self.scan_index,
        )
        values.update(changes)
        return ScanSample(**values)


def _check_range(name: str, rng: tuple[float, float], lo: float | None = None) -> None:
    if len(rng) != 2 or rng[0] > rng[1]:
        raise ConfigurationError(f"{name} must be a (low, high) pair with low <= high, got {rng}")
    if lo is not None and rng[0] < lo:
        raise ConfigurationError(f"{name} must be >= {lo}, got {rng}")


@dataclass
class PhantomParams:
    """Geometry, intensity and noise settings for :func:`generate_phantom`.

    Lengths given as fractions are relative to the image height. Ranges are
    ``(low, high)`` pairs sampled uniformly; ``low == high`` pins a value.
    """

    height: int = 64
    width: int = 64
    n_layers: int = N_LAYERS
    retina_top: tuple[float, float] = (0.18, 0.28)
    layer_thickness: tuple[float, float] = (0.05, 0.09)
    wave_amplitude: tuple[float, float] = (1.0, 4.0)  # pixels
    wave_frequency: tuple[float, float] = (0.5, 1.5)  # cycles per image width
    boundary_jitter: float = 0.6  # pixels, independent per boundary
    layer_means: tuple[float, ...] = DEFAULT_LAYER_MEANS
    background_mean: float = 0.05
    speckle: float = 0.25  # std of the mean-one gamma field; 0 disables
    vessel_count: tuple[int, int] = (0, 0)
    vessel_width: tuple[int, int] = (1, 3)
    vessel_attenuation: float = 0.6
    seed: int = 0

    def validate(self) -> None:
        if self.height < 32 or self.width < 32:
            raise ConfigurationError(
                f"phantom must be at least 32x32, got {self.height}x{self.width}"
            )
        if self.n_layers != N_LAYERS:
            raise ConfigurationError(f"phantoms carry exactly {N_LAYERS} layers")
        if len(self.layer_means) != self.n_layers:
            raise ConfigurationError("layer_means needs one entry per layer")
        if not all(0.0 <= m <= 1.0 for m in (*self.layer_means, self.background_mean)):
            raise ConfigurationError("intensities must lie in [0, 1]")
        _check_range("retina_top", self.retina_top, 0.0)
        _check_range("layer_thickness", self.layer_thickness, 0.0)
        _check_range("wave_amplitude", self.wave_amplitude, 0.0)
        _check_range("wave_frequency", self.wave_frequency, 0.0)
        _check_range("vessel_count", self.vessel_count, 0)
        _check_range("vessel_width", self.vessel_width, 1)
        if self.speckle < 0 or self.boundary_jitter < 0:
            raise ConfigurationError("speckle and boundary_jitter must be non-negative")
        if not 0.0 <= self.vessel_attenuation <= 1.0:
            raise ConfigurationError("vessel_attenuation must lie in [0, 1]")
        deepest = (
            self.retina_top[1] + self.n_layers * self.layer_thickness[1]
        ) * self.height + self.wave_amplitude[1] + self.boundary_jitter
        if deepest >= self.height:
            raise ConfigurationError("retina does not fit inside the image with these ranges")

    def to_dict(self) -> dict:
        return asdict(self)


def _subject_key(subject_id) -> int:
    return zlib.crc32(str(subject_id).encode("utf-8"))


def _rng(params: PhantomParams, subject_id, scan_index: int | None) -> np.random.Generator:
    entropy = [params.seed, _subject_key(subject_id)]
    if scan_index is not None:
        entropy.append(scan_index)
    return np.random.default_rng(np.random.SeedSequence(entropy))


def layer_boundaries(params: PhantomParams, subject_id, scan_index: int) -> np.ndarray:
    """Integer boundary rows, shape ``[n_layers + 1, W]``.

    Layer ``k`` (1-based) occupies rows ``b[k-1] <= y < b[k]``. Every layer is at
    least one pixel thick in every column.
    """
    h, w = params.height, params.width
    # Geometry shared by all scans of a subject; waviness varies per scan.
    subj = _rng(params, subject_id, None)
    top = subj.uniform(*params.retina_top) * h
    thickness = subj.uniform(*params.layer_thickness, size=params.n_layers) * h

    scan = _rng(params, subject_id, scan_index)
    amp = scan.uniform(*params.wave_amplitude)
    freq = scan.uniform(*params.wave_frequency)
    phase = scan.uniform(0.0, 2.0 * np.pi)
    x = np.arange(w)
    wave = amp * np.sin(2.0 * np.pi * freq * x / w + phase)

    depth = np.concatenate([[0.0], np.cumsum(thickness)])
    jitter = scan.uniform(-1.0, 1.0, size=(params.n_layers + 1, 1)) * params.boundary_jitter
    rows = top + depth[:, None] + wave[None, :] + jitter
    bounds = np.rint(rows).astype(np.int64)
    bounds[0] = np.clip(bounds[0], 0, h - params.n_layers - 1)
    for k in range(1, params.n_layers + 1):
        bounds[k] = np.maximum(bounds[k], bounds[k - 1] + 1)
    if bounds[-1].max() > h:
        raise ConfigurationError("layer stack overflows the image")
    return bounds


def label_from_boundaries(bounds: np.ndarray, height: int) -> np.ndarray:
    rows = np.arange(height)[:, None]
    label = np.zeros((height, bounds.shape[1]), dtype=np.int64)
    for k in range(1, bounds.shape[0]):
        label[(rows >= bounds[k - 1]) & (rows < bounds[k])] = k
    return label


def generate_phantom(
    params: PhantomParams,
    subject_id="s000",
    scan_index: int = 0,
    guided_layers=None,
) -> ScanSample:
    """Render one phantom scan; deterministic in ``(params, subject_id, scan_index)``."""
    from attnseg.data.transforms import derive_guidance_mask

    params.validate()
    h, w = params.height, params.width
    bounds = layer_boundaries(params, subject_id, scan_index)
    label = label_from_boundaries(bounds, h)

    means = np.array((params.background_mean, *params.layer_means))
    clean = means[label]

    rng = _rng(params, subject_id, scan_index)
    # Separate stream from the geometry draws so noise settings do not move boundaries.
    noise_rng = np.random.default_rng(rng.integers(2**63))
    n_vessels = int(noise_rng.integers(params.vessel_count[0], params.vessel_count[1] + 1))
    for _ in range(n_vessels):
        width = int(noise_rng.integers(params.vessel_width[0], params.vessel_width[1] + 1))
        x0 = int(noise_rng.integers(0, w - width + 1))
        cols = slice(x0, x0 + width)
        # Vessel sits in the innermost layer; everything beneath it is shadowed.
        start = int(bounds[1, cols].max())
        clean[start:, cols] *= 1.0 - params.vessel_attenuation

    if params.speckle > 0:
        shape = 1.0 / params.speckle**2
        speckle = noise_rng.gamma(shape, 1.0 / shape, size=(h, w))
        image = clean * speckle
    else:
        image = clean
    image = np.clip(image, 0.0, 1.0)

    label_t = torch.from_numpy(label)
    return ScanSample(
        image=torch.from_numpy(image.astype(np.float32))[None],
        label=label_t,
        mask=derive_guidance_mask(label_t, guided_layers),
        subject_id=str(subject_id),
        scan_index=int(scan_index),
    )


@dataclass
class SynthSpec:
    """Counts for a synthetic cohort."""

    n_subjects: int = 40
    scans_per_subject: int = 5
    params: PhantomParams = field(default_factory=PhantomParams)


def subject_name(i: int) -> str:
    return f"s{i:03d}"


def generate_cohort(
    n_subjects: int, scans_per_subject: int, params: PhantomParams, guided_layers=None
) -> list[ScanSample]:
    if n_subjects < 1 or scans_per_subject < 1:
        raise ConfigurationError("cohort needs at least one subject and one scan")
    return [
        generate_phantom(params, subject_name(i), j, guided_layers)
        for i in range(n_subjects)
        for j in range(scans_per_subject)
    ]
