"""On-disk dataset layout: one directory per subject plus a JSON manifest."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from attnseg.data.phantom import PhantomParams, ScanSample, generate_cohort
from attnseg.errors import ConfigurationError

MANIFEST = "manifest.json"


def _write_png(path: Path, array: np.ndarray) -> None:
    Image.fromarray(array).save(path, format="PNG")


def write_dataset(samples: list[ScanSample], out_dir, generator: dict | None = None) -> Path:
    """Write samples as 16-bit image / 8-bit label / 8-bit mask PNGs and a manifest."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for s in samples:
        subj_dir = out / s.subject_id
        subj_dir.mkdir(exist_ok=True)
        stem = f"scan{s.scan_index:03d}"
        img = np.rint(s.image[0].numpy().astype(np.float64) * 65535).astype(np.uint16)
        _write_png(subj_dir / f"{stem}_image.png", img)
        _write_png(subj_dir / f"{stem}_label.png", s.label.numpy().astype(np.uint8))
        _write_png(subj_dir / f"{stem}_mask.png", (s.mask.numpy() * 255).astype(np.uint8))
        entries.append(
            {
                "subject_id": s.subject_id,
                "scan_index": s.scan_index,
                "image": f"{s.subject_id}/{stem}_image.png",
                "label": f"{s.subject_id}/{stem}_label.png",
                "mask": f"{s.subject_id}/{stem}_mask.png",
            }
        )
    manifest = {
        "n_samples": len(entries),
        "n_subjects": len({e["subject_id"] for e in entries}),
        "generator": generator,
        "samples": entries,
    }
    (out / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return out


def _read_image(path: Path) -> torch.Tensor:
    with Image.open(path) as im:
        arr = np.asarray(im)
    scale = 65535.0 if arr.dtype == np.uint16 or arr.max(initial=0) > 255 else 255.0
    return torch.from_numpy((arr.astype(np.float64) / scale).astype(np.float32))


def read_dataset(root) -> list[ScanSample]:
    root = Path(root)
    manifest_path = root / MANIFEST
    if not manifest_path.exists():
        raise ConfigurationError(f"no {MANIFEST} in {root}")
    manifest = json.loads(manifest_path.read_text())
    samples = []
    for e in manifest["samples"]:
        with Image.open(root / e["label"]) as im:
            label = torch.from_numpy(np.asarray(im).astype(np.int64))
        with Image.open(root / e["mask"]) as im:
            mask = torch.from_numpy((np.asarray(im) > 127).astype(np.float32))
        samples.append(
            ScanSample(
                image=_read_image(root / e["image"])[None],
                label=label,
                mask=mask,
                subject_id=str(e["subject_id"]),
                scan_index=int(e["scan_index"]),
            )
        )
    return samples


def synthesize_dataset(
    out_dir, n_subjects: int, scans_per_subject: int, params: PhantomParams, guided_layers=None
) -> Path:
    samples = generate_cohort(n_subjects, scans_per_subject, params, guided_layers)
    generator = {
        "kind": "layered_retina_phantom",
        "params": params.to_dict(),
        "n_subjects": n_subjects,
        "scans_per_subject": scans_per_subject,
        "guided_layers": sorted(guided_layers) if guided_layers is not None else list(range(1, 8)),
    }
    return write_dataset(samples, out_dir, generator)
