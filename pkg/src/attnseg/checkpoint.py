"""Checkpoint archive (torch.save) with a JSON sidecar for auditing."""

from __future__ import annotations

import json
from pathlib import Path

import torch

from attnseg.config import ExperimentConfig, from_dict
from attnseg.discriminator import build_discriminators
from attnseg.generator import Generator, build_generator


def save_checkpoint(path, cfg: ExperimentConfig, generator, discriminators, epoch: int, seed: int, **extra) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "config": cfg.to_dict(),
        "generator": {k: v.detach().clone() for k, v in generator.state_dict().items()},
        "discriminators": {
            f"stage{i + 1}": {k: v.detach().clone() for k, v in d.state_dict().items()}
            for i, d in enumerate(discriminators)
        },
        "epoch": epoch,
        "seed": seed,
    }
    torch.save(payload, path)
    sidecar = {
        "config_hash": cfg.digest(),
        "seed": seed,
        "epoch": epoch,
        "archive": path.name,
        "generator_tensors": sorted(payload["generator"]),
        **extra,
    }
    path.with_suffix(".json").write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n")
    return path


def load_checkpoint(path) -> tuple[ExperimentConfig, Generator, torch.nn.ModuleList, dict]:
    payload = torch.load(Path(path), map_location="cpu", weights_only=True)
    cfg = from_dict(payload["config"])
    gen_cfg = cfg.generator_config()
    gen = build_generator(gen_cfg, seed=0)
    gen.load_state_dict(payload["generator"])
    discs = build_discriminators(gen_cfg, cfg.discriminator, seed=0)
    for i, d in enumerate(discs):
        d.load_state_dict(payload["discriminators"][f"stage{i + 1}"])
    meta = {"epoch": payload["epoch"], "seed": payload["seed"]}
    return cfg, gen, discs, meta
