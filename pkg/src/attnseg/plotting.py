"""Static figures. Every PNG is written with a sidecar JSON of the plotted numbers."""

from __future__ import annotations

import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
import torch  # noqa: E402

from attnseg.attention import guided_attention_penalty  # noqa: E402
from attnseg.data.transforms import downsample_mask  # noqa: E402
from attnseg.evaluation import METRIC_TITLES, METRICS  # noqa: E402
from attnseg.training import make_batch  # noqa: E402

PNG_METADATA = {"Software": None}


def _save(fig, path: Path) -> None:
    fig.savefig(path, dpi=100, metadata=PNG_METADATA)
    plt.close(fig)


def attention_figure(generator, sample, out_prefix) -> dict:
    """Render input, predicted labels, each spatial attention map and the mask.

    Writes ``<prefix>.png`` and ``<prefix>.json``; returns the JSON payload.
    """
    out_prefix = Path(out_prefix)
    out_prefix.parent.mkdir(parents=True, exist_ok=True)
    cfg = generator.cfg
    batch = make_batch([sample], cfg.n_stages, cfg.n_classes)
    with torch.no_grad():
        stages = generator(batch.x)
    pred = stages[-1].prediction[0].argmax(dim=0)
    maps = [m[0, 0] for m in stages[-1].attention_maps]
    mask = batch.mask[0]

    map_stats = []
    for i, m in enumerate(maps):
        target = downsample_mask(mask, mask.shape[-1] // m.shape[-1])
        map_stats.append(
            {
                "index": i,
                "shape": list(m.shape),
                "mean": float(m.mean()),
                "mae_to_mask": float((m - target).abs().mean()),
                "values": np.round(m.numpy().astype(np.float64), 6).tolist(),
            }
        )

    panels = [("input", batch.conditions[-1][0, 0], "gray"), ("prediction", pred, "tab10")]
    panels += [(f"attention {i + 1}", m, "viridis") for i, m in enumerate(maps)]
    panels.append(("guidance mask", mask, "gray"))
    fig, axes = plt.subplots(1, len(panels), figsize=(2.2 * len(panels), 2.4))
    for ax, (title, img, cmap) in zip(np.atleast_1d(axes), panels):
        vmax = cfg.n_classes - 1 if title == "prediction" else 1.0
        ax.imshow(img.numpy(), cmap=cmap, vmin=0.0, vmax=vmax, interpolation="nearest")
        ax.set_title(title, fontsize=9)
        ax.set_xticks([])
        ax.set_yticks([])
    fig.tight_layout()
    _save(fig, out_prefix.with_suffix(".png"))

    payload = {
        "subject_id": sample.subject_id,
        "scan_index": sample.scan_index,
        "attention_kind": cfg.attention.kind,
        "placement": cfg.attention.placement,
        "maps": map_stats,
        "mean_mae_to_mask": float(guided_attention_penalty([m[None] for m in maps], mask)) if maps else None,
        "mask_mean": float(mask.mean()),
    }
    out_prefix.with_suffix(".json").write_text(json.dumps(payload, indent=1, sort_keys=True) + "\n")
    return payload


def ablation_figure(table, out_prefix) -> dict:
    """Grouped bars of mean ± std per grid cell and metric."""
    from attnseg.training import config_id

    out_prefix = Path(out_prefix)
    cells = list(table.reports)
    names = [config_id(*c) for c in cells]
    payload = {
        "cells": names,
        **{
            m: {
                "mean": [table.reports[c].mean(m) for c in cells],
                "std": [table.reports[c].std(m) for c in cells],
            }
            for m in METRICS
        },
    }
    fig, axes = plt.subplots(1, len(METRICS), figsize=(4 * len(METRICS), 3.2))
    x = np.arange(len(cells))
    for ax, m in zip(axes, METRICS):
        ax.bar(x, payload[m]["mean"], yerr=payload[m]["std"], color="0.6", capsize=2)
        ax.set_xticks(x)
        ax.set_xticklabels(names, rotation=60, ha="right", fontsize=7)
        ax.set_title(METRIC_TITLES[m], fontsize=10)
        lo = min(payload[m]["mean"]) if cells else 0.0
        ax.set_ylim(max(0.0, lo - 0.1) if m != "l1" else 0.0, None)
    fig.tight_layout()
    _save(fig, out_prefix.with_suffix(".png"))
    out_prefix.with_suffix(".json").write_text(json.dumps(payload, indent=1, sort_keys=True) + "\n")
    return payload


def history_figure(history, out_prefix) -> None:
    out_prefix = Path(out_prefix)
    epochs = history.column("epoch")
    fig, (a, b) = plt.subplots(1, 2, figsize=(8, 3))
    a.plot(epochs, history.column("train_loss"), label="train loss")
    a.set_xlabel("epoch")
    a.legend(frameon=False)
    b.plot(epochs, history.column("val_dice"), label="val Dice")
    b.plot(epochs, history.column("guide_penalty"), label="guidance gap")
    b.set_xlabel("epoch")
    b.legend(frameon=False)
    fig.tight_layout()
    _save(fig, out_prefix.with_suffix(".png"))
