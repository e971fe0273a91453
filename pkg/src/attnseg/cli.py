"""Command-line entry point: synth | train | eval | ablate | plot-attention."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from attnseg.config import ExperimentConfig, config_keys, load_config, parse_override
from attnseg.data.phantom import PhantomParams
from attnseg.errors import AttnSegError

log = logging.getLogger("attnseg")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.exit(2, f"error: usage: {message}\n")


def _keys_epilog(prefixes=None) -> str:
    keys = config_keys()
    if prefixes:
        keys = [k for k in keys if k.startswith(tuple(prefixes))]
    return "config keys consumed:\n  " + "\n  ".join(keys)


def _experiment(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    overrides = dict(parse_override(s) for s in args.set or [])
    if getattr(args, "name", None):
        overrides["name"] = args.name
    return cfg.replace(**overrides) if overrides else cfg


def _run_dir(cfg: ExperimentConfig) -> Path:
    from attnseg.training import runs_root

    return runs_root() / cfg.name


def cmd_synth(args) -> int:
    from attnseg.data.io import synthesize_dataset

    params = PhantomParams(
        height=args.size[0],
        width=args.size[1],
        seed=args.seed,
        speckle=args.speckle,
        vessel_count=tuple(args.vessels),
    )
    out = synthesize_dataset(args.out, args.subjects, args.scans_per_subject, params)
    print(f"wrote {args.subjects * args.scans_per_subject} samples to {out}")
    return 0


def cmd_train(args) -> int:
    from attnseg.plotting import history_figure
    from attnseg.training import run_5cv

    cfg = _experiment(args)
    run_dir = _run_dir(cfg)
    folds = None if args.all or args.fold is None else [args.fold]
    results = run_5cv(cfg, run_dir=run_dir, folds=folds)
    for o in results.outcomes:
        history_figure(o.history, run_dir / f"fold{o.fold}" / "history")
        print(
            f"fold {o.fold}: best epoch {o.best_epoch} dice {o.metrics['dice']:.4f} "
            f"ssim {o.metrics['ssim']:.4f} l1 {o.metrics['l1']:.4f}"
        )
    rep = results.report
    print(f"mean±std across folds: dice {rep.cell('dice')} ssim {rep.cell('ssim')} l1 {rep.cell('l1')}")
    print(f"run directory: {run_dir}")
    return 0


def cmd_eval(args) -> int:
    import torch

    from attnseg.checkpoint import load_checkpoint
    from attnseg.data import crop_windows, read_dataset
    from attnseg.evaluation import METRICS, dice_metric, l1_metric, ssim_metric
    from attnseg.training import make_batch

    cfg, gen, _, meta = load_checkpoint(args.checkpoint)
    gcfg = gen.cfg
    samples = []
    for s in read_dataset(args.dataset):
        samples.extend(crop_windows(s, cfg.data.window, cfg.data.overlap))
    rows = []
    with torch.no_grad():
        for i in range(0, len(samples), 32):
            chunk = samples[i : i + 32]
            batch = make_batch(chunk, gcfg.n_stages, gcfg.n_classes)
            pred = gen(batch.x)[-1].prediction.argmax(dim=1)
            for s, p, t in zip(chunk, pred, batch.labels):
                rows.append(
                    {
                        "subject_id": s.subject_id,
                        "scan_index": s.scan_index,
                        "dice": dice_metric(p, t),
                        "ssim": ssim_metric(p, t, gcfg.n_classes),
                        "l1": l1_metric(p, t, gcfg.n_classes),
                    }
                )
    out = Path(args.out) if args.out else Path(args.checkpoint).with_name("eval.csv")
    with open(out, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["subject_id", "scan_index", *METRICS])
        for r in rows:
            w.writerow([r["subject_id"], r["scan_index"], *(f"{r[m]:.6f}" for m in METRICS)])
        for stat, fn in (("mean", np.mean), ("std", lambda v: np.std(v, ddof=1) if len(v) > 1 else 0.0)):
            w.writerow([stat, "", *(f"{fn([r[m] for r in rows]):.6f}" for m in METRICS)])
    summary = {m: float(np.mean([r[m] for r in rows])) for m in METRICS}
    print(f"evaluated {len(rows)} crops (checkpoint epoch {meta['epoch']}): "
          + " ".join(f"{m} {v:.4f}" for m, v in summary.items()))
    print(f"wrote {out}")
    return 0


def cmd_ablate(args) -> int:
    from attnseg.plotting import ablation_figure
    from attnseg.training import resolve_grid, run_ablation

    cfg = _experiment(args)
    custom = None
    if args.grid == "custom":
        if not args.cells:
            raise AttnSegError("--grid custom needs --cells FILE (JSON list of {kind, placement, guided})")
        custom = json.loads(Path(args.cells).read_text())
    grid = resolve_grid(args.grid, custom)
    run_dir = _run_dir(cfg)
    table = run_ablation(cfg, grid, run_dir=run_dir, jobs=args.jobs)
    ablation_figure(table, run_dir / "ablation")
    text, _ = table.render()
    sys.stdout.write(text)
    print(f"std is across {cfg.folds} folds; tables in {run_dir}")
    return 0


def cmd_plot_attention(args) -> int:
    from attnseg.checkpoint import load_checkpoint
    from attnseg.data import crop_windows, read_dataset
    from attnseg.plotting import attention_figure
    from attnseg.training import load_samples

    cfg, gen, _, meta = load_checkpoint(args.checkpoint)
    if args.dataset:
        samples = []
        for s in read_dataset(args.dataset):
            samples.extend(crop_windows(s, cfg.data.window, cfg.data.overlap))
    else:
        samples = load_samples(cfg)
    if not 0 <= args.index < len(samples):
        raise AttnSegError(f"sample index {args.index} out of range (0..{len(samples) - 1})")
    out = Path(args.out) if args.out else Path(args.checkpoint).with_name(f"attention_{args.index:03d}")
    payload = attention_figure(gen, samples[args.index], out)
    if payload["mean_mae_to_mask"] is None:
        print(f"checkpoint (epoch {meta['epoch']}) has no spatial attention maps; wrote {out}.png")
    else:
        print(f"mean |map - mask| = {payload['mean_mae_to_mask']:.4f}; wrote {out}.png and {out}.json")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="attnseg", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    fmt = argparse.RawDescriptionHelpFormatter

    s = sub.add_parser(
        "synth",
        help="write a synthetic phantom dataset",
        formatter_class=fmt,
        epilog="phantom keys set here: data.phantom.height, data.phantom.width, data.phantom.seed, "
        "data.phantom.speckle, data.phantom.vessel_count; other phantom keys use defaults",
    )
    s.add_argument("--subjects", type=int, required=True)
    s.add_argument("--scans-per-subject", type=int, required=True)
    s.add_argument("--size", type=int, nargs=2, default=(64, 64), metavar=("H", "W"))
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--speckle", type=float, default=0.25)
    s.add_argument("--vessels", type=int, nargs=2, default=(0, 2), metavar=("MIN", "MAX"))
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    def experiment_args(sp):
        sp.add_argument("config", nargs="?", help="TOML or JSON experiment config (defaults if omitted)")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
        sp.add_argument("--name", help="run name (overrides the name key)")

    t = sub.add_parser("train", help="train one fold or all folds", formatter_class=fmt, epilog=_keys_epilog())
    experiment_args(t)
    g = t.add_mutually_exclusive_group()
    g.add_argument("--fold", type=int)
    g.add_argument("--all", action="store_true")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser(
        "eval", help="score a checkpoint on a dataset", formatter_class=fmt,
        epilog="config keys consumed (from the checkpoint): data.window, data.overlap, model.*, attention.*",
    )
    e.add_argument("checkpoint")
    e.add_argument("dataset")
    e.add_argument("--out")
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("ablate", help="cross-validate an attention grid", formatter_class=fmt, epilog=_keys_epilog())
    experiment_args(a)
    a.add_argument("--grid", choices=("table1", "table2", "custom"), default="table1")
    a.add_argument("--cells", help="JSON file with the custom grid cells")
    a.add_argument("--jobs", type=int, default=1)
    a.set_defaults(func=cmd_ablate)

    pa = sub.add_parser(
        "plot-attention", help="plot attention maps of a checkpoint", formatter_class=fmt,
        epilog="config keys consumed (from the checkpoint): data.*, model.*, attention.*",
    )
    pa.add_argument("checkpoint")
    pa.add_argument("--dataset", help="dataset directory (default: regenerate the checkpoint's synthetic data)")
    pa.add_argument("--index", type=int, default=0)
    pa.add_argument("--out", help="output path prefix for .png/.json")
    pa.set_defaults(func=cmd_plot_attention)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (AttnSegError, ValueError, OSError, KeyError) as exc:
        msg = " ".join(str(exc).split())
        print(f"error: {type(exc).__name__}: {msg}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
