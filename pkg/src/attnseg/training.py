"""Adversarial multi-stage training, k-fold cross-validation and the ablation grid."""

from __future__ import annotations

import copy
import csv
import hashlib
import json
import logging
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from attnseg import evaluation
from attnseg.attention import guided_attention_penalty
from attnseg.checkpoint import save_checkpoint
from attnseg.config import ExperimentConfig
from attnseg.data import (
    check_disjoint,
    crop_windows,
    derive_guidance_mask,
    generate_cohort,
    random_augmentation,
    read_dataset,
    split_kfold,
)
from attnseg.data.phantom import ScanSample
from attnseg.discriminator import build_discriminators
from attnseg.errors import ConfigurationError, TrainingDivergence
from attnseg.generator import build_generator, stage_targets
from attnseg.losses import adversarial_d_loss, total_generator_loss

log = logging.getLogger(__name__)

RUNS_ENV = "ATTNSEG_RUNS_DIR"


def runs_root() -> Path:
    return Path(os.environ.get(RUNS_ENV, "runs"))


def derive_seed(*entropy: int) -> int:
    return int(np.random.SeedSequence([int(e) for e in entropy]).generate_state(1)[0])


# ---------------------------------------------------------------- data


def load_samples(cfg: ExperimentConfig) -> list[ScanSample]:
    """Dataset from ``data.path`` or a synthetic cohort, cut into crop windows."""
    d = cfg.data
    if d.path:
        raw = read_dataset(d.path)
        if d.guided_layers != list(range(1, 8)):
            raw = [s.replace(mask=derive_guidance_mask(s.label, d.guided_layers)) for s in raw]
    else:
        raw = generate_cohort(d.n_subjects, d.scans_per_subject, d.phantom, d.guided_layers)
    samples = []
    for s in raw:
        samples.extend(crop_windows(s, d.window, d.overlap, d.min_foreground))
    return samples


@dataclass
class Batch:
    x: torch.Tensor  # [B, 1, h, w] low-resolution generator input
    conditions: list[torch.Tensor]  # per stage [B, 1, h_s, w_s]
    targets: list[torch.Tensor]  # per stage [B, K, h_s, w_s]
    mask: torch.Tensor  # [B, H, W]
    labels: torch.Tensor  # [B, H, W]


def make_batch(samples: list[ScanSample], n_stages: int, n_classes: int) -> Batch:
    images = torch.stack([s.image for s in samples])
    labels = torch.stack([s.label for s in samples])
    masks = torch.stack([s.mask for s in samples])
    conditions = [F.avg_pool2d(images, 2 ** (n_stages - s)) if s < n_stages else images for s in range(1, n_stages + 1)]
    return Batch(
        x=F.avg_pool2d(images, 2**n_stages),
        conditions=conditions,
        targets=stage_targets(labels, n_stages, n_classes),
        mask=masks,
        labels=labels,
    )


# ---------------------------------------------------------------- history


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    guide_penalty: float
    val_dice: float
    val_ssim: float
    val_l1: float
    val_guide_penalty: float
    terms: dict[str, float] = field(default_factory=dict)
    wall_clock: float = 0.0

    def comparable(self) -> dict:
        """Everything except wall-clock time."""
        d = dict(self.__dict__)
        d.pop("wall_clock")
        return d


@dataclass
class TrainingHistory:
    records: list[EpochRecord] = field(default_factory=list)
    initial_guide_penalty: float = math.nan

    def column(self, name: str) -> list[float]:
        return [getattr(r, name) for r in self.records]

    def write_csv(self, path) -> None:
        term_names = sorted({k for r in self.records for k in r.terms})
        cols = ["epoch", "train_loss", "guide_penalty", "val_dice", "val_ssim", "val_l1", "val_guide_penalty"]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(cols + term_names + ["wall_clock"])
            for r in self.records:
                w.writerow(
                    [r.epoch] + [f"{getattr(r, c):.6g}" for c in cols[1:]]
                    + [f"{r.terms.get(t, math.nan):.6g}" for t in term_names]
                    + [f"{r.wall_clock:.3f}"]
                )


@dataclass
class FoldOutcome:
    fold: int
    seed: int
    history: TrainingHistory
    best_epoch: int
    metrics: dict[str, float]
    checkpoint: Path | None
    generator_state: dict
    discriminator_states: list[dict]
    g_updates: int
    d_updates: int


# ---------------------------------------------------------------- trainer


def _param_digest(module: torch.nn.Module) -> str:
    h = hashlib.sha256()
    for p in module.parameters():
        h.update(p.detach().numpy().tobytes())
    return h.hexdigest()


class Trainer:
    """Owns one generator, its per-stage discriminators and their optimizers."""

    def __init__(self, cfg: ExperimentConfig, seed: int):
        cfg.validate()
        self.cfg = cfg
        self.seed = seed
        self.gen_cfg = cfg.generator_config()
        self.generator = build_generator(self.gen_cfg, seed=derive_seed(seed, 1))
        self.discriminators = build_discriminators(self.gen_cfg, cfg.discriminator, seed=derive_seed(seed, 2))
        betas = (cfg.beta1, cfg.beta2)
        self.opt_g = torch.optim.Adam(self.generator.parameters(), lr=cfg.lr, betas=betas)
        self.opt_d = [torch.optim.Adam(d.parameters(), lr=cfg.lr, betas=betas) for d in self.discriminators]
        self.g_updates = 0
        self.d_updates = 0
        self.guided = cfg.attention.guided
        self.adversarial = cfg.loss.adv > 0

    def discriminator_step(self, batch: Batch, fakes: list[torch.Tensor]) -> dict[tuple[int, str], float]:
        out = {}
        for s, (d, opt) in enumerate(zip(self.discriminators, self.opt_d), start=1):
            cond = batch.conditions[s - 1]
            real = d(cond, batch.targets[s - 1])
            fake = d(cond, fakes[s - 1].detach())
            loss = adversarial_d_loss(real, fake)
            if not torch.isfinite(loss):
                raise TrainingDivergence(f"discriminator loss at stage {s} is {float(loss)}")
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            self.d_updates += 1
            out[(s, "d_adv")] = float(loss.detach())
        return out

    def generator_step(self, batch: Batch, stages) -> tuple[torch.Tensor, dict]:
        adv_logits = None
        if self.adversarial:
            adv_logits = [
                d(batch.conditions[i], stages[i].prediction) for i, d in enumerate(self.discriminators)
            ]
        total, breakdown = total_generator_loss(
            stages, batch.targets, batch.mask, self.cfg.loss, adv_logits, guided=self.guided
        )
        return total, breakdown

    def train_step(self, batch: Batch) -> dict[tuple[int, str], float]:
        check = self.cfg.debug_checks
        self.generator.train()
        stages = self.generator(batch.x)
        breakdown: dict = {}
        if self.adversarial:
            g_before = _param_digest(self.generator) if check else None
            breakdown.update(self.discriminator_step(batch, [o.prediction for o in stages]))
            if check and _param_digest(self.generator) != g_before:
                raise AssertionError("discriminator update changed generator parameters")
        d_before = [_param_digest(d) for d in self.discriminators] if check else None
        total, g_terms = self.generator_step(batch, stages)
        breakdown.update(g_terms)
        if not torch.isfinite(total):
            raise TrainingDivergence(f"non-finite generator loss; terms: {g_terms}")
        self.opt_g.zero_grad(set_to_none=True)
        total.backward()
        self.opt_g.step()
        self.g_updates += 1
        if check and [_param_digest(d) for d in self.discriminators] != d_before:
            raise AssertionError("generator update changed discriminator parameters")
        return breakdown

    @torch.no_grad()
    def evaluate(self, samples: list[ScanSample], batch_size: int = 32) -> dict[str, float]:
        """Validation metrics on final-stage argmax labels, plus the guidance gap."""
        preds, truths, gaps = [], [], []
        for i in range(0, len(samples), batch_size):
            chunk = samples[i : i + batch_size]
            batch = make_batch(chunk, self.gen_cfg.n_stages, self.gen_cfg.n_classes)
            stages = self.generator(batch.x)
            preds.extend(stages[-1].prediction.argmax(dim=1))
            truths.extend(batch.labels)
            maps = stages[-1].attention_maps
            if maps:
                gaps.append(float(guided_attention_penalty(maps, batch.mask)) * len(chunk))
        metrics = evaluation.evaluate_labels(preds, truths, self.gen_cfg.n_classes)
        metrics["guide_penalty"] = sum(gaps) / len(samples) if gaps else math.nan
        return metrics


def _dump_divergence(run_dir: Path | None, batch: Batch, message: str) -> None:
    if run_dir is None:
        return
    run_dir.mkdir(parents=True, exist_ok=True)
    torch.save({"x": batch.x, "labels": batch.labels, "mask": batch.mask}, run_dir / "divergence_batch.pt")
    (run_dir / "divergence.txt").write_text(message + "\n")


def _epoch_order(seed: int, epoch: int, n: int) -> np.ndarray:
    return np.random.default_rng(derive_seed(seed, 3, epoch)).permutation(n)


def train_one_fold(
    cfg: ExperimentConfig,
    train_samples: list[ScanSample],
    val_samples: list[ScanSample],
    seed: int | None = None,
    run_dir=None,
    fold_index: int = 0,
) -> FoldOutcome:
    """Train on one fold and keep the best-validation-Dice weights.

    Per iteration every stage discriminator takes one step on (real one-hot,
    detached prediction) pairs, then the generator takes one step on the
    combined objective. Discriminator steps are skipped when ``loss.adv`` is 0.
    """
    seed = cfg.seed if seed is None else seed
    run_dir = Path(run_dir) if run_dir is not None else None
    trainer = Trainer(cfg, seed)
    n_stages, n_classes = trainer.gen_cfg.n_stages, trainer.gen_cfg.n_classes
    history = TrainingHistory()
    loss_log: list[tuple] = []

    initial = trainer.evaluate(val_samples)
    history.initial_guide_penalty = initial["guide_penalty"]
    initial_state = copy.deepcopy(trainer.generator.state_dict()), [copy.deepcopy(d.state_dict()) for d in trainer.discriminators]

    best = (-math.inf, 0, None, None, None)
    start = time.perf_counter()
    for epoch in range(1, cfg.epochs + 1):
        order = _epoch_order(seed, epoch, len(train_samples))
        sums: dict[str, float] = {}
        n_iter = 0
        for it, lo in enumerate(range(0, len(order), cfg.batch_size)):
            idx = order[lo : lo + cfg.batch_size]
            chunk = [train_samples[i] for i in idx]
            if cfg.data.augment:
                chunk = [
                    random_augmentation(s, derive_seed(seed, 4, epoch, int(i)), max_angle=cfg.data.max_angle)
                    for s, i in zip(chunk, idx)
                ]
            batch = make_batch(chunk, n_stages, n_classes)
            try:
                terms = trainer.train_step(batch)
            except TrainingDivergence as exc:
                _dump_divergence(run_dir, batch, str(exc))
                raise
            n_iter += 1
            for (stage, term), value in sorted(terms.items()):
                loss_log.append((epoch, it, stage, term, value))
                key = term if stage == 0 else f"{term}_s{stage}"
                sums[key] = sums.get(key, 0.0) + value
        means = {k: v / n_iter for k, v in sums.items()}
        val = trainer.evaluate(val_samples)
        rec = EpochRecord(
            epoch=epoch,
            train_loss=means.get("total", math.nan),
            guide_penalty=means.get("guide", math.nan),
            val_dice=val["dice"],
            val_ssim=val["ssim"],
            val_l1=val["l1"],
            val_guide_penalty=val["guide_penalty"],
            terms=means,
            wall_clock=time.perf_counter() - start,
        )
        history.records.append(rec)
        log.info("epoch %d loss %.4f val dice %.4f", epoch, rec.train_loss, rec.val_dice)
        if rec.val_dice > best[0]:
            best = (
                rec.val_dice,
                epoch,
                {"dice": val["dice"], "ssim": val["ssim"], "l1": val["l1"]},
                copy.deepcopy(trainer.generator.state_dict()),
                [copy.deepcopy(d.state_dict()) for d in trainer.discriminators],
            )

    _, best_epoch, metrics, g_state, d_states = best
    ckpt = None
    if run_dir is not None:
        run_dir.mkdir(parents=True, exist_ok=True)
        gen, discs = trainer.generator, trainer.discriminators
        # Write the initial weights, then the best weights, through the live modules.
        gen.load_state_dict(initial_state[0])
        for d, s in zip(discs, initial_state[1]):
            d.load_state_dict(s)
        save_checkpoint(run_dir / "checkpoint_epoch0.pt", cfg, gen, discs, 0, seed, fold=fold_index)
        gen.load_state_dict(g_state)
        for d, s in zip(discs, d_states):
            d.load_state_dict(s)
        ckpt = save_checkpoint(
            run_dir / "checkpoint.pt", cfg, gen, discs, best_epoch, seed, fold=fold_index,
            val_dice=round(metrics["dice"], 6),
        )
        history.write_csv(run_dir / "history.csv")
        with open(run_dir / "losses.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["epoch", "iter", "stage", "term", "value"])
            for e, it, stage, term, value in loss_log:
                w.writerow([e, it, stage if stage else "all", term, f"{value:.6g}"])
        (run_dir / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")

    return FoldOutcome(
        fold=fold_index,
        seed=seed,
        history=history,
        best_epoch=best_epoch,
        metrics=metrics,
        checkpoint=ckpt,
        generator_state=g_state,
        discriminator_states=d_states,
        g_updates=trainer.g_updates,
        d_updates=trainer.d_updates,
    )


# ---------------------------------------------------------------- cross-validation


@dataclass
class FoldResults:
    outcomes: list[FoldOutcome]
    report: evaluation.MetricReport

    def rows(self) -> list[dict]:
        return [{"fold": o.fold, "seed": o.seed, "best_epoch": o.best_epoch, **o.metrics} for o in self.outcomes]


def fold_seeds(seed: int, k: int) -> list[int]:
    return [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(seed).spawn(k)]


def run_5cv(cfg: ExperimentConfig, samples: list[ScanSample] | None = None, run_dir=None, folds=None) -> FoldResults:
    """Train every fold of a subject-grouped k-fold split (k = ``cfg.folds``)."""
    samples = load_samples(cfg) if samples is None else samples
    subjects = sorted({s.subject_id for s in samples})
    split = split_kfold(subjects, cfg.folds, cfg.seed)
    seeds = fold_seeds(cfg.seed, cfg.folds)
    run_dir = Path(run_dir) if run_dir is not None else None
    outcomes = []
    for i, fold in enumerate(split):
        if folds is not None and i not in folds:
            continue
        check_disjoint(fold)
        train_ids, val_ids = set(fold.train), set(fold.validation)
        train = [s for s in samples if s.subject_id in train_ids]
        val = [s for s in samples if s.subject_id in val_ids]
        fold_dir = run_dir / f"fold{i}" if run_dir is not None else None
        outcomes.append(train_one_fold(cfg, train, val, seeds[i], fold_dir, i))
    report = evaluation.MetricReport.from_rows([o.metrics for o in outcomes])
    results = FoldResults(outcomes, report)
    if run_dir is not None:
        a = cfg.attention
        rows = evaluation.fold_rows(config_id(a.kind, a.placement, a.guided), a.kind, a.placement, a.guided, report)
        evaluation.write_fold_csv(run_dir / "folds.csv", rows)
    return results


# ---------------------------------------------------------------- ablation


def config_id(kind: str, placement: str | None, guided: bool) -> str:
    if kind == "none":
        return "none"
    return f"{kind}-{placement}" + ("-guided" if guided else "")


TABLE1_GRID = [
    (kind, placement, False)
    for kind in ("channel", "spatial", "parallel", "serial")
    for placement in ("last_stage", "multi_stage")
] + [("none", None, False)]

TABLE2_GRID = [("none", None, False), ("serial", "multi_stage", False), ("serial", "multi_stage", True)]


def resolve_grid(name: str, custom=None) -> list[tuple[str, str | None, bool]]:
    if name == "table1":
        return list(TABLE1_GRID)
    if name == "table2":
        return list(TABLE2_GRID)
    if name == "custom":
        if not custom:
            raise ConfigurationError("custom grid needs at least one cell")
        cells = []
        for c in custom:
            kind = c["kind"]
            cells.append(evaluation.cell_key(kind, c.get("placement", "multi_stage"), bool(c.get("guided", False))))
        return list(dict.fromkeys(cells))
    raise ConfigurationError(f"unknown grid {name!r}; expected table1, table2 or custom")


def cell_config(base: ExperimentConfig, cell) -> ExperimentConfig:
    kind, placement, guided = cell
    return base.replace(
        **{
            "attention.kind": kind,
            "attention.placement": placement or base.attention.placement,
            "attention.guided": guided,
        }
    )


@dataclass
class AblationTable:
    reports: dict[tuple, evaluation.MetricReport]
    fold_rows: list[dict]

    def render(self) -> tuple[str, str]:
        return evaluation.render_table(self.reports)


def _run_cell(args):
    base_dict, cell, run_dir = args
    from attnseg.config import from_dict

    cfg = cell_config(from_dict(base_dict), cell)
    torch.set_num_threads(1)
    return cell, run_5cv(cfg, run_dir=run_dir).report


def run_ablation(base_cfg: ExperimentConfig, grid, run_dir=None, jobs: int = 1) -> AblationTable:
    """Cross-validate every grid cell; the no-attention cell is trained once."""
    cells = list(dict.fromkeys(evaluation.cell_key(*c) for c in grid))
    run_dir = Path(run_dir) if run_dir is not None else None
    tasks = [
        (base_cfg.to_dict(), cell, run_dir / config_id(*cell) if run_dir is not None else None)
        for cell in cells
    ]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_run_cell, tasks))
    else:
        results = [_run_cell(t) for t in tasks]
    reports = dict(results)
    rows = []
    for cell in cells:
        kind, placement, guided = cell
        rows += evaluation.fold_rows(config_id(*cell), kind, placement or "", guided, reports[cell])
    table = AblationTable(reports, rows)
    if run_dir is not None:
        run_dir.mkdir(parents=True, exist_ok=True)
        evaluation.write_fold_csv(run_dir / "ablation_folds.csv", rows)
        text, csv_text = table.render()
        (run_dir / "ablation_table.txt").write_text(text)
        (run_dir / "ablation_table.csv").write_text(csv_text)
    return table
