"""Segmentation metrics, fold statistics and the ablation table."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np
import torch
from scipy import stats

from attnseg.errors import DegenerateInputError
from attnseg.losses import l1_loss, ssim

LAYER_CLASSES = tuple(range(1, 8))
METRICS = ("dice", "ssim", "l1")


def dice_metric(pred_label: torch.Tensor, true_label: torch.Tensor, classes=LAYER_CLASSES) -> float:
    """Macro Dice over the listed classes that occur in the ground truth.

    When none of them occur, the score is 1.0 if the prediction also has none
    and 0.0 otherwise.
    """
    scores = []
    pred_has = False
    for c in classes:
        t = true_label == c
        p = pred_label == c
        pred_has |= bool(p.any())
        n_t = int(t.sum())
        if n_t == 0:
            continue
        scores.append(2.0 * int((p & t).sum()) / (int(p.sum()) + n_t))
    if not scores:
        return 0.0 if pred_has else 1.0
    return float(np.mean(scores))


def label_image(label: torch.Tensor, n_classes: int = 8) -> torch.Tensor:
    return label.to(torch.float64) / n_classes


def ssim_metric(pred_label: torch.Tensor, true_label: torch.Tensor, n_classes: int = 8) -> float:
    return float(ssim(label_image(pred_label, n_classes), label_image(true_label, n_classes)))


def l1_metric(pred_label: torch.Tensor, true_label: torch.Tensor, n_classes: int = 8) -> float:
    return float(l1_loss(label_image(pred_label, n_classes), label_image(true_label, n_classes)))


def evaluate_labels(pred_labels, true_labels, n_classes: int = 8) -> dict[str, float]:
    """Mean per-image Dice/SSIM/L-1 over paired label maps."""
    rows = [
        (dice_metric(p, t), ssim_metric(p, t, n_classes), l1_metric(p, t, n_classes))
        for p, t in zip(pred_labels, true_labels)
    ]
    arr = np.asarray(rows, dtype=np.float64)
    return dict(zip(METRICS, arr.mean(axis=0).tolist()))


def relative_error_reduction(baseline: float, improved: float) -> float:
    """Percent reduction of ``1 - metric`` going from ``baseline`` to ``improved``."""
    if baseline >= 1:
        raise ValueError(f"relative error reduction undefined for baseline {baseline} >= 1")
    return 100.0 * ((1 - baseline) - (1 - improved)) / (1 - baseline)


def paired_t_test(a, b) -> tuple[float, float]:
    """Paired t statistic on ``a - b`` and its two-sided p-value (k-1 dof)."""
    d = np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)
    k = d.size
    if k < 2:
        raise DegenerateInputError("paired t-test needs at least two pairs")
    sd = d.std(ddof=1)
    if not sd > 1e-12 * max(1.0, float(np.abs(d).max())):
        raise DegenerateInputError("degenerate: identical samples")
    t = d.mean() / (sd / math.sqrt(k))
    p = 2.0 * stats.t.sf(abs(t), k - 1)
    return float(t), float(p)


@dataclass
class MetricReport:
    """Per-fold metric vectors with their mean and sample standard deviation."""

    folds: dict[str, list[float]] = field(default_factory=lambda: {m: [] for m in METRICS})

    @classmethod
    def from_rows(cls, rows) -> "MetricReport":
        rep = cls()
        for row in rows:
            for m in METRICS:
                rep.folds[m].append(float(row[m]))
        return rep

    @property
    def k(self) -> int:
        return len(self.folds["dice"])

    def mean(self, metric: str) -> float:
        return float(np.mean(self.folds[metric]))

    def std(self, metric: str) -> float:
        vals = self.folds[metric]
        return float(np.std(vals, ddof=1)) if len(vals) > 1 else 0.0

    def cell(self, metric: str) -> str:
        return f"{self.mean(metric):.4f}±{self.std(metric):.4f}"


# Table rows: (label, attention kind, guided). Columns per metric follow PLACEMENT_COLUMNS.
TABLE_ROWS = (
    ("Channel", "channel", False),
    ("Spatial", "spatial", False),
    ("Ch&Sp Parallel", "parallel", False),
    ("Ch&Sp Sequential", "serial", False),
    ("Spatial (guided)", "spatial", True),
    ("Ch&Sp Parallel (guided)", "parallel", True),
    ("Ch&Sp Sequential (guided)", "serial", True),
)
PLACEMENT_COLUMNS = (("Last Stage", "last_stage"), ("Multi-Stage", "multi_stage"), ("No Attention", None))
METRIC_TITLES = {"dice": "Dice", "ssim": "SSIM", "l1": "L-1"}


def cell_key(kind: str, placement: str | None, guided: bool) -> tuple[str, str | None, bool]:
    if kind == "none":
        return ("none", None, False)
    return (kind, placement, guided)


def table_header() -> list[str]:
    header = ["Model"]
    for m in METRICS:
        header += [f"{METRIC_TITLES[m]} / {title}" for title, _ in PLACEMENT_COLUMNS]
    return header


def render_table(reports: dict) -> tuple[str, str]:
    """Aligned text and CSV renderings of the ablation table.

    ``reports`` maps ``(kind, placement, guided)`` keys (see :func:`cell_key`) to
    :class:`MetricReport`. The no-attention report fills the "No Attention"
    column of every row that has at least one attention cell.
    """
    keyed = {cell_key(*k): v for k, v in reports.items()}
    baseline = keyed.get(("none", None, False))
    header = table_header()
    rows = []
    for label, kind, guided in TABLE_ROWS:
        cells = {p: keyed.get((kind, p, guided)) for _, p in PLACEMENT_COLUMNS if p}
        if not any(cells.values()):
            continue
        row = [label]
        for m in METRICS:
            for _, p in PLACEMENT_COLUMNS:
                rep = baseline if p is None else cells[p]
                row.append(rep.cell(m) if rep is not None else "-")
        rows.append(row)
    if baseline is not None and not rows:
        rows.append(["No Attention"] + [baseline.cell(m) if p is None else "-" for m in METRICS for _, p in PLACEMENT_COLUMNS])

    widths = [max(len(r[i]) for r in [header, *rows]) for i in range(len(header))]
    lines = ["  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip() for r in [header, *rows]]
    lines.insert(1, "  ".join("-" * w for w in widths))
    text = "\n".join(lines) + "\n"

    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    return text, buf.getvalue()


FOLD_CSV_COLUMNS = ("config_id", "attention_kind", "placement", "guided", "fold", "dice", "ssim", "l1")


def fold_rows(config_id: str, kind: str, placement: str, guided: bool, report: MetricReport) -> list[dict]:
    """Per-fold rows plus ``mean`` and ``std`` aggregate rows (std across folds)."""
    base = dict(config_id=config_id, attention_kind=kind, placement=placement, guided=int(bool(guided)))
    rows = []
    for i in range(report.k):
        rows.append({**base, "fold": str(i), **{m: f"{report.folds[m][i]:.6f}" for m in METRICS}})
    rows.append({**base, "fold": "mean", **{m: f"{report.mean(m):.6f}" for m in METRICS}})
    rows.append({**base, "fold": "std", **{m: f"{report.std(m):.6f}" for m in METRICS}})
    return rows


def write_fold_csv(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=FOLD_CSV_COLUMNS, lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)
