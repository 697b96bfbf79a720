"""Dice metrics and the coarse / fine aggregates used for the biliary classes."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from .synthetic import CLASS_NAMES, HARD_CLASSES, N_CLASSES


def _as_array(v):
    return v.data if hasattr(v, "data") and not isinstance(v, np.ndarray) else np.asarray(v)


def _dice_masks(p, g):
    sp, sg = int(p.sum()), int(g.sum())
    if sp == 0 and sg == 0:
        return 1.0
    if sp == 0 or sg == 0:
        return 0.0
    return 2.0 * int(np.logical_and(p, g).sum()) / (sp + sg)


def dice(pred, gt, k):
    """Dice of class ``k``: 1.0 if absent from both, 0.0 if absent from one."""
    p, g = _as_array(pred), _as_array(gt)
    if p.shape != g.shape:
        raise ValueError(f"shape mismatch: {p.shape} vs {g.shape}")
    return _dice_masks(p == k, g == k)


def coarse_dice(pred, gt):
    p, g = _as_array(pred), _as_array(gt)
    if p.shape != g.shape:
        raise ValueError(f"shape mismatch: {p.shape} vs {g.shape}")
    return _dice_masks(p > 0, g > 0)


@dataclass
class MetricsReport:
    dice_per_class: dict
    avg_coarse: float
    avg_fine_with_hard: float
    avg_fine_without_hard: float
    hard_classes: tuple = field(default=HARD_CLASSES)

    # column order follows the published results table
    def columns(self):
        return (["Avg. Coarse", "Avg. Fine (w/o Hard)", "Avg. Fine (w/ Hard)"]
                + [CLASS_NAMES[k] + ("*" if k in self.hard_classes else "")
                   for k in sorted(self.dice_per_class)])

    def values(self):
        return ([self.avg_coarse, self.avg_fine_without_hard, self.avg_fine_with_hard]
                + [self.dice_per_class[k] for k in sorted(self.dice_per_class)])

    def to_csv(self, label=None):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        head = ["model"] if label is not None else []
        w.writerow(head + self.columns())
        w.writerow(([label] if label is not None else []) + [f"{v:.6f}" for v in self.values()])
        return buf.getvalue()

    def to_table(self, label="model"):
        return format_table([(label, self)])


def aggregate(per_class, hard_classes=HARD_CLASSES):
    classes = sorted(per_class)
    fine = float(np.mean([per_class[k] for k in classes]))
    easy = [per_class[k] for k in classes if k not in hard_classes]
    return fine, float(np.mean(easy))


def report(pred, gt, n_classes=N_CLASSES, hard_classes=HARD_CLASSES):
    per_class = {k: dice(pred, gt, k) for k in range(1, n_classes)}
    fine, easy = aggregate(per_class, hard_classes)
    return MetricsReport(per_class, coarse_dice(pred, gt), fine, easy, tuple(hard_classes))


def mean_report(reports):
    """Average per-case reports (per case first, then over cases)."""
    if not reports:
        raise ValueError("no reports to average")
    classes = sorted(reports[0].dice_per_class)
    per_class = {k: float(np.mean([r.dice_per_class[k] for r in reports])) for k in classes}
    return MetricsReport(per_class,
                         float(np.mean([r.avg_coarse for r in reports])),
                         float(np.mean([r.avg_fine_with_hard for r in reports])),
                         float(np.mean([r.avg_fine_without_hard for r in reports])),
                         reports[0].hard_classes)


def format_table(rows):
    """Human-readable table; ``rows`` is a list of ``(label, MetricsReport)``."""
    cols = ["Model"] + rows[0][1].columns()
    body = [[label] + [f"{100 * v:.2f}" for v in rep.values()] for label, rep in rows]
    widths = [max(len(r[i]) for r in [cols] + body) for i in range(len(cols))]
    line = lambda r: " | ".join(c.rjust(w) for c, w in zip(r, widths))
    sep = "-+-".join("-" * w for w in widths)
    return "\n".join([line(cols), sep] + [line(r) for r in body])
