"""Pseudo-label quality scores shared by the trainer and the CLI reports."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from .probmap import FG, IGNORE, PixelPartition, _values


@dataclass(frozen=True)
class PseudoQuality:
    selected_accuracy: float
    selected_coverage: float
    pseudo_precision: float
    pseudo_recall: float
    empty_selection: bool = False

    def __post_init__(self):
        for name in ("selected_accuracy", "selected_coverage",
                     "pseudo_precision", "pseudo_recall"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name}={v} outside [0,1]")


def pseudo_quality(part: PixelPartition, gt) -> PseudoQuality:
    """Compare a partition's confident assignments against ground truth.

    Empty selections report accuracy/precision/recall 1 with the emptiness
    flag set, so dashboards stay NaN-free without hiding the degenerate case.
    """
    g = _values(gt)
    if g.shape != part.labels.shape:
        raise ValueError(f"gt shape {g.shape} != partition shape {part.labels.shape}")
    gt_fg = g > 0.5
    sel = part.labels != IGNORE
    coverage = float(sel.mean())
    if not sel.any():
        return PseudoQuality(1.0, 0.0, 1.0, 1.0, empty_selection=True)
    assigned_fg = part.labels == FG
    correct = (assigned_fg == gt_fg) & sel
    accuracy = float(correct.sum() / sel.sum())
    tp = float((assigned_fg & gt_fg).sum())
    precision = tp / assigned_fg.sum() if assigned_fg.any() else 1.0
    recall = tp / gt_fg.sum() if gt_fg.any() else 1.0
    return PseudoQuality(accuracy, coverage, float(precision), float(recall))


def aggregate(rows) -> dict:
    """Column-wise mean/min/max over a list of records (dataclasses or dicts)."""
    if not rows:
        raise ValueError("aggregate needs at least one row")
    dicts = []
    for r in rows:
        if dataclasses.is_dataclass(r):
            r = dataclasses.asdict(r)
        dicts.append(dict(r))
    cols = sorted({k for d in dicts for k in d if isinstance(d[k], (int, float, bool))})
    out = {}
    for c in cols:
        vals = np.array([float(d[c]) for d in dicts if c in d])
        out[c] = {"mean": float(vals.mean()), "min": float(vals.min()),
                  "max": float(vals.max())}
    return out
