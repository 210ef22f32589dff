"""Segmentation scores pooled over a split, and region counting errors.

Scores follow micro-aggregation: TP/FP/FN/TN are summed over every pixel of
every image first, and the ratios are taken once at the end.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .annotations import region_centers
from .errors import ContractError

SCORE_KEYS = ("iou", "dice", "ppv", "sensitivity", "specificity")


@dataclass
class ConfusionTotals:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0

    @property
    def total(self):
        return self.tp + self.fp + self.fn + self.tn

    def __add__(self, other):
        return ConfusionTotals(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn, self.tn + other.tn)


def _binary(x, name):
    x = np.asarray(x)
    if x.dtype != bool:
        x = x != 0
    return x


def accumulate_confusion(pred, gt, totals: ConfusionTotals | None = None) -> ConfusionTotals:
    """Return ``totals`` plus the pixel counts of one ``pred``/``gt`` pair.

    The input totals are not modified.
    """
    pred, gt = _binary(pred, "pred"), _binary(gt, "gt")
    if pred.shape != gt.shape:
        raise ContractError(f"pred shape {pred.shape} != gt shape {gt.shape}")
    totals = totals or ConfusionTotals()
    tp = int(np.count_nonzero(pred & gt))
    fp = int(np.count_nonzero(pred & ~gt))
    fn = int(np.count_nonzero(~pred & gt))
    tn = pred.size - tp - fp - fn
    return totals + ConfusionTotals(tp, fp, fn, tn)


def _ratio(num, den, key, undefined):
    if den == 0:
        undefined.append(key)
        return 1.0
    return num / den


def scores(totals: ConfusionTotals) -> dict:
    """IoU, Dice, PPV, sensitivity and specificity.

    A 0/0 ratio scores 1.0 and its key is listed under ``"undefined"``.
    """
    tp, fp, fn, tn = totals.tp, totals.fp, totals.fn, totals.tn
    undefined = []
    out = {
        "iou": _ratio(tp, tp + fp + fn, "iou", undefined),
        "dice": _ratio(2 * tp, 2 * tp + fp + fn, "dice", undefined),
        "ppv": _ratio(tp, tp + fp, "ppv", undefined),
        "sensitivity": _ratio(tp, tp + fn, "sensitivity", undefined),
        "specificity": _ratio(tn, fp + tn, "specificity", undefined),
    }
    out["undefined"] = undefined
    return out


def macro_scores(per_image: list) -> dict:
    """Average of per-image scores. Not the default protocol; kept for comparison."""
    if not per_image:
        raise ContractError("macro_scores needs at least one image")
    each = [scores(t) for t in per_image]
    return {k: float(np.mean([s[k] for s in each])) for k in SCORE_KEYS}


@dataclass
class CountRecord:
    pred: list = field(default_factory=list)
    gt: list = field(default_factory=list)


def centroids_from_mask(binary, connectivity: int = 8):
    """One localization point per connected region (deepest pixel)."""
    return region_centers(_binary(binary, "binary").astype(np.uint8), connectivity)


def mae_counts(records) -> float:
    if not records:
        raise ContractError("mae_counts needs at least one record")
    return float(np.mean([abs(len(r.pred) - len(r.gt)) for r in records]))


def _cell_counts(points, n, H, W):
    counts = np.zeros((n, n), dtype=np.int64)
    for p in points:
        r, c = int(p[0]), int(p[1])
        if not (0 <= r < H and 0 <= c < W):
            raise ContractError(f"centroid ({r}, {c}) outside {H}x{W} image")
        counts[r * n // H, c * n // W] += 1
    return counts


def game(records, L: int, H: int, W: int) -> float:
    """Grid average mean absolute error over a ``2**L x 2**L`` grid.

    A centroid at ``(r, c)`` falls in cell ``(r * 2**L // H, c * 2**L // W)``.
    """
    if not records:
        raise ContractError("game needs at least one record")
    if L < 0:
        raise ContractError(f"L must be >= 0, got {L}")
    n = 2 ** L
    errs = [
        np.abs(_cell_counts(r.pred, n, H, W) - _cell_counts(r.gt, n, H, W)).sum()
        for r in records
    ]
    return float(np.mean(errs))


def metrics_report(totals: ConfusionTotals, records=None, H=None, W=None, game_levels=(0, 4)) -> dict:
    """Report dict with the fixed key layout used by the report tooling."""
    s = scores(totals)
    report = {k: s[k] for k in SCORE_KEYS}
    if records is not None:
        report["mae"] = mae_counts(records)
        report["game_L"] = {str(L): game(records, L, H, W) for L in game_levels}
    report["undefined"] = s["undefined"]
    return report
