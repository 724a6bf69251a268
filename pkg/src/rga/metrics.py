"""Pixel-level evaluation: confusion counts, derived metrics, reports,
and the color-coded analytic mask."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ShapeError
from .tensor import Tensor

CSV_COLUMNS = ("image", "se", "sp", "acc", "precision", "f1", "jaccard")

# analytic mask colors: TP green, FN red, FP blue, TN black
_COLOR_TP = (0, 255, 0)
_COLOR_FN = (255, 0, 0)
_COLOR_FP = (0, 0, 255)


def _as_array(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x)


def binarize(pred, threshold: float = 0.5) -> np.ndarray:
    """Threshold to {0, 1}; ties (==threshold) count as foreground."""
    return (_as_array(pred) >= threshold).astype(np.uint8)


@dataclass(frozen=True)
class ConfusionCounts:
    """TP/FP/TN/FN pixel tallies."""

    tp: int
    fp: int
    tn: int
    fn: int

    def __post_init__(self):
        for name in ("tp", "fp", "tn", "fn"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(
            self.tp + other.tp, self.fp + other.fp,
            self.tn + other.tn, self.fn + other.fn,
        )


def confusion(pred_bin, target_bin) -> ConfusionCounts:
    """Tally per-pixel agreement of two binary masks."""
    p = _as_array(pred_bin)
    g = _as_array(target_bin)
    if p.shape != g.shape:
        raise ShapeError(f"prediction {p.shape} and target {g.shape} differ")
    for name, a in (("prediction", p), ("target", g)):
        if not bool(((a == 0) | (a == 1)).all()):
            raise ValueError(f"{name} must be binary")
    p = p.astype(bool)
    g = g.astype(bool)
    tp = int(np.count_nonzero(p & g))
    fp = int(np.count_nonzero(p & ~g))
    fn = int(np.count_nonzero(~p & g))
    tn = p.size - tp - fp - fn
    return ConfusionCounts(tp=tp, fp=fp, tn=tn, fn=fn)


@dataclass(frozen=True)
class MetricEntry:
    """The six reported metrics; ``degenerate`` names any metric whose
    denominator was zero (its value is reported as 0 so averages stay finite)."""

    se: float
    sp: float
    acc: float
    precision: float
    f1: float
    jaccard: float
    degenerate: tuple[str, ...] = ()

    def values(self) -> tuple[float, ...]:
        return (self.se, self.sp, self.acc, self.precision, self.f1, self.jaccard)


def compute_metrics(counts: ConfusionCounts) -> MetricEntry:
    """Sensitivity, specificity, accuracy, precision, F1 and Jaccard."""
    if counts.total == 0:
        raise ValueError("cannot compute metrics over zero pixels")
    degenerate = []

    def ratio(name, num, den):
        if den == 0:
            degenerate.append(name)
            return 0.0
        return num / den

    se = ratio("se", counts.tp, counts.tp + counts.fn)
    sp = ratio("sp", counts.tn, counts.tn + counts.fp)
    acc = (counts.tp + counts.tn) / counts.total
    precision = ratio("precision", counts.tp, counts.tp + counts.fp)
    f1 = ratio("f1", 2.0 * precision * se, precision + se)
    jaccard = ratio("jaccard", counts.tp, counts.tp + counts.fp + counts.fn)
    return MetricEntry(se, sp, acc, precision, f1, jaccard, tuple(degenerate))


class MetricReport:
    """Per-image metric entries plus their aggregate.

    The default aggregate is the arithmetic mean of per-image metrics;
    ``pooled=True`` instead derives the metrics from summed pixel counts.
    """

    def __init__(self):
        self.rows: list[tuple[str, ConfusionCounts, MetricEntry]] = []

    def add(self, name: str, counts: ConfusionCounts) -> MetricEntry:
        entry = compute_metrics(counts)
        self.rows.append((name, counts, entry))
        return entry

    def __len__(self) -> int:
        return len(self.rows)

    def aggregate(self, pooled: bool = False) -> MetricEntry:
        if not self.rows:
            raise ValueError("empty report")
        if pooled:
            total = ConfusionCounts(0, 0, 0, 0)
            for _, counts, _ in self.rows:
                total = total + counts
            return compute_metrics(total)
        cols = np.array([entry.values() for _, _, entry in self.rows], dtype=np.float64)
        means = cols.mean(axis=0)
        return MetricEntry(*(float(v) for v in means))

    def to_csv(self, pooled: bool = False) -> str:
        lines = [",".join(CSV_COLUMNS)]
        for name, _, entry in self.rows:
            lines.append(name + "," + ",".join(f"{v:.6f}" for v in entry.values()))
        agg = self.aggregate(pooled=pooled)
        lines.append("mean," + ",".join(f"{v:.6f}" for v in agg.values()))
        return "\n".join(lines) + "\n"

    def to_kv(self, pooled: bool = False) -> str:
        agg = self.aggregate(pooled=pooled)
        lines = [f"images={len(self.rows)}"]
        for key, value in zip(CSV_COLUMNS[1:], agg.values()):
            lines.append(f"{key}={value:.6f}")
        return "\n".join(lines) + "\n"


def analytic_mask(pred_bin, target_bin) -> np.ndarray:
    """RGB overlay: TP green, FN red, FP blue, TN black.

    Inputs are 2-D binary masks; output is ``(H, W, 3)`` uint8.
    """
    p = _as_array(pred_bin)
    g = _as_array(target_bin)
    if p.shape != g.shape:
        raise ShapeError(f"prediction {p.shape} and target {g.shape} differ")
    if p.ndim != 2:
        raise ShapeError(f"analytic mask expects 2-D masks, got {p.shape}")
    p = p.astype(bool)
    g = g.astype(bool)
    out = np.zeros(p.shape + (3,), dtype=np.uint8)
    out[p & g] = _COLOR_TP
    out[~p & g] = _COLOR_FN
    out[p & ~g] = _COLOR_FP
    return out
