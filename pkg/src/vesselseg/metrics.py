"""Thresholding, confusion counts, and IoU / Dice evaluation.

Empty-vs-empty comparisons score 1.0 by convention (perfect agreement), so
epoch means cannot be poisoned by NaN on tiles without foreground.
"""

from __future__ import annotations

import io
from dataclasses import dataclass

import numpy as np

from .errors import ShapeError
from .raster import Mask
from .tensor import Tensor, no_grad, sigmoid


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    fn: int
    tn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(
            self.tp + other.tp, self.fp + other.fp,
            self.fn + other.fn, self.tn + other.tn,
        )


@dataclass(frozen=True)
class MetricsReport:
    per_image: tuple[tuple[str, float, float], ...]  # (tile_id, iou, dice)
    mean_iou: float
    mean_dice: float
    threshold: float

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write("tile_id,iou,dice\n")
        for tile_id, iou_v, dice_v in self.per_image:
            buf.write(f"{tile_id},{iou_v!r},{dice_v!r}\n")
        buf.write(f"__mean__,{self.mean_iou!r},{self.mean_dice!r}\n")
        return buf.getvalue()


def threshold(probs: np.ndarray, t: float) -> Mask:
    """Binarize probabilities: pixel = 1 iff prob > t (strictly)."""
    if not (0.0 < t < 1.0):
        raise ValueError(f"threshold must be in (0, 1), got {t}")
    p = np.asarray(probs)
    return (p > t).astype(np.uint8)


def confusion(pred: Mask, gt: Mask) -> ConfusionCounts:
    if pred.shape != gt.shape:
        raise ShapeError(f"mask shapes differ: {pred.shape} vs {gt.shape}")
    p = pred.astype(bool)
    g = gt.astype(bool)
    tp = int(np.count_nonzero(p & g))
    fp = int(np.count_nonzero(p & ~g))
    fn = int(np.count_nonzero(~p & g))
    return ConfusionCounts(tp, fp, fn, p.size - tp - fp - fn)


def iou(c: ConfusionCounts) -> float:
    denom = c.tp + c.fp + c.fn
    return 1.0 if denom == 0 else c.tp / denom


def dice(c: ConfusionCounts) -> float:
    denom = 2 * c.tp + c.fp + c.fn
    return 1.0 if denom == 0 else 2 * c.tp / denom


def evaluate_set(model, data, t: float = 0.5, per_image: bool = True) -> MetricsReport:
    """Score a model over (tile_id, image, gt_mask) triples.

    Per-image aggregation (the default) averages each tile's IoU/Dice;
    the alternative pools confusion counts over all pixels first.
    """
    if not data:
        raise ValueError("evaluate_set needs at least one sample")
    rows = []
    pooled = ConfusionCounts(0, 0, 0, 0)
    with no_grad():
        for tile_id, img, gt in data:
            x = Tensor(np.asarray(img)[None].astype(model.dtype, copy=False))
            probs = sigmoid(model.forward(x)).data[0, 0]
            counts = confusion(threshold(probs, t), gt)
            pooled = pooled + counts
            rows.append((tile_id, iou(counts), dice(counts)))
    if per_image:
        mean_iou = sum(r[1] for r in rows) / len(rows)
        mean_dice = sum(r[2] for r in rows) / len(rows)
    else:
        mean_iou, mean_dice = iou(pooled), dice(pooled)
    return MetricsReport(tuple(rows), mean_iou, mean_dice, t)
