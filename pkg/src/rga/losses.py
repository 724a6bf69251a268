"""Training objectives over probability maps and binary targets.

Each loss returns a 0-D tensor and, when a tape is supplied, records an
analytic gradient with respect to the prediction (targets are constants).
"""

from __future__ import annotations

import numpy as np

from . import ops
from .errors import ShapeError
from .tensor import Tape, Tensor, accumulate

BCE_CLAMP = 1e-7


def _validate_pair(pred: Tensor, target: Tensor, unit_range: bool = True) -> None:
    if pred.shape != target.shape:
        raise ShapeError(f"prediction {pred.shape} and target {target.shape} differ")
    t = target.data
    if not bool(((t == 0) | (t == 1)).all()):
        raise ValueError("target must be binary (only 0 and 1)")
    if unit_range:
        p = pred.data
        if float(p.min()) < 0.0 or float(p.max()) > 1.0:
            raise ValueError("prediction values must lie in [0, 1]")


def _scalar(value: float, dtype) -> Tensor:
    return Tensor(np.asarray(value, dtype=dtype))


def dice_loss(pred: Tensor, target: Tensor, eps: float = 1.0,
              tape: Tape | None = None) -> Tensor:
    """``1 - (2*sum(p*g) + eps) / (sum(p) + sum(g) + eps)`` over all pixels."""
    _validate_pair(pred, target)
    p, g = pred.data, target.data
    num = 2.0 * float((p * g).sum()) + eps
    den = float(p.sum()) + float(g.sum()) + eps
    y = _scalar(1.0 - num / den, pred.dtype)
    if tape is not None:
        def backward_fn(gy):
            accumulate(pred, (-(2.0 * g * den - num) / (den * den)) * float(gy))

        tape.record("dice_loss", y, (pred,), backward_fn)
    return y


def weighted_dice_loss(pred: Tensor, target: Tensor, w_fg: float, w_bg: float,
                       eps: float = 1.0, tape: Tape | None = None) -> Tensor:
    """Dice loss with per-pixel class weights; equals plain Dice when
    ``w_fg == w_bg == 1``."""
    if w_fg <= 0 or w_bg <= 0:
        raise ValueError(f"class weights must be positive, got w_fg={w_fg}, w_bg={w_bg}")
    _validate_pair(pred, target)
    p, g = pred.data, target.data
    w = np.where(g == 1, w_fg, w_bg).astype(p.dtype)
    num = 2.0 * float((w * p * g).sum()) + eps
    den = float((w * p).sum()) + float((w * g).sum()) + eps
    y = _scalar(1.0 - num / den, pred.dtype)
    if tape is not None:
        def backward_fn(gy):
            accumulate(pred, (-(2.0 * w * g * den - num * w) / (den * den)) * float(gy))

        tape.record("weighted_dice_loss", y, (pred,), backward_fn)
    return y


def auto_foreground_weight(target: Tensor) -> float:
    """Background/foreground pixel ratio of a batch, 1.0 when no foreground."""
    fg = float(target.data.sum())
    if fg == 0:
        return 1.0
    return (target.data.size - fg) / fg


def bce_loss(pred: Tensor, target: Tensor, tape: Tape | None = None) -> Tensor:
    """Mean binary cross-entropy with predictions clamped away from {0, 1}."""
    _validate_pair(pred, target, unit_range=False)
    p, g = pred.data, target.data
    pc = np.clip(p, BCE_CLAMP, 1.0 - BCE_CLAMP)
    m = p.size
    y = _scalar(float(-(g * np.log(pc) + (1.0 - g) * np.log1p(-pc)).mean()), pred.dtype)
    if tape is not None:
        # the clamp is constant outside its bounds, so the gradient is masked
        active = (p > BCE_CLAMP) & (p < 1.0 - BCE_CLAMP)

        def backward_fn(gy):
            grad = np.where(active, (pc - g) / (pc * (1.0 - pc)) / m, 0.0)
            accumulate(pred, grad.astype(p.dtype) * float(gy))

        tape.record("bce_loss", y, (pred,), backward_fn)
    return y


def iou_loss(pred: Tensor, target: Tensor, eps: float = 1.0,
             tape: Tape | None = None) -> Tensor:
    """``1 - (sum(p*g) + eps) / (sum(p) + sum(g) - sum(p*g) + eps)``."""
    _validate_pair(pred, target)
    p, g = pred.data, target.data
    inter = float((p * g).sum())
    num = inter + eps
    den = float(p.sum()) + float(g.sum()) - inter + eps
    y = _scalar(1.0 - num / den, pred.dtype)
    if tape is not None:
        def backward_fn(gy):
            accumulate(pred, (-(g * den - num * (1.0 - g)) / (den * den)) * float(gy))

        tape.record("iou_loss", y, (pred,), backward_fn)
    return y


def combo_loss(pred: Tensor, target: Tensor, l_dice: float = 1.0,
               l_bce: float = 1.0, eps: float = 1.0,
               tape: Tape | None = None) -> Tensor:
    """Weighted sum of Dice and BCE; equal weighting by default."""
    if l_dice < 0 or l_bce < 0:
        raise ValueError(f"loss weights must be non-negative, got {l_dice}, {l_bce}")
    d = ops.scale(dice_loss(pred, target, eps, tape), l_dice, tape)
    b = ops.scale(bce_loss(pred, target, tape), l_bce, tape)
    return ops.add(d, b, tape)
