"""Adam, plateau learning-rate scheduling, and the training loop."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import data as data_mod
from . import losses, metrics
from .errors import DataError, NumericError, OptimStateError
from .tensor import ParamRegistry, Tape, Tensor, backward

LOG_COLUMNS = ("epoch", "train_loss", "val_loss", "lr", "se", "sp", "acc", "f1", "jaccard")


@dataclass
class AdamState:
    """Step counter and hyperparameters; moment tensors live on each Param."""

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    grads_ready: bool = field(default=False, repr=False)

    def mark_grads_ready(self) -> None:
        """Signal that a backward pass has populated the gradients."""
        self.grads_ready = True


def adam_step(registry: ParamRegistry, state: AdamState) -> None:
    """One bias-corrected Adam update; gradients are zeroed afterwards."""
    if not state.grads_ready:
        raise OptimStateError("adam_step called before any backward pass")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for p in registry:
        g = p.value.grad
        p.adam_m.data *= b1
        p.adam_m.data += (1.0 - b1) * g
        p.adam_v.data *= b2
        p.adam_v.data += (1.0 - b2) * g * g
        update = (p.adam_m.data / c1) / (np.sqrt(p.adam_v.data / c2) + state.eps)
        p.value.data -= state.lr * update
        p.zero_grad()
    state.grads_ready = False


@dataclass
class PlateauState:
    """Reduce-on-plateau bookkeeping (min mode, relative threshold)."""

    patience: int = 5
    factor: float = 0.1
    min_lr: float = 1e-6
    threshold: float = 1e-4
    best: float = math.inf
    wait: int = 0


def plateau_step(state: PlateauState, monitored: float, lr: float) -> float:
    """Update the plateau counter and return the (possibly reduced) rate.

    An improvement is ``monitored < best * (1 - threshold)``; once the counter
    exceeds the patience the rate is multiplied by ``factor`` (floored at
    ``min_lr``) and the counter resets. The rate never increases.
    """
    if not math.isfinite(monitored):
        raise NumericError(f"plateau monitor received a non-finite value: {monitored}")
    if monitored < state.best * (1.0 - state.threshold):
        state.best = monitored
        state.wait = 0
    else:
        state.wait += 1
        if state.wait > state.patience:
            lr = max(lr * state.factor, state.min_lr)
            state.wait = 0
    return lr


# ---------------------------------------------------------------------------
# training loop

@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 70
    lr: float = 1e-3
    batch_size: int = 4
    loss: str = "dice+bce"
    patience: int = 5
    factor: float = 0.1
    min_lr: float = 1e-6
    threshold: float = 1e-4
    seed: int = 0
    val_fraction: float = 0.1
    max_steps_per_epoch: int = 0  # 0 = no cap


def make_loss_fn(kind: str):
    """Resolve a loss selector to ``fn(pred, target, tape) -> Tensor``."""
    table = {
        "dice": lambda p, g, t: losses.dice_loss(p, g, tape=t),
        "wdice": lambda p, g, t: losses.weighted_dice_loss(
            p, g, w_fg=losses.auto_foreground_weight(g), w_bg=1.0, tape=t
        ),
        "bce": lambda p, g, t: losses.bce_loss(p, g, tape=t),
        "iou": lambda p, g, t: losses.iou_loss(p, g, tape=t),
        "dice+bce": lambda p, g, t: losses.combo_loss(p, g, tape=t),
    }
    if kind not in table:
        raise ValueError(f"unknown loss kind {kind!r}; expected one of {sorted(table)}")
    return table[kind]


@dataclass
class TrainResult:
    rows: list[dict]
    best_val: float
    best_epoch: int


def evaluate(net, manifest, split: str, batch_size: int, loss_fn,
             cache=None) -> tuple[float, metrics.MetricReport]:
    """Eval-mode loss and per-image metrics over one split."""
    report = metrics.MetricReport()
    total_loss = 0.0
    total_n = 0
    idx = 0
    for images, masks in data_mod.batch_iter(manifest, batch_size, 0, 0,
                                             split=split, cache=cache):
        acts = net.forward(images, "eval")
        loss = loss_fn(acts.Mask, masks, None)
        n = images.shape[0]
        total_loss += float(loss.data) * n
        total_n += n
        pred_bin = metrics.binarize(acts.Mask)
        for i in range(n):
            counts = metrics.confusion(pred_bin[i, 0], masks.data[i, 0])
            report.add(f"{split}_{idx:04d}", counts)
            idx += 1
    if total_n == 0:
        raise DataError(f"no records in split {split!r}")
    return total_loss / total_n, report


def _deep_supervision_terms(acts, masks, loss_fn, tape):
    """Auxiliary losses on the intermediate prediction maps."""
    from . import ops

    terms = []
    for pred in (acts.Pred1, acts.Pred2):
        if pred is None:
            continue
        h, w = pred.shape[2], pred.shape[3]
        target = Tensor(data_mod.nearest_resize(masks.data, h, w))
        terms.append(ops.scale(loss_fn(ops.sigmoid(pred, tape), target, tape), 0.5, tape))
    return terms


def train_loop(net, manifest, cfg: TrainConfig, out_dir=None,
               verbose: bool = False) -> TrainResult:
    """Seeded epochs of forward/loss/backward/Adam with plateau scheduling.

    Per epoch: shuffle, batch, train-mode steps, then validation loss +
    metrics, plateau update, a log row, and best/last checkpointing when
    ``out_dir`` is given. Aborts with diagnostics on a non-finite loss.
    """
    from . import ops
    from .checkpoint import save_checkpoint

    if not manifest.split("train"):
        raise DataError("training manifest has no train records")
    manifest = data_mod.split_validation(manifest, cfg.val_fraction, cfg.seed)
    monitored_split = "val" if manifest.split("val") else "train"

    loss_fn = make_loss_fn(cfg.loss)
    adam = AdamState(lr=cfg.lr)
    sched = PlateauState(
        patience=cfg.patience, factor=cfg.factor,
        min_lr=cfg.min_lr, threshold=cfg.threshold,
    )
    cache = data_mod.PairCache(manifest)
    out_dir = Path(out_dir) if out_dir is not None else None
    log_path = None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        log_path = out_dir / "train_log.csv"
        log_path.write_text(",".join(LOG_COLUMNS) + "\n")

    rows: list[dict] = []
    best_val = math.inf
    best_epoch = -1
    one = None
    for epoch in range(cfg.epochs):
        epoch_loss = 0.0
        steps = 0
        for images, masks in data_mod.batch_iter(
            manifest, cfg.batch_size, cfg.seed, epoch, split="train", cache=cache
        ):
            tape = Tape()
            acts = net.forward(images, "train", tape)
            loss = loss_fn(acts.Mask, masks, tape)
            if net.config.deep_supervision:
                for term in _deep_supervision_terms(acts, masks, loss_fn, tape):
                    loss = ops.add(loss, term, tape)
            value = float(loss.data)
            if not math.isfinite(value):
                raise NumericError(
                    f"non-finite training loss {value} at epoch {epoch} step {steps} "
                    f"(lr={adam.lr:g}, loss={cfg.loss})"
                )
            if one is None or one.dtype != loss.dtype:
                one = Tensor(np.asarray(1.0), loss.dtype)
            backward(tape, one)
            adam.mark_grads_ready()
            adam_step(net.registry, adam)
            epoch_loss += value
            steps += 1
            if cfg.max_steps_per_epoch and steps >= cfg.max_steps_per_epoch:
                break

        val_loss, report = evaluate(
            net, manifest, monitored_split, cfg.batch_size, loss_fn, cache=cache
        )
        adam.lr = plateau_step(sched, val_loss, adam.lr)
        agg = report.aggregate()
        row = {
            "epoch": epoch,
            "train_loss": epoch_loss / max(steps, 1),
            "val_loss": val_loss,
            "lr": adam.lr,
            "se": agg.se,
            "sp": agg.sp,
            "acc": agg.acc,
            "f1": agg.f1,
            "jaccard": agg.jaccard,
        }
        rows.append(row)
        if log_path is not None:
            with log_path.open("a") as fh:
                fh.write(format_log_row(row) + "\n")
        if verbose:
            print(
                f"epoch {epoch:3d}  train {row['train_loss']:.4f}  "
                f"val {val_loss:.4f}  lr {adam.lr:g}  f1 {agg.f1:.4f}"
            )
        if val_loss < best_val:
            best_val = val_loss
            best_epoch = epoch
            if out_dir is not None:
                save_checkpoint(net, out_dir / "best.ckpt", adam_state=adam)
        if out_dir is not None:
            save_checkpoint(net, out_dir / "last.ckpt", adam_state=adam)
    return TrainResult(rows=rows, best_val=best_val, best_epoch=best_epoch)


def format_log_row(row: dict) -> str:
    return ",".join(repr(row[c]) if isinstance(row[c], float) else str(row[c])
                    for c in LOG_COLUMNS)
