"""Command-line surface: train, eval, predict, analyze, gradcheck, params.

Exit codes: 0 success, 1 usage/config error, 2 data or checkpoint error,
3 numeric failure (non-finite loss), 4 verification failure.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import data as data_mod
from . import metrics as metrics_mod
from .checkpoint import load_checkpoint
from .errors import CheckpointError, ConfigError, DataError, NumericError
from .net import ModelConfig, RGANet
from .optim import TrainConfig, evaluate, make_loss_fn, train_loop
from .tensor import Tensor

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3
EXIT_VERIFY = 4


# ---------------------------------------------------------------------------
# run configuration: flat key=value file

def _parse_bool(s: str) -> bool:
    if s.lower() in ("true", "1", "yes"):
        return True
    if s.lower() in ("false", "0", "no"):
        return False
    raise ValueError(f"expected a boolean, got {s!r}")


def _parse_filters(s: str) -> tuple[int, ...]:
    try:
        values = tuple(int(part) for part in s.split(","))
    except ValueError:
        raise ValueError(f"expected a comma list of integers, got {s!r}") from None
    return values


def _fmt_bool(v: bool) -> str:
    return "true" if v else "false"


def _fmt_filters(v) -> str:
    return ",".join(str(x) for x in v)


# key -> (default, parse, format)
CONFIG_KEYS = {
    "dataset.root": ("", str, str),
    "dataset.layout": ("drive", str, str),
    "dataset.size": (512, int, str),
    "model.filters": ((8, 16, 24, 32), _parse_filters, _fmt_filters),
    "model.in_channels": (3, int, str),
    "model.use_iaa": (True, _parse_bool, _fmt_bool),
    "model.use_partial_decoder": (True, _parse_bool, _fmt_bool),
    "model.deep_supervision": (False, _parse_bool, _fmt_bool),
    "train.epochs": (70, int, str),
    "train.lr": (1e-3, float, repr),
    "train.batch": (4, int, str),
    "train.val_fraction": (0.1, float, repr),
    "train.max_steps": (0, int, str),
    "loss.kind": ("dice+bce", str, str),
    "sched.patience": (5, int, str),
    "sched.factor": (0.1, float, repr),
    "sched.min_lr": (1e-6, float, repr),
    "sched.threshold": (1e-4, float, repr),
    "seed": (0, int, str),
    "output.dir": ("", str, str),
}

LOSS_KINDS = ("dice", "wdice", "bce", "iou", "dice+bce")


@dataclass
class RunConfig:
    values: dict

    def __getitem__(self, key):
        return self.values[key]

    def resolved_text(self) -> str:
        lines = []
        for key, (_, _, fmt) in CONFIG_KEYS.items():
            lines.append(f"{key}={fmt(self.values[key])}")
        return "\n".join(lines) + "\n"

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            in_channels=self["model.in_channels"],
            filters=self["model.filters"],
            deep_supervision=self["model.deep_supervision"],
            use_iaa=self["model.use_iaa"],
            use_partial_decoder=self["model.use_partial_decoder"],
        )

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            epochs=self["train.epochs"],
            lr=self["train.lr"],
            batch_size=self["train.batch"],
            loss=self["loss.kind"],
            patience=self["sched.patience"],
            factor=self["sched.factor"],
            min_lr=self["sched.min_lr"],
            threshold=self["sched.threshold"],
            seed=self["seed"],
            val_fraction=self["train.val_fraction"],
            max_steps_per_epoch=self["train.max_steps"],
        )


def parse_run_config(path) -> RunConfig:
    """Parse a key=value config file; unknown keys are hard errors."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    values = {key: default for key, (default, _, _) in CONFIG_KEYS.items()}
    for lineno, raw in enumerate(path.read_text().splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key=value, got {raw!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        value = value.strip()
        if key not in CONFIG_KEYS:
            raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
        _, parse, _ = CONFIG_KEYS[key]
        try:
            values[key] = parse(value)
        except ValueError as exc:
            raise ConfigError(f"{path}:{lineno}: bad value for {key}: {exc}") from exc
    if values["loss.kind"] not in LOSS_KINDS:
        raise ConfigError(
            f"{path}: loss.kind must be one of {LOSS_KINDS}, got {values['loss.kind']!r}"
        )
    if values["dataset.size"] % 8 or values["dataset.size"] < 8:
        raise ConfigError(f"{path}: dataset.size must be a positive multiple of 8")
    for key, minimum in (("train.epochs", 1), ("train.batch", 1),
                         ("sched.patience", 0), ("train.max_steps", 0)):
        if values[key] < minimum:
            raise ConfigError(f"{path}: {key} must be >= {minimum}")
    if not 0.0 < values["train.lr"]:
        raise ConfigError(f"{path}: train.lr must be positive")
    if not 0.0 <= values["train.val_fraction"] < 1.0:
        raise ConfigError(f"{path}: train.val_fraction must be in [0, 1)")
    return RunConfig(values)


# ---------------------------------------------------------------------------
# subcommands

def cmd_train(args) -> int:
    cfg = parse_run_config(args.config)
    if not cfg["dataset.root"]:
        raise ConfigError("train requires dataset.root")
    if not cfg["output.dir"]:
        raise ConfigError("train requires output.dir")
    out_dir = Path(cfg["output.dir"])
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.resolved").write_text(cfg.resolved_text())

    manifest = data_mod.build_manifest(
        cfg["dataset.root"], layout=cfg["dataset.layout"], seed=cfg["seed"],
        target_h=cfg["dataset.size"], target_w=cfg["dataset.size"],
    )
    net = RGANet(cfg.model_config(), seed=cfg["seed"])
    result = train_loop(net, manifest, cfg.train_config(), out_dir=out_dir,
                        verbose=not args.quiet)
    from .report import save_training_curves

    save_training_curves(result.rows, out_dir / "training_curves.png")
    if not args.quiet:
        print(f"best validation loss {result.best_val:.6f} at epoch {result.best_epoch}")
        print(f"artifacts written to {out_dir}")
    return EXIT_OK


def cmd_eval(args) -> int:
    if args.size % 8:
        raise ConfigError("--size must be divisible by 8")
    if args.batch < 1:
        raise ConfigError("--batch must be >= 1")
    net = load_checkpoint(args.checkpoint)
    manifest = data_mod.build_manifest(
        args.data, layout=args.layout, target_h=args.size, target_w=args.size
    )
    if not manifest.split("test"):
        raise DataError(f"no test records under {args.data}")
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    loss_fn = make_loss_fn(args.loss)
    _, report = evaluate(net, manifest, "test", args.batch, loss_fn)
    # re-list rows under their image stems for the CSV
    named = metrics_mod.MetricReport()
    for (rec, (_, counts, _)) in zip(manifest.split("test"), report.rows):
        named.add(Path(rec.image).stem, counts)
    (out_dir / "metrics.csv").write_text(named.to_csv(pooled=args.pooled))
    (out_dir / "summary.txt").write_text(named.to_kv(pooled=args.pooled))
    from .report import save_metric_summary

    save_metric_summary(named, out_dir / "metrics.png")
    print(named.to_kv(pooled=args.pooled), end="")
    return EXIT_OK


def cmd_predict(args) -> int:
    net = load_checkpoint(args.checkpoint)
    if args.size % 8:
        raise ConfigError("--size must be divisible by 8")
    image = data_mod.load_image(args.image)
    mask_placeholder = Tensor(np.zeros((1, 1) + image.shape[2:], dtype=np.float32))
    image, _ = data_mod.resize_to_target(image, mask_placeholder, args.size, args.size)
    acts = net.forward(image, "eval")
    prob = acts.Mask.data[0, 0]
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    stem = Path(args.image).stem
    # round-half-up quantization so downstream thresholding is reproducible
    prob_png = np.floor(prob * 255.0 + 0.5).astype(np.uint8)
    mask_png = metrics_mod.binarize(prob) * 255
    data_mod.write_png(out_dir / f"{stem}_prob.png", prob_png)
    data_mod.write_png(out_dir / f"{stem}_mask.png", mask_png)
    print(f"wrote {out_dir / (stem + '_prob.png')} and {out_dir / (stem + '_mask.png')}")
    return EXIT_OK


def cmd_analyze(args) -> int:
    pred = data_mod.load_mask(args.pred).data[0, 0]
    gt = data_mod.load_mask(args.gt).data[0, 0]
    if pred.shape != gt.shape:
        raise DataError(
            f"prediction {pred.shape} and ground truth {gt.shape} differ in size"
        )
    overlay = metrics_mod.analytic_mask(pred, gt)
    out = Path(args.out)
    if out.parent:
        out.parent.mkdir(parents=True, exist_ok=True)
    data_mod.write_png(out, overlay)
    counts = metrics_mod.confusion(pred, gt)
    print(f"green(tp)={counts.tp} red(fn)={counts.fn} blue(fp)={counts.fp} "
          f"black(tn)={counts.tn}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradcheck import whole_network_gradcheck

    report = whole_network_gradcheck(
        size=args.size, dtype=args.dtype, samples_per_group=args.samples,
        seed=args.seed, corrupt=args.corrupt,
    )
    for line in report.lines():
        print(line)
    return EXIT_OK if report.passed else EXIT_VERIFY


def cmd_params(args) -> int:
    try:
        filters = _parse_filters(args.filters)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    net = RGANet(ModelConfig(in_channels=args.in_channels, filters=filters))
    width = max(len(name) for name, _, _ in net.param_table())
    total = 0
    for name, shape, count in net.param_table():
        print(f"{name:<{width}}  {str(shape):<18} {count:>8}")
        total += count
    print(f"{'(sum)':<{width}}  {'':<18} {total:>8}")
    print(f"total_params={total}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="rga", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model from a key=value config")
    p.add_argument("--config", required=True)
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a test split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--layout", default="drive", choices=data_mod.LAYOUTS)
    p.add_argument("--size", type=int, default=512)
    p.add_argument("--batch", type=int, default=4)
    p.add_argument("--loss", default="dice+bce", choices=LOSS_KINDS)
    p.add_argument("--pooled", action="store_true",
                   help="aggregate from pooled pixel counts instead of per-image means")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="write probability and binary mask PNGs")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--size", type=int, default=512)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("analyze", help="color-coded agreement overlay of two masks")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("gradcheck", help="verify analytic gradients by finite differences")
    p.add_argument("--size", type=int, default=32)
    p.add_argument("--dtype", default="float64", choices=("float32", "float64"))
    p.add_argument("--samples", type=int, default=16,
                   help="coordinates checked per parameter group")
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--corrupt", default=None,
                   help="scale one group's analytic gradient (negative control)")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("params", help="per-layer parameter table")
    p.add_argument("--filters", default="8,16,24,32")
    p.add_argument("--in-channels", type=int, default=3)
    p.set_defaults(func=cmd_params)

    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, CheckpointError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
