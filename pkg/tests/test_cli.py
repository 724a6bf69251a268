"""End-to-end command-line behavior on tiny synthetic datasets."""

import numpy as np
import pytest
from PIL import Image

from rga import data as data_mod
from rga import metrics
from rga.checkpoint import save_checkpoint
from rga.cli import main
from rga.net import ModelConfig, RGANet
from rga.tensor import Tensor


def write_config(path, dataset_root, out_dir, **overrides):
    values = {
        "dataset.root": str(dataset_root),
        "dataset.size": 32,
        "train.epochs": 2,
        "train.batch": 2,
        "train.max_steps": 4,
        "output.dir": str(out_dir),
        "seed": 3,
    }
    values.update(overrides)
    path.write_text("".join(f"{k}={v}\n" for k, v in values.items()))
    return path


@pytest.fixture
def small_dataset(tmp_path):
    root = tmp_path / "ds"
    data_mod.make_synthetic_dataset(root, n_train=2, n_test=2, size=32, seed=1)
    return root


def test_train_smoke_produces_artifacts(tmp_path, small_dataset, capsys):
    out = tmp_path / "run"
    cfg = write_config(tmp_path / "run.cfg", small_dataset, out)
    assert main(["train", "--config", str(cfg), "--quiet"]) == 0
    for artifact in ("best.ckpt", "last.ckpt", "train_log.csv", "config.resolved",
                     "training_curves.png"):
        assert (out / artifact).is_file(), artifact
    resolved = (out / "config.resolved").read_text()
    assert "loss.kind=dice+bce" in resolved  # default objective
    assert "train.epochs=2" in resolved
    assert "model.filters=8,16,24,32" in resolved


def test_train_determinism_same_config(tmp_path, small_dataset):
    out_a = tmp_path / "a"
    out_b = tmp_path / "b"
    cfg_a = write_config(tmp_path / "a.cfg", small_dataset, out_a)
    cfg_b = write_config(tmp_path / "b.cfg", small_dataset, out_b)
    assert main(["train", "--config", str(cfg_a), "--quiet"]) == 0
    assert main(["train", "--config", str(cfg_b), "--quiet"]) == 0
    assert (out_a / "train_log.csv").read_bytes() == (out_b / "train_log.csv").read_bytes()


def test_config_resolved_reproduces_run(tmp_path, small_dataset):
    out_a = tmp_path / "a"
    cfg = write_config(tmp_path / "run.cfg", small_dataset, out_a)
    assert main(["train", "--config", str(cfg), "--quiet"]) == 0
    # re-feed the resolved config, only overriding the output directory
    out_b = tmp_path / "b"
    resolved = (out_a / "config.resolved").read_text()
    refed = tmp_path / "refed.cfg"
    refed.write_text(resolved.replace(f"output.dir={out_a}", f"output.dir={out_b}"))
    assert main(["train", "--config", str(refed), "--quiet"]) == 0
    assert (out_a / "train_log.csv").read_bytes() == (out_b / "train_log.csv").read_bytes()


def test_unknown_config_key_rejected(tmp_path, small_dataset, capsys):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("dataset.root=x\ntrain.lerning_rate=0.1\n")
    assert main(["train", "--config", str(cfg)]) == 1
    err = capsys.readouterr().err
    assert "bad.cfg:2" in err and "lerning_rate" in err


def test_malformed_config_line_number(tmp_path, capsys):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("# comment\n\ntrain.epochs ten\n")
    assert main(["train", "--config", str(cfg)]) == 1
    assert "bad.cfg:3" in capsys.readouterr().err


def test_missing_dataset_is_data_error(tmp_path, capsys):
    cfg = write_config(tmp_path / "run.cfg", tmp_path / "nowhere", tmp_path / "out")
    assert main(["train", "--config", str(cfg)]) == 2


def test_eval_writes_csv_and_summary(tmp_path, small_dataset):
    out = tmp_path / "run"
    cfg = write_config(tmp_path / "run.cfg", small_dataset, out)
    assert main(["train", "--config", str(cfg), "--quiet"]) == 0
    eval_out = tmp_path / "eval"
    code = main([
        "eval", "--checkpoint", str(out / "best.ckpt"),
        "--data", str(small_dataset), "--out", str(eval_out), "--size", "32",
    ])
    assert code == 0
    csv_lines = (eval_out / "metrics.csv").read_text().strip().splitlines()
    assert csv_lines[0] == "image,se,sp,acc,precision,f1,jaccard"
    assert len(csv_lines) == 2 + 2  # header + 2 test images + mean
    assert csv_lines[-1].startswith("mean,")
    # aggregate equals the column means of the per-image rows
    rows = [list(map(float, line.split(",")[1:])) for line in csv_lines[1:-1]]
    mean_row = list(map(float, csv_lines[-1].split(",")[1:]))
    # per-image cells are rounded to 6 decimals, so allow that much slack
    for j, col in enumerate(zip(*rows)):
        assert mean_row[j] == pytest.approx(sum(col) / len(col), abs=2e-6)
    assert (eval_out / "summary.txt").is_file()
    assert (eval_out / "metrics.png").is_file()


def test_eval_degenerate_uniform_model(tmp_path, small_dataset):
    # zero head weights produce a uniform 0.5 mask; ties binarize to
    # foreground, so sensitivity is 1 and specificity 0
    net = RGANet(seed=0)
    net.registry["head.weight"].value.data[...] = 0.0
    net.registry["head.bias"].value.data[...] = 0.0
    ckpt = tmp_path / "uniform.ckpt"
    save_checkpoint(net, ckpt)
    eval_out = tmp_path / "eval"
    assert main([
        "eval", "--checkpoint", str(ckpt), "--data", str(small_dataset),
        "--out", str(eval_out), "--size", "32",
    ]) == 0
    lines = (eval_out / "metrics.csv").read_text().strip().splitlines()
    for line in lines[1:]:
        parts = line.split(",")
        assert float(parts[1]) == 1.0  # se
        assert float(parts[2]) == 0.0  # sp


def test_eval_fingerprint_mismatch_is_data_error(tmp_path, small_dataset, capsys):
    ckpt = tmp_path / "tiny.ckpt"
    save_checkpoint(RGANet(ModelConfig(filters=(4, 8, 12, 16))), ckpt)
    raw = bytearray(ckpt.read_bytes())
    raw[4:8] = (99).to_bytes(4, "little")
    ckpt.write_bytes(bytes(raw))
    assert main([
        "eval", "--checkpoint", str(ckpt), "--data", str(small_dataset),
        "--out", str(tmp_path / "e"), "--size", "32",
    ]) == 2


def test_predict_outputs(tmp_path, small_dataset):
    net = RGANet(seed=1)
    ckpt = tmp_path / "m.ckpt"
    save_checkpoint(net, ckpt)
    image = small_dataset / "test" / "images" / "test_00.png"
    out = tmp_path / "pred"
    assert main([
        "predict", "--checkpoint", str(ckpt), "--image", str(image),
        "--out", str(out), "--size", "32",
    ]) == 0
    prob = np.asarray(Image.open(out / "test_00_prob.png"))
    mask = np.asarray(Image.open(out / "test_00_mask.png"))
    assert prob.shape == (32, 32)
    assert mask.shape == (32, 32)
    assert set(np.unique(mask)) <= {0, 255}
    # probability pixels reproduce the in-memory mask quantization
    img_t = data_mod.load_image(image)
    placeholder = Tensor(np.zeros((1, 1) + img_t.shape[2:], dtype=np.float32))
    resized, _ = data_mod.resize_to_target(img_t, placeholder, 32, 32)
    acts = net.forward(resized, "eval")
    want = np.floor(acts.Mask.data[0, 0] * 255.0 + 0.5).astype(np.uint8)
    np.testing.assert_array_equal(prob, want)


def test_predict_rejects_bad_size(tmp_path, small_dataset):
    ckpt = tmp_path / "m.ckpt"
    save_checkpoint(RGANet(), ckpt)
    image = small_dataset / "test" / "images" / "test_00.png"
    assert main([
        "predict", "--checkpoint", str(ckpt), "--image", str(image),
        "--out", str(tmp_path / "p"), "--size", "33",
    ]) == 1


def test_analyze_reconciles_with_confusion(tmp_path, capsys):
    rng = np.random.default_rng(5)
    pred = (rng.random((24, 24)) > 0.5).astype(np.uint8) * 255
    gt = (rng.random((24, 24)) > 0.5).astype(np.uint8) * 255
    pred_path = tmp_path / "pred.png"
    gt_path = tmp_path / "gt.png"
    data_mod.write_png(pred_path, pred)
    data_mod.write_png(gt_path, gt)
    out = tmp_path / "overlay.png"
    assert main(["analyze", "--pred", str(pred_path), "--gt", str(gt_path),
                 "--out", str(out)]) == 0
    rgb = np.asarray(Image.open(out))
    counts = metrics.confusion((pred > 0).astype(np.uint8), (gt > 0).astype(np.uint8))
    green = int(((rgb == (0, 255, 0)).all(axis=-1)).sum())
    red = int(((rgb == (255, 0, 0)).all(axis=-1)).sum())
    blue = int(((rgb == (0, 0, 255)).all(axis=-1)).sum())
    assert (green, red, blue) == (counts.tp, counts.fn, counts.fp)
    printed = capsys.readouterr().out
    assert f"green(tp)={counts.tp}" in printed


def test_analyze_pred_equals_gt_only_green_black(tmp_path):
    g = (np.indices((8, 8)).sum(axis=0) % 2).astype(np.uint8) * 255
    p = tmp_path / "m.png"
    data_mod.write_png(p, g)
    out = tmp_path / "overlay.png"
    assert main(["analyze", "--pred", str(p), "--gt", str(p), "--out", str(out)]) == 0
    rgb = np.asarray(Image.open(out))
    colors = {tuple(c) for c in rgb.reshape(-1, 3)}
    assert colors <= {(0, 255, 0), (0, 0, 0)}


def test_analyze_dim_mismatch_is_data_error(tmp_path):
    a = tmp_path / "a.png"
    b = tmp_path / "b.png"
    data_mod.write_png(a, np.zeros((8, 8), dtype=np.uint8))
    data_mod.write_png(b, np.zeros((9, 8), dtype=np.uint8))
    assert main(["analyze", "--pred", str(a), "--gt", str(b),
                 "--out", str(tmp_path / "o.png")]) == 2


def test_gradcheck_cli_pass_and_corrupt(capsys):
    assert main(["gradcheck", "--size", "16", "--samples", "2"]) == 0
    out = capsys.readouterr().out
    assert "PASS" in out
    assert main(["gradcheck", "--size", "16", "--samples", "2",
                 "--corrupt", "enc1.dw1.kernel"]) == 4
    assert "FAIL" in capsys.readouterr().out


def test_gradcheck_report_lists_every_group_once(capsys):
    assert main(["gradcheck", "--size", "16", "--samples", "1"]) == 0
    out = capsys.readouterr().out.splitlines()
    names = [line.split()[1] for line in out if line.startswith(("ok", "FAIL"))]
    net = RGANet()
    assert names == net.registry.names()


def test_params_table_default(capsys):
    assert main(["params"]) == 0
    out = capsys.readouterr().out.splitlines()
    assert out[-1] == "total_params=14953"
    # per-layer counts add up to the printed total
    counts = [int(line.split()[-1]) for line in out
              if line and not line.startswith(("total_params", "(sum)"))]
    assert sum(counts) == 14953


def test_params_tiny_filters(capsys):
    assert main(["params", "--filters", "1,1,1,1", "--in-channels", "1"]) == 0
    assert capsys.readouterr().out.strip().endswith("total_params=244")


def test_params_malformed_filters(capsys):
    assert main(["params", "--filters", "8,sixteen,24,32"]) == 1


def test_usage_error_exit_code(capsys):
    assert main(["frobnicate"]) == 1


def test_eval_empty_test_split_is_data_error(tmp_path):
    root = tmp_path / "trainonly"
    data_mod.make_synthetic_dataset(root, n_train=1, n_test=0, size=32)
    ckpt = tmp_path / "m.ckpt"
    save_checkpoint(RGANet(), ckpt)
    assert main([
        "eval", "--checkpoint", str(ckpt), "--data", str(root),
        "--out", str(tmp_path / "e"), "--size", "32",
    ]) == 2


def test_numeric_failure_exit_code(tmp_path, small_dataset, monkeypatch, capsys):
    import rga.cli as cli_mod
    from rga.errors import NumericError

    def exploding(net, manifest, cfg, out_dir=None, verbose=False):
        raise NumericError("non-finite training loss inf at epoch 0 step 0")

    monkeypatch.setattr(cli_mod, "train_loop", exploding)
    cfg = write_config(tmp_path / "run.cfg", small_dataset, tmp_path / "out")
    assert main(["train", "--config", str(cfg), "--quiet"]) == 3
    assert "numeric failure" in capsys.readouterr().err


def test_eval_rejects_bad_size_and_batch(tmp_path, small_dataset):
    ckpt = tmp_path / "m.ckpt"
    save_checkpoint(RGANet(), ckpt)
    assert main([
        "eval", "--checkpoint", str(ckpt), "--data", str(small_dataset),
        "--out", str(tmp_path / "e"), "--size", "33",
    ]) == 1
    assert main([
        "eval", "--checkpoint", str(ckpt), "--data", str(small_dataset),
        "--out", str(tmp_path / "e"), "--size", "32", "--batch", "0",
    ]) == 1


@pytest.mark.parametrize("bad_line", [
    "dataset.size=20",
    "train.batch=0",
    "train.epochs=0",
    "train.lr=-0.001",
    "train.val_fraction=1.5",
])
def test_config_value_bounds(tmp_path, small_dataset, bad_line):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text(f"dataset.root={small_dataset}\noutput.dir={tmp_path/'o'}\n{bad_line}\n")
    assert main(["train", "--config", str(cfg)]) == 1


def test_train_with_stare_layout(tmp_path, small_dataset):
    out = tmp_path / "run"
    cfg = write_config(tmp_path / "run.cfg", small_dataset, out,
                       **{"dataset.layout": "stare", "train.epochs": 1,
                          "train.max_steps": 2})
    assert main(["train", "--config", str(cfg), "--quiet"]) == 0
    assert "dataset.layout=stare" in (out / "config.resolved").read_text()


def test_train_with_unknown_layout(tmp_path, small_dataset):
    cfg = write_config(tmp_path / "run.cfg", small_dataset, tmp_path / "o",
                       **{"dataset.layout": "imagenet"})
    assert main(["train", "--config", str(cfg), "--quiet"]) == 2
