"""Confusion counting, derived metrics, reports, and the analytic mask."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rga import losses, metrics
from rga.errors import ShapeError
from rga.tensor import Tensor

import oracles


def test_binarize_tie_rule():
    p = np.array([[0.5, 0.49], [0.0, 1.0]])
    np.testing.assert_array_equal(metrics.binarize(p), [[1, 0], [0, 1]])
    np.testing.assert_array_equal(metrics.binarize(np.full((2, 2), 0.5)), 1)
    np.testing.assert_array_equal(metrics.binarize(np.full((2, 2), 0.49)), 0)
    np.testing.assert_array_equal(metrics.binarize(np.zeros((2, 2)), threshold=0.0), 1)


def test_confusion_identity_and_complement():
    g = (np.arange(25).reshape(5, 5) % 2).astype(np.uint8)
    c = metrics.confusion(g, g)
    assert c.fp == 0 and c.fn == 0 and c.tp == int(g.sum())
    inv = metrics.confusion(1 - g, g)
    assert inv.tp == 0 and inv.tn == 0


def test_confusion_counts_sum_and_validation():
    rng = np.random.default_rng(0)
    p = (rng.random((8, 8)) > 0.5).astype(np.uint8)
    g = (rng.random((8, 8)) > 0.5).astype(np.uint8)
    c = metrics.confusion(p, g)
    assert c.total == 64
    with pytest.raises(ShapeError):
        metrics.confusion(p, g[:4])
    with pytest.raises(ValueError):
        metrics.confusion(p * 3, g)


@pytest.mark.parametrize("seed", range(10))
def test_confusion_matches_bruteforce(seed):
    rng = np.random.default_rng(seed)
    p = (rng.random((32, 32)) > rng.uniform(0.2, 0.8)).astype(np.uint8)
    g = (rng.random((32, 32)) > rng.uniform(0.2, 0.8)).astype(np.uint8)
    c = metrics.confusion(p, g)
    assert (c.tp, c.fp, c.tn, c.fn) == oracles.confusion_direct(p, g)
    got = metrics.compute_metrics(c)
    want = oracles.metrics_direct(c.tp, c.fp, c.tn, c.fn)
    assert got.values() == want


def test_metrics_hand_case():
    e = metrics.compute_metrics(metrics.ConfusionCounts(tp=50, fp=10, tn=930, fn=10))
    assert e.se == pytest.approx(5 / 6)
    assert e.precision == pytest.approx(5 / 6)
    assert e.f1 == pytest.approx(5 / 6)
    assert e.jaccard == pytest.approx(50 / 70)
    assert e.acc == pytest.approx(0.98)
    assert e.degenerate == ()
    # jaccard/f1 identity
    assert e.jaccard == pytest.approx(e.f1 / (2 - e.f1))


def test_metrics_degenerate_flags():
    e = metrics.compute_metrics(metrics.ConfusionCounts(tp=0, fp=0, tn=100, fn=0))
    assert e.acc == 1.0 and e.sp == 1.0
    assert e.se == 0.0 and e.precision == 0.0 and e.f1 == 0.0
    assert set(e.degenerate) == {"se", "precision", "f1", "jaccard"}
    with pytest.raises(ValueError):
        metrics.compute_metrics(metrics.ConfusionCounts(0, 0, 0, 0))
    with pytest.raises(ValueError):
        metrics.ConfusionCounts(-1, 0, 0, 0)


@given(st.integers(0, 2**32 - 1))
@settings(max_examples=25, deadline=None)
def test_jaccard_f1_identity(seed):
    rng = np.random.default_rng(seed)
    p = (rng.random((16, 16)) > 0.5).astype(np.uint8)
    g = (rng.random((16, 16)) > 0.5).astype(np.uint8)
    e = metrics.compute_metrics(metrics.confusion(p, g))
    if not e.degenerate:
        assert e.jaccard == pytest.approx(e.f1 / (2 - e.f1), rel=1e-9)


@pytest.mark.parametrize("seed", range(5))
def test_f1_equals_dice_coefficient_of_binarized(seed):
    rng = np.random.default_rng(seed)
    p = rng.random((1, 1, 8, 8)).astype(np.float32)
    g = (rng.random((1, 1, 8, 8)) > 0.5).astype(np.float32)
    pb = metrics.binarize(p)
    e = metrics.compute_metrics(metrics.confusion(pb[0, 0], g[0, 0]))
    dice = 1.0 - losses.dice_loss(
        Tensor(pb.astype(np.float32)), Tensor(g), eps=0.0
    ).item()
    assert e.f1 == pytest.approx(dice, rel=1e-5)


def test_report_aggregate_is_columnwise_mean():
    rng = np.random.default_rng(1)
    report = metrics.MetricReport()
    entries = []
    for i in range(5):
        p = (rng.random((10, 10)) > 0.4).astype(np.uint8)
        g = (rng.random((10, 10)) > 0.6).astype(np.uint8)
        entries.append(report.add(f"img{i}", metrics.confusion(p, g)))
    agg = report.aggregate()
    for k, col in enumerate(zip(*[e.values() for e in entries])):
        assert agg.values()[k] == pytest.approx(sum(col) / len(col))


def test_report_pooled_mode():
    report = metrics.MetricReport()
    report.add("a", metrics.ConfusionCounts(tp=10, fp=0, tn=90, fn=0))
    report.add("b", metrics.ConfusionCounts(tp=0, fp=10, tn=80, fn=10))
    pooled = report.aggregate(pooled=True)
    assert pooled.se == pytest.approx(10 / 20)
    assert pooled.acc == pytest.approx(180 / 200)


def test_report_csv_and_kv_formats():
    report = metrics.MetricReport()
    report.add("img0", metrics.ConfusionCounts(tp=50, fp=10, tn=930, fn=10))
    csv = report.to_csv()
    lines = csv.strip().split("\n")
    assert lines[0] == "image,se,sp,acc,precision,f1,jaccard"
    assert lines[1].startswith("img0,")
    assert lines[-1].startswith("mean,")
    assert len(lines[1].split(",")) == 7
    kv = report.to_kv()
    assert "images=1" in kv and "f1=" in kv


def test_analytic_mask_colors():
    p = np.array([[1, 1], [0, 0]], dtype=np.uint8)
    g = np.array([[1, 0], [1, 0]], dtype=np.uint8)
    rgb = metrics.analytic_mask(p, g)
    np.testing.assert_array_equal(rgb[0, 0], (0, 255, 0))    # tp green
    np.testing.assert_array_equal(rgb[0, 1], (0, 0, 255))    # fp blue
    np.testing.assert_array_equal(rgb[1, 0], (255, 0, 0))    # fn red
    np.testing.assert_array_equal(rgb[1, 1], (0, 0, 0))      # tn black


@pytest.mark.parametrize("seed", range(5))
def test_analytic_mask_counts_reconcile_with_confusion(seed):
    rng = np.random.default_rng(seed)
    p = (rng.random((16, 16)) > 0.5).astype(np.uint8)
    g = (rng.random((16, 16)) > 0.5).astype(np.uint8)
    rgb = metrics.analytic_mask(p, g)
    c = metrics.confusion(p, g)
    green = int(((rgb == (0, 255, 0)).all(axis=-1)).sum())
    red = int(((rgb == (255, 0, 0)).all(axis=-1)).sum())
    blue = int(((rgb == (0, 0, 255)).all(axis=-1)).sum())
    assert (green, red, blue) == (c.tp, c.fn, c.fp)
