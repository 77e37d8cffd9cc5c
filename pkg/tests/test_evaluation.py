import csv
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stormcast.evaluation import (
    ConfusionMatrix,
    aggregate,
    confuse,
    emit_report,
    metrics,
    reweight_negatives,
)


def brute_force(probs, truth, threshold):
    tp = fp = fn = tn = 0
    for r in range(probs.shape[0]):
        for c in range(probs.shape[1]):
            pred = probs[r, c] >= threshold
            obs = truth[r, c] == 1
            if pred and obs:
                tp += 1
            elif pred:
                fp += 1
            elif obs:
                fn += 1
            else:
                tn += 1
    return ConfusionMatrix(tp, fp, fn, tn)


def test_confuse_matches_double_loop_on_100_cases():
    rng = np.random.default_rng(0)
    for k in range(100):
        shape = (16, 16) if k < 50 else tuple(rng.integers(1, 20, 2))
        probs = rng.random(shape)
        if k % 3 == 0:
            probs = np.round(probs, 1)  # exercise values exactly at the threshold
        truth = (rng.random(shape) < rng.random()).astype(int)
        thr = 0.5 if k % 2 else float(np.round(rng.random(), 1))
        assert confuse(probs, truth, thr) == brute_force(probs, truth, thr)


def test_confuse_trivial():
    ones, zeros = np.ones((3, 4)), np.zeros((3, 4))
    assert confuse(ones, ones) == ConfusionMatrix(12, 0, 0, 0)
    assert confuse(ones, zeros) == ConfusionMatrix(0, 12, 0, 0)


def test_confuse_shape_mismatch():
    with pytest.raises(ValueError):
        confuse(np.zeros((2, 3)), np.zeros((3, 2)))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31), st.floats(0.0, 1.0), st.floats(0.0, 1.0))
def test_count_conservation_and_threshold_monotonicity(seed, a, b):
    rng = np.random.default_rng(seed)
    probs, truth = rng.random((8, 9)), rng.random((8, 9)) > 0.7
    lo, hi = sorted((a, b))
    c_lo, c_hi = confuse(probs, truth, lo), confuse(probs, truth, hi)
    assert c_lo.total == c_hi.total == 72
    assert c_hi.tp <= c_lo.tp and c_hi.tn >= c_lo.tn


def test_metric_examples():
    assert metrics(ConfusionMatrix(tp=94, fn=6)).tpr == 0.94
    r = metrics(ConfusionMatrix(1, 1, 1, 1))
    assert (r.accuracy, r.tpr, r.tnr, r.far, r.precision) == (0.5, 0.5, 0.5, 0.5, 0.5)
    p = metrics(ConfusionMatrix(5, 0, 0, 7))
    assert (p.tpr, p.tnr, p.accuracy, p.far) == (1.0, 1.0, 1.0, 0.0)


def test_far_and_precision_are_complementary():
    r = metrics(ConfusionMatrix(3, 1, 2, 10))
    assert r.far == 0.25 and r.precision == 0.75


def test_undefined_ratios_flagged():
    r = metrics(ConfusionMatrix(0, 0, 0, 10))
    assert math.isnan(r.tpr) and math.isnan(r.far)
    assert set(r.undefined) == {"tpr", "far", "precision"}
    assert r.tnr == 1.0


def test_empty_matrix_rejected():
    with pytest.raises(ValueError):
        metrics(ConfusionMatrix())


def test_negative_counts_rejected():
    with pytest.raises(ValueError):
        ConfusionMatrix(-1, 0, 0, 0)


# ---------------------------------------------------------------- re-weighting


def test_reweight_identity():
    cm = ConfusionMatrix(3, 4, 5, 6)
    assert reweight_negatives(cm, 1) == cm


def test_reweight_example():
    r = metrics(reweight_negatives(ConfusionMatrix(tp=9, fp=1, fn=1, tn=9), 1500))
    assert r.tnr == 0.9
    assert r.accuracy == 13509 / 15010
    assert r.accuracy == pytest.approx(0.9, abs=1e-12)
    assert r.far == 1500 / 1509


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 500), st.integers(0, 500), st.integers(0, 500), st.integers(1, 500),
       st.sampled_from([1, 10, 1500]))
def test_rates_invariant_under_reweighting(tp, fp, fn, tn, factor):
    cm = ConfusionMatrix(tp, fp, fn, tn)
    a, b = metrics(cm), metrics(reweight_negatives(cm, factor))
    assert b.tpr == a.tpr
    assert b.tnr == pytest.approx(a.tnr, rel=1e-15)
    for v in (b.tpr, b.tnr, b.accuracy, b.far, b.precision):
        assert 0.0 <= v <= 1.0


def test_accuracy_tends_to_tnr():
    cm = ConfusionMatrix(50, 3, 50, 97)
    acc = [metrics(reweight_negatives(cm, f)).accuracy for f in (1, 10, 1500, 1e9)]
    tnr = metrics(cm).tnr
    gaps = [abs(a - tnr) for a in acc]
    assert gaps == sorted(gaps, reverse=True) and gaps[-1] < 1e-6


def test_reweight_rejects_non_positive():
    with pytest.raises(ValueError):
        reweight_negatives(ConfusionMatrix(1, 1, 1, 1), 0)


# ---------------------------------------------------------------- aggregation


def _fold(seed, n=20):
    rng = np.random.default_rng(seed)
    probs, truth = rng.random((n, n)), rng.random((n, n)) > 0.8
    return probs, truth, metrics(confuse(probs, truth))


def test_single_fold_aggregate_is_identity(tmp_path):
    _, _, rep = _fold(0)
    total = emit_report({"runetpp": [rep]})["runetpp"]
    assert total == rep


def test_identical_folds_same_ratios():
    _, _, rep = _fold(1)
    total = metrics(aggregate([rep, rep]))
    for k in ("tpr", "tnr", "accuracy", "far", "precision"):
        assert getattr(total, k) == pytest.approx(getattr(rep, k), rel=1e-15)


def test_aggregate_equals_concatenated_streams():
    folds = [_fold(s, n) for s, n in ((2, 10), (3, 17), (4, 23), (5, 8))]
    summed = aggregate([f[2] for f in folds])
    probs = np.concatenate([f[0].ravel() for f in folds])
    truth = np.concatenate([f[1].ravel() for f in folds])
    assert summed == confuse(probs, truth)


def test_report_files(tmp_path):
    reps = {"runetpp": [_fold(s)[2] for s in range(4)], "unetpp": [_fold(s + 10)[2] for s in range(4)]}
    totals = emit_report(reps, tmp_path / "r.csv", tmp_path / "p.tsv")
    rows = list(csv.DictReader(open(tmp_path / "r.csv")))
    assert len(rows) == 10
    assert [r["fold"] for r in rows[:5]] == ["1", "2", "3", "4", "all"]
    assert float(rows[4]["tpr"]) == totals["runetpp"].tpr
    lines = (tmp_path / "p.tsv").read_text().splitlines()
    assert lines[0] == "metric\tvariant\tvalue"
    metrics_seen = {ln.split("\t")[0] for ln in lines[1:]}
    assert {"far", "tnr", "tpr", "accuracy", "accuracy_reweighted", "far_reweighted"} <= metrics_seen
    assert {ln.split("\t")[1] for ln in lines[1:]} == {"runetpp", "unetpp"}
