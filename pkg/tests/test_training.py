import math
from datetime import datetime, timedelta

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stormcast.autograd import Tensor, backward
from stormcast.model import ModelConfig, UNetPP
from stormcast.training import (
    NumericError,
    SampleSet,
    TrainConfig,
    class_weight,
    deep_loss,
    make_folds,
    plateau_lr,
    sgd_step,
    train_fold,
    weighted_bce,
)

LN2 = math.log(2.0)


def timeline_2017():
    t, end, out = datetime(2017, 6, 1, 0, 30), datetime(2017, 7, 4, 6, 30), []
    while t <= end:
        out.append(t)
        t += timedelta(minutes=15)
    return out


def bce_reference(x, y, p):
    # direct transcription with float64 logs, valid for moderate |x|
    s = 1.0 / (1.0 + np.exp(-x))
    return float(np.mean(-(p * y * np.log(s) + (1 - y) * np.log(1 - s))))


# ---------------------------------------------------------------- loss


@pytest.mark.parametrize("y,p,expected", [(1, 1.0, LN2), (0, 1.0, LN2), (0, 1500.0, LN2), (1, 1500.0, 1500 * LN2)])
def test_bce_at_zero_logit(y, p, expected):
    loss = weighted_bce(Tensor(np.zeros((1, 1, 2, 2))), np.full((1, 1, 2, 2), float(y)), p)
    assert abs(float(loss.data) - expected) < 1e-9
    if p == 1500.0 and y == 1:
        assert float(loss.data) == pytest.approx(1039.72, abs=0.01)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(-8, 8), min_size=4, max_size=4), st.lists(st.integers(0, 1), min_size=4, max_size=4),
       st.floats(0.1, 2000))
def test_bce_matches_direct_formula(xs, ys, p):
    x, y = np.array(xs).reshape(1, 1, 2, 2), np.array(ys, float).reshape(1, 1, 2, 2)
    assert float(weighted_bce(Tensor(x), y, p).data) == pytest.approx(bce_reference(x, y, p), rel=1e-10, abs=1e-12)


def test_bce_rejects_soft_labels_and_bad_weight():
    x = Tensor(np.zeros((1, 1, 2, 2)))
    with pytest.raises(ValueError):
        weighted_bce(x, np.full((1, 1, 2, 2), 0.5), 1.0)
    with pytest.raises(ValueError):
        weighted_bce(x, np.zeros((1, 1, 2, 2)), 0.0)


def test_bce_stable_at_large_logits():
    x = Tensor(np.array([50.0, -50.0, 50.0, -50.0]).reshape(1, 1, 2, 2), requires_grad=True)
    y = np.array([0.0, 1.0, 1.0, 0.0]).reshape(1, 1, 2, 2)
    loss = weighted_bce(x, y, 10.0)
    backward(loss)
    assert np.isfinite(loss.data) and np.isfinite(x.grad).all()
    assert float(loss.data) == pytest.approx((50 + 10 * 50) / 4, rel=1e-12)


def test_bce_gradient():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(1, 1, 3, 3))
    y = (rng.random((1, 1, 3, 3)) > 0.5).astype(float)
    t = Tensor(x.copy(), requires_grad=True)
    backward(weighted_bce(t, y, 7.0))
    eps = 1e-6
    num = np.zeros(9)
    for i in range(9):
        xp, xm = x.copy().ravel(), x.copy().ravel()
        xp[i] += eps
        xm[i] -= eps
        num[i] = (bce_reference(xp.reshape(x.shape), y, 7.0) - bce_reference(xm.reshape(x.shape), y, 7.0)) / (2 * eps)
    np.testing.assert_allclose(t.grad.ravel(), num, rtol=1e-6, atol=1e-9)


def test_all_negative_loss_independent_of_weight():
    x = Tensor(np.random.default_rng(1).normal(size=(2, 1, 4, 4)))
    y = np.zeros((2, 1, 4, 4))
    assert float(weighted_bce(x, y, 1.0).data) == float(weighted_bce(x, y, 900.0).data)


@pytest.mark.parametrize("n_pos,n,expected", [(6, 12, 1.0), (3, 12, 3.0)])
def test_class_weight_small(n_pos, n, expected):
    y = np.zeros(n)
    y[:n_pos] = 1
    assert class_weight(y) == expected


def test_class_weight_reference_ratio():
    y = np.zeros(100_000)
    y[:66] = 1
    assert class_weight(y) == pytest.approx(1514, abs=0.5)


def test_class_weight_requires_positives():
    with pytest.raises(ValueError, match="positive"):
        class_weight(np.zeros(10))


def test_deep_loss_identical_heads():
    x = Tensor(np.random.default_rng(2).normal(size=(1, 1, 4, 4)))
    y = (np.random.default_rng(3).random((1, 1, 4, 4)) > 0.7).astype(float)
    single = float(weighted_bce(x, y, 4.0).data)
    total = float(deep_loss({"y01": x, "y02": x, "y03": x}, y, 4.0).data)
    assert total == pytest.approx(3 * single, rel=1e-12)


def test_deep_loss_with_perfect_head():
    y = np.array([1.0, 0.0, 0.0, 1.0]).reshape(1, 1, 2, 2)
    perfect = Tensor(np.where(y > 0, 60.0, -60.0))
    other = Tensor(np.zeros((1, 1, 2, 2)))
    total = float(deep_loss({"y01": perfect, "y02": other, "y03": other}, y, 2.0).data)
    assert total == pytest.approx(2 * float(weighted_bce(other, y, 2.0).data), rel=1e-12)


def test_deep_loss_needs_three_heads():
    x = Tensor(np.zeros((1, 1, 2, 2)))
    with pytest.raises(ValueError):
        deep_loss({"y03": x}, np.zeros((1, 1, 2, 2)), 1.0)


def test_gradient_reaches_every_node():
    model = UNetPP(ModelConfig(base_width=2))
    rng = np.random.default_rng(4)
    x = Tensor(rng.random((2, 10, 16, 16)))
    y = (rng.random((2, 1, 16, 16)) > 0.9).astype(float)
    backward(deep_loss(model(x, training=True), y, 5.0))
    for name, p in model.named_parameters():
        assert p.grad is not None, name
    for node in ("R01", "R02"):
        assert any(np.abs(p.grad).sum() > 0 for n, p in model.named_parameters() if n.startswith(node))


# ---------------------------------------------------------------- sgd


def _param(value, grad):
    t = Tensor(np.array([value], float), requires_grad=True)
    t.grad = np.array([grad], float)
    return t


def test_sgd_weight_decay():
    w = _param(1.0, 0.0)
    sgd_step([("R00.conv1.weight", w)], lr=0.1, weight_decay=0.1)
    assert w.data[0] == pytest.approx(0.99, abs=1e-15)


def test_sgd_plain():
    w = _param(0.5, 2.0)
    sgd_step([("R00.conv1.weight", w)], lr=0.1, weight_decay=0.0)
    assert w.data[0] == pytest.approx(0.5 - 0.2, abs=1e-15)


@pytest.mark.parametrize("name", ["R00.conv1.bias", "R00.bn1.gamma", "R00.bn1.beta", "F01.bias"])
def test_no_decay_off_weights(name):
    t = _param(1.0, 0.0)
    sgd_step([(name, t)], lr=0.1, weight_decay=0.1)
    assert t.data[0] == 1.0


def test_sgd_rejects_non_finite():
    with pytest.raises(NumericError):
        sgd_step([("R00.conv1.weight", _param(1.0, np.nan))], 0.1, 0.1)


# ---------------------------------------------------------------- plateau schedule


def test_plateau_keep():
    assert plateau_lr([1.0, .99, .985, .984, .983, .982], 0.01) == 0.01


def test_plateau_drop():
    assert plateau_lr([1.0, .999, .998, .998, .997, .996], 0.01) == pytest.approx(0.001, rel=1e-15)


def test_plateau_needs_history():
    assert plateau_lr([1.0, 0.5], 0.01) == 0.01


def test_strictly_improving_run_keeps_rate():
    losses = [0.97 ** k for k in range(30)]
    lr = 0.01
    for e in range(6, 31):
        lr = plateau_lr(losses[:e], lr)
    assert lr == 0.01


# ---------------------------------------------------------------- folds


def test_fold_one_boundaries_2017():
    folds = make_folds(timeline_2017())
    f1 = folds[0]
    assert f1.test_start == datetime(2017, 6, 1, 0, 30)
    assert f1.test_end == datetime(2017, 6, 8, 23, 0)
    assert f1.train_ranges == [(datetime(2017, 6, 9, 11, 0), datetime(2017, 7, 4, 6, 30))]


def test_later_folds_close_to_reference_dates():
    table = [(datetime(2017, 6, 9, 11, 0), datetime(2017, 6, 17, 9, 45)),
             (datetime(2017, 6, 17, 21, 45), datetime(2017, 6, 25, 20, 15)),
             (datetime(2017, 6, 26, 8, 15), datetime(2017, 7, 4, 6, 30))]
    folds = make_folds(timeline_2017())
    assert folds[1].test_start == table[0][0]
    for f, (s, e) in zip(folds[1:], table):
        assert abs(f.test_start - s) <= timedelta(minutes=30)
        assert abs(f.test_end - e) <= timedelta(minutes=30)
    assert folds[-1].test_end == table[-1][1]


@pytest.mark.parametrize("margin_h,days", [(12, 33), (1, 4)])
def test_no_train_sample_within_margin(margin_h, days):
    start = datetime(2017, 6, 1)
    ts = [start + timedelta(minutes=15 * k) for k in range(days * 96)]
    margin = timedelta(hours=margin_h)
    for f in make_folds(ts, margin=margin):
        train, test = f.split(ts)
        assert train and test and not set(train) & set(test)
        test_times = [ts[k] for k in test]
        lo, hi = min(test_times), max(test_times)
        for k in train:
            gap = max(lo - ts[k], ts[k] - hi)
            assert gap >= margin


def test_test_ranges_disjoint():
    folds = make_folds(timeline_2017())
    for a, b in zip(folds, folds[1:]):
        assert a.test_end < b.test_start


def test_short_timeline_rejected():
    ts = [datetime(2017, 6, 1) + timedelta(minutes=15 * k) for k in range(20)]
    with pytest.raises(ValueError):
        make_folds(ts)


# ---------------------------------------------------------------- loop


def tiny_data(n=8, size=16, seed=0):
    rng = np.random.default_rng(seed)
    raw = rng.random((n, 10, size, size)) * 0.1
    targets = np.zeros((n, size, size))
    for k in range(n):
        r, c = rng.integers(2, size - 2, 2)
        raw[k, :9, r - 1:r + 2, c - 1:c + 2] += 0.8
        targets[k, r, c] = 1
    ts = [datetime(2017, 6, 1) + timedelta(minutes=15 * k) for k in range(n)]
    return SampleSet(ts, raw, targets)


def _run(epochs=3, seed=0):
    cfg = TrainConfig(epochs=epochs, tile=(16, 16), eval_every=1, seed=seed)
    return train_fold(UNetPP(ModelConfig(base_width=2, seed=seed)), tiny_data(), cfg)


def test_determinism():
    a, b = _run(), _run()
    assert [(e.loss, e.lr) for e in a.logs] == [(e.loss, e.lr) for e in b.logs]


def test_eval_epochs():
    data = tiny_data(n=12)
    from stormcast.training import FoldSpec

    ts = data.timestamps
    fold = FoldSpec(1, ts[8], ts[11], timedelta(minutes=15), ts[0], ts[11])
    cfg = TrainConfig(epochs=10, tile=(16, 16), eval_every=5)
    res = train_fold(UNetPP(ModelConfig(base_width=2)), data, cfg, fold)
    assert [e.epoch for e in res.logs if e.tpr is not None] == [5, 10]
    assert [e.epoch for e in res.logs] == list(range(1, 11))


def test_lr_non_increasing():
    res = _run(epochs=12)
    lrs = [e.lr for e in res.logs]
    assert all(b <= a for a, b in zip(lrs, lrs[1:]))
    for a, b in zip(lrs, lrs[1:]):
        assert b == a or b == pytest.approx(a / 10, rel=1e-15)


def test_persist_and_log(tmp_path):
    cfg = TrainConfig(epochs=2, tile=(16, 16))
    train_fold(UNetPP(ModelConfig(base_width=2)), tiny_data(), cfg, out_dir=tmp_path)
    lines = (tmp_path / "epochs.csv").read_text().splitlines()
    assert lines[0] == "epoch,loss,lr,tpr,tnr" and len(lines) == 3
    assert (tmp_path / "model.sckp").exists()


def test_non_finite_loss_aborts_with_checkpoint(tmp_path):
    cfg = TrainConfig(epochs=2, tile=(16, 16), pos_weight=1.0)
    model = UNetPP(ModelConfig(base_width=2))
    model.heads[(0, 3)]["bias"].data[0] = np.nan
    with pytest.raises(NumericError):
        train_fold(model, tiny_data(), cfg, out_dir=tmp_path)
    assert (tmp_path / "model.sckp").exists()
