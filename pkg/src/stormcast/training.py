"""Weighted-BCE deep-supervised training with a plateau learning-rate schedule.

Also builds the temporal cross-validation folds: four equal test ranges
separated by exclusion margins, each trained on everything at least one
margin away from its test range.
"""
from __future__ import annotations

import csv
import dataclasses
import logging
from dataclasses import dataclass, field
from datetime import datetime, timedelta
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .autograd import Tensor, add, custom_op, no_grad
from .evaluation import confuse, metrics
from .model import ModelConfig, UNetPP, decays
from .preprocess import DEFAULT_TILE, STEP, NormStats, compute_norm_stats, normalize, tile_frame

log = logging.getLogger(__name__)


class NumericError(RuntimeError):
    """Non-finite loss or gradient during training."""


@dataclass
class TrainConfig:
    epochs: int = 30
    lr0: float = 0.01
    lr_drop_factor: float = 10.0
    plateau_window: int = 5
    plateau_threshold: float = 0.01
    weight_decay: float = 0.1
    frames_per_batch: int = 2  # 2 frames x 56 tiles = 112 samples
    tile: tuple[int, int] = DEFAULT_TILE
    pos_weight: float = 0.0  # 0: derive from training targets
    margin_hours: float = 12.0
    n_folds: int = 4
    eval_every: int = 5
    threshold: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if min(self.epochs, self.lr0, self.lr_drop_factor, self.plateau_window, self.frames_per_batch,
               self.margin_hours, self.n_folds, self.eval_every) <= 0:
            raise ValueError("training hyperparameters must be positive")
        if self.weight_decay < 0 or self.pos_weight < 0:
            raise ValueError("weight_decay and pos_weight must be non-negative")


# ---------------------------------------------------------------------------
# loss


def _softplus(x: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, x)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def weighted_bce(logits: Tensor, targets: np.ndarray, pos_weight: float) -> Tensor:
    """Mean of -(p*y*log s(x) + (1-y)*log(1 - s(x))) over all pixels.

    Uses log s(x) = -softplus(-x) and log(1 - s(x)) = -softplus(x), so no
    log(0) is ever formed.
    """
    y = np.asarray(targets, dtype=np.float64)
    if y.shape != logits.shape:
        raise ValueError(f"target shape {y.shape} != logits shape {logits.shape}")
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("targets must be 0 or 1")
    if pos_weight <= 0:
        raise ValueError("pos_weight must be positive")
    x = logits.data
    n = x.size
    loss = np.mean(pos_weight * y * _softplus(-x) + (1.0 - y) * _softplus(x))

    def bw(g):
        s = _sigmoid(x)
        return ((pos_weight * y * (s - 1.0) + (1.0 - y) * s) * (g / n),)

    return custom_op(np.asarray(loss), (logits,), bw, "weighted_bce")


def class_weight(targets: np.ndarray | Iterable[np.ndarray]) -> float:
    """#negative / #positive pixels over the training targets."""
    if isinstance(targets, np.ndarray):
        targets = [targets]
    pos = neg = 0
    for t in targets:
        k = int(np.count_nonzero(np.asarray(t) > 0.5))
        pos += k
        neg += np.asarray(t).size - k
    if pos == 0:
        raise ValueError("no positive pixels in the training targets; the positive-class "
                         "weight is undefined (extend the training period or set pos_weight)")
    return neg / pos


def deep_loss(heads: Mapping[str, Tensor], target: np.ndarray, pos_weight: float) -> Tensor:
    """Sum of the weighted BCE of every supervised head."""
    if len(heads) != 3:
        raise ValueError(f"deep supervision needs three heads, got {sorted(heads)}")
    total = None
    for name in sorted(heads):
        term = weighted_bce(heads[name], target, pos_weight)
        total = term if total is None else add(total, term)
    return total


# ---------------------------------------------------------------------------
# optimizer and schedule


def sgd_step(named_params: Iterable[tuple[str, Tensor]], lr: float, weight_decay: float) -> None:
    """w <- w - lr * (g + wd * w), weight decay on conv weights only."""
    named_params = list(named_params)
    for name, p in named_params:
        if p.grad is not None and not np.all(np.isfinite(p.grad)):
            raise NumericError(f"non-finite gradient in {name}")
    for name, p in named_params:
        g = np.zeros_like(p.data) if p.grad is None else p.grad
        if weight_decay and decays(name):
            g = g + weight_decay * p.data
        p.data -= lr * g


def plateau_lr(history: Sequence[float], lr: float, window: int = 5, threshold: float = 0.01,
               factor: float = 10.0) -> float:
    """Drop lr by ``factor`` when the best loss of the last ``window`` epochs
    improves on the best earlier loss by less than ``threshold`` (relative)."""
    if len(history) < window + 1:
        return lr
    b_prev = min(history[:-window])
    b_rec = min(history[-window:])
    if b_prev <= 0:
        return lr
    return lr / factor if (b_prev - b_rec) / b_prev < threshold else lr


# ---------------------------------------------------------------------------
# folds


@dataclass(frozen=True)
class FoldSpec:
    fold: int
    test_start: datetime
    test_end: datetime
    margin: timedelta
    data_start: datetime
    data_end: datetime

    @property
    def train_ranges(self) -> list[tuple[datetime, datetime]]:
        ranges = []
        if self.test_start - self.margin >= self.data_start:
            ranges.append((self.data_start, self.test_start - self.margin))
        if self.test_end + self.margin <= self.data_end:
            ranges.append((self.test_end + self.margin, self.data_end))
        return ranges

    def is_test(self, t: datetime) -> bool:
        return self.test_start <= t <= self.test_end

    def is_train(self, t: datetime) -> bool:
        return t <= self.test_start - self.margin or t >= self.test_end + self.margin

    def split(self, timestamps: Sequence[datetime]) -> tuple[list[int], list[int]]:
        train = [k for k, t in enumerate(timestamps) if self.is_train(t)]
        test = [k for k, t in enumerate(timestamps) if self.is_test(t)]
        return train, test


def make_folds(timestamps: Sequence[datetime], n_folds: int = 4, margin: timedelta = timedelta(hours=12),
               cadence: timedelta = STEP) -> list[FoldSpec]:
    """Equal-length test ranges separated by ``margin``, snapped to ``cadence``.

    The last range ends at the last timestamp.
    """
    if not timestamps:
        raise ValueError("empty timeline")
    t0, t1 = min(timestamps), max(timestamps)
    span = t1 - t0
    if span < 4 * margin:
        raise ValueError(f"timeline of {span} is shorter than 4 x margin ({4 * margin})")
    length = (span - (n_folds - 1) * margin) / n_folds
    length = (length // cadence) * cadence
    folds = []
    for k in range(n_folds):
        start = t0 + k * (length + margin)
        end = t1 if k == n_folds - 1 else start + length
        folds.append(FoldSpec(k + 1, start, end, margin, t0, t1))
    return folds


# ---------------------------------------------------------------------------
# data and loop


@dataclass
class SampleSet:
    """Per-frame raw features [N,10,H,W], binary targets [N,H,W] and timestamps."""

    timestamps: list[datetime]
    raw: np.ndarray
    targets: np.ndarray

    def subset(self, idx: Sequence[int]) -> "SampleSet":
        idx = list(idx)
        return SampleSet([self.timestamps[k] for k in idx], self.raw[idx], self.targets[idx])

    def __len__(self) -> int:
        return len(self.timestamps)


def tiles_of(frames: np.ndarray, tile: tuple[int, int]) -> np.ndarray:
    """[N,C,H,W] -> [N, n_tiles, C, th, tw]."""
    return np.stack([tile_frame(f, tile)[0] for f in frames])


@dataclass
class EpochLog:
    epoch: int
    loss: float
    lr: float
    tpr: float | None = None
    tnr: float | None = None


@dataclass
class TrainResult:
    model: UNetPP
    logs: list[EpochLog]
    norm_stats: NormStats
    pos_weight: float
    fold: FoldSpec | None = None
    train_idx: list[int] = field(default_factory=list)
    test_idx: list[int] = field(default_factory=list)


def evaluate_tiles(model: UNetPP, x: np.ndarray, y: np.ndarray, threshold: float = 0.5):
    """Inference-head confusion counts over tiles x [B,10,h,w], y [B,1,h,w]."""
    return confuse(model.predict_proba(x), y, threshold)


def _snapshot(model: UNetPP) -> list[np.ndarray]:
    arrays = [t.data.copy() for t in model.parameters()]
    for _, st in model.batchnorm_states():
        arrays += [st.running_mean.copy(), st.running_var.copy(), np.asarray(st.num_batches_tracked)]
    return arrays


def _restore(model: UNetPP, arrays: list[np.ndarray]) -> None:
    it = iter(arrays)
    for t in model.parameters():
        t.data[...] = next(it)
    for _, st in model.batchnorm_states():
        st.running_mean = next(it)
        st.running_var = next(it)
        st.num_batches_tracked = int(next(it))


def train_fold(model: UNetPP, data: SampleSet, config: TrainConfig, fold: FoldSpec | None = None,
               out_dir: str | Path | None = None,
               on_epoch: Callable[[EpochLog], None] | None = None) -> TrainResult:
    """Train ``model`` on the training part of ``fold`` (all data if None).

    Normalization statistics and the positive-class weight come from the
    training frames only.  Batches hold every tile of ``frames_per_batch``
    consecutive frames; the order of those frame groups is reshuffled every
    epoch from ``config.seed``.  Test TPR/TNR are logged every
    ``eval_every`` epochs when the fold has test frames.
    """
    if fold is None:
        train_idx, test_idx = list(range(len(data))), []
    else:
        train_idx, test_idx = fold.split(data.timestamps)
    if not train_idx:
        raise ValueError("fold has no training frames")
    train = data.subset(train_idx)
    stats = compute_norm_stats([train.raw])
    pos_weight = config.pos_weight or class_weight(train.targets)

    x_tr = tiles_of(normalize(train.raw, stats), config.tile)
    y_tr = tiles_of(train.targets[:, None], config.tile)
    if test_idx:
        test = data.subset(test_idx)
        x_te = tiles_of(normalize(test.raw, stats), config.tile).reshape((-1, 10) + tuple(config.tile))
        y_te = tiles_of(test.targets[:, None], config.tile).reshape((-1, 1) + tuple(config.tile))

    fpb = config.frames_per_batch
    groups = [list(range(k, min(k + fpb, len(train)))) for k in range(0, len(train), fpb)]
    rng = np.random.default_rng(config.seed)
    named = list(model.named_parameters())
    lr = config.lr0
    history: list[float] = []
    logs: list[EpochLog] = []
    last_drop = 0
    last_good = _snapshot(model)

    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(len(groups))
        losses = []
        for gi in order:
            g = groups[gi]
            xb = x_tr[g].reshape((-1,) + x_tr.shape[2:])
            yb = y_tr[g].reshape((-1,) + y_tr.shape[2:])
            model.zero_grad()
            loss = deep_loss(model(Tensor(xb), training=True), yb, pos_weight)
            value = float(loss.data)
            try:
                if not np.isfinite(value):
                    raise NumericError(f"non-finite loss at epoch {epoch}")
                loss.backward()
                sgd_step(named, lr, config.weight_decay)
            except NumericError:
                _restore(model, last_good)
                if out_dir is not None:
                    _persist(out_dir, model, stats, config, logs, pos_weight)
                raise
            losses.append(value)
        epoch_loss = float(np.mean(losses))
        history.append(epoch_loss)
        entry = EpochLog(epoch, epoch_loss, lr)
        if test_idx and epoch % config.eval_every == 0:
            rep = metrics(evaluate_tiles(model, x_te, y_te, config.threshold))
            entry.tpr, entry.tnr = rep.tpr, rep.tnr
        logs.append(entry)
        if on_epoch is not None:
            on_epoch(entry)
        log.info("epoch %d loss %.5f lr %g", epoch, epoch_loss, lr)
        last_good = _snapshot(model)
        # a new drop needs a full window of epochs at the current rate
        if epoch - last_drop >= config.plateau_window:
            new_lr = plateau_lr(history, lr, config.plateau_window, config.plateau_threshold, config.lr_drop_factor)
            if new_lr != lr:
                lr, last_drop = new_lr, epoch

    if out_dir is not None:
        _persist(out_dir, model, stats, config, logs, pos_weight)
    return TrainResult(model, logs, stats, pos_weight, fold, train_idx, test_idx)


def train(data: SampleSet, config: TrainConfig, model_config: ModelConfig,
          folds: Sequence[int] | None = None, out_dir: str | Path | None = None) -> list[TrainResult]:
    """Cross-validation: a fresh model per requested fold (all folds by default)."""
    specs = make_folds(data.timestamps, config.n_folds, timedelta(hours=config.margin_hours))
    wanted = folds or [f.fold for f in specs]
    results = []
    for spec in specs:
        if spec.fold not in wanted:
            continue
        sub = None if out_dir is None else Path(out_dir) / f"fold{spec.fold}"
        results.append(train_fold(UNetPP(model_config), data, config, spec, sub))
    return results


def write_epoch_log(path: str | Path, logs: Sequence[EpochLog]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "loss", "lr", "tpr", "tnr"])
        for e in logs:
            w.writerow([e.epoch, repr(e.loss), repr(e.lr),
                        "" if e.tpr is None else repr(e.tpr), "" if e.tnr is None else repr(e.tnr)])


def _persist(out_dir, model, stats, config, logs, pos_weight) -> None:
    from .data_io import save_checkpoint

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfg = dataclasses.asdict(config)
    cfg["pos_weight_used"] = pos_weight
    save_checkpoint(out / "model.sckp", model, stats, cfg)
    write_epoch_log(out / "epochs.csv", logs)


def predict_frames(model: UNetPP, raw: np.ndarray, stats: NormStats, tile: tuple[int, int]) -> np.ndarray:
    """Full-frame probabilities [N,H,W]: tile, infer the final head, stitch by max."""
    from .preprocess import stitch_predictions

    out = []
    with no_grad():
        for frame in normalize(raw, stats):
            tiles, index = tile_frame(frame, tile)
            probs = model.predict_proba(tiles)
            out.append(stitch_predictions(probs, index, frame.shape[1:])[0])
    return np.stack(out)
