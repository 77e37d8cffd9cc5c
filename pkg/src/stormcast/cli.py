"""``stormcast`` command line: one subcommand per pipeline stage.

Exit codes: 0 ok, 1 usage, 2 data/format, 3 numeric.  Every error goes to
stderr as ``ERROR <code>: <message>``.  ``STORMCAST_THREADS`` caps both the
BLAS thread pools and the worker pools used by preprocess and evaluate.
"""
from __future__ import annotations

import os
import sys

_THREAD_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS")


def _thread_cap() -> int | None:
    raw = os.environ.get("STORMCAST_THREADS", "").strip()
    if not raw:
        return None
    if not raw.isdigit() or int(raw) < 1:
        raise ValueError(f"STORMCAST_THREADS must be a positive integer, got {raw!r}")
    return int(raw)


try:
    _CAP = _thread_cap()
except ValueError:
    _CAP = None  # reported by main()
if _CAP is not None and "numpy" not in sys.modules:
    for _v in _THREAD_VARS:
        os.environ.setdefault(_v, str(_CAP))

import argparse  # noqa: E402
import json  # noqa: E402
from concurrent.futures import ThreadPoolExecutor  # noqa: E402
from dataclasses import asdict  # noqa: E402
from datetime import timedelta  # noqa: E402
from pathlib import Path  # noqa: E402

import numpy as np  # noqa: E402

from .autograd import ShapeError  # noqa: E402
from .data_io import (  # noqa: E402
    DataError,
    apply_config,
    load_checkpoint,
    read_config,
    read_events,
    read_raster,
    read_samples,
    read_stamped,
    write_raster,
    write_samples,
)
from .training import NumericError  # noqa: E402

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def workers() -> int:
    """Worker count for thread pools: STORMCAST_THREADS, else the CPU count."""
    cap = _thread_cap()
    return cap if cap is not None else (os.cpu_count() or 1)


def _emit(obj) -> None:
    print(json.dumps(obj, sort_keys=True, default=float))


def _config(obj, path):
    if path is None:
        return obj
    try:
        return apply_config(obj, read_config(path))
    except OSError as exc:
        raise DataError(f"cannot read config {path}: {exc}") from None
    except (ValueError, TypeError) as exc:
        raise UsageError(f"config {path}: {exc}") from None


def _override(obj, **values):
    try:
        return apply_config(obj, {k: str(v) for k, v in values.items() if v is not None})
    except (ValueError, TypeError) as exc:
        raise UsageError(str(exc)) from None


def _tile(text: str) -> tuple[int, int]:
    try:
        h, w = (int(v) for v in text.lower().replace(",", "x").split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"tile must look like 144x160, got {text!r}") from None
    return h, w


# ---------------------------------------------------------------------------
# subcommands


def cmd_synth(args) -> int:
    from .synth import SynthConfig, gen_sequence, positive_fraction, write_sequence

    cfg = _config(SynthConfig(), args.config)
    cfg = _override(cfg, seed=args.seed)
    seq = gen_sequence(cfg)
    write_sequence(seq, args.out_dir)
    _emit({"frames": len(seq.frames), "events": len(seq.events), "positive_fraction": positive_fraction(seq)})
    return EXIT_OK


def cmd_preprocess(args) -> int:
    from .flow import FlowParams
    from .preprocess import build_samples, compute_norm_stats

    params = _config(FlowParams(), args.config)
    times, frames = read_stamped(args.frames_dir)
    if len({f.shape for f in frames}) != 1:
        raise DataError(f"{args.frames_dir}: frames differ in shape")
    events = read_events(args.events, frames[0].shape[1:])
    samples = build_samples(times, frames, events, params, workers=workers())
    if not samples:
        raise DataError("no frame has both T-15 and T-30 predecessors; nothing to preprocess")
    write_samples(args.out_dir, samples)
    stats = compute_norm_stats([s.raw for s in samples])
    if args.stats_out:
        Path(args.stats_out).write_text(json.dumps(stats.to_dict(), indent=1) + "\n")
    pos = float(np.mean([s.target.mean() for s in samples]))
    _emit({"samples": len(samples), "skipped": len(frames) - len(samples), "positive_fraction": pos})
    return EXIT_OK


def cmd_flow(args) -> int:
    from .flow import FlowParams, tvl1_flow

    params = _config(FlowParams(), args.config)
    i0, i1 = read_raster(args.i0), read_raster(args.i1)
    for name, r in (("i0", i0), ("i1", i1)):
        if not 0 <= args.channel < r.shape[0]:
            raise UsageError(f"--channel {args.channel} out of range for {name} with {r.shape[0]} channels")
    f = tvl1_flow(i0[args.channel], i1[args.channel], params)
    write_raster(args.out, f.stack())
    mag = f.magnitude()
    _emit({"mean_magnitude": float(mag.mean()), "max_magnitude": float(mag.max())})
    return EXIT_OK


def _load_set(data_dir):
    from .training import SampleSet

    ts, raw, targets = read_samples(data_dir)
    return SampleSet(ts, raw, targets)


def _fold(data, fold: int, n_folds: int, margin_hours: float):
    from .training import make_folds

    if not 1 <= fold <= n_folds:
        raise UsageError(f"--fold must be in 1..{n_folds}, got {fold}")
    try:
        return make_folds(data.timestamps, n_folds, timedelta(hours=margin_hours))[fold - 1]
    except ValueError as exc:
        raise DataError(str(exc)) from None


def cmd_train(args) -> int:
    from .model import ModelConfig, UNetPP
    from .training import TrainConfig, train_fold

    cfg = _config(TrainConfig(), args.config)
    cfg = _override(cfg, epochs=args.epochs)
    if not 1 <= args.fold <= cfg.n_folds:
        raise UsageError(f"--fold must be in 1..{cfg.n_folds}, got {args.fold}")
    data = _load_set(args.data_dir)
    spec = _fold(data, args.fold, cfg.n_folds, cfg.margin_hours)
    model = UNetPP(ModelConfig(args.variant, args.base_width, seed=cfg.seed))
    res = train_fold(model, data, cfg, spec, out_dir=args.out_dir,
                     on_epoch=lambda e: print(json.dumps({k: v for k, v in asdict(e).items() if v is not None}),
                                              file=sys.stderr) if args.verbose else None)
    last = res.logs[-1]
    _emit({"fold": args.fold, "variant": args.variant, "epochs": len(res.logs), "final_loss": last.loss,
           "final_lr": last.lr, "tpr": last.tpr, "tnr": last.tnr, "pos_weight": res.pos_weight})
    return EXIT_OK


def _evaluate_one(checkpoint, fold, data, threshold, tile):
    from .evaluation import confuse, metrics
    from .training import predict_frames

    model, stats, header = load_checkpoint(checkpoint)
    if stats is None:
        raise DataError(f"{checkpoint}: checkpoint carries no normalization statistics")
    tc = header.get("train_config", {})
    spec = _fold(data, fold, int(tc.get("n_folds", 4)), float(tc.get("margin_hours", 12.0)))
    _, test_idx = spec.split(data.timestamps)
    if not test_idx:
        raise DataError(f"fold {fold} has no test frames")
    tile = tile or tuple(tc.get("tile", (144, 160)))
    probs = predict_frames(model, data.raw[test_idx], stats, tile)
    truth = data.targets[test_idx]
    return header["variant"], probs, truth, metrics(confuse(probs, truth, threshold), threshold)


def cmd_evaluate(args) -> int:
    from .evaluation import confuse, emit_report, metrics

    folds = args.fold or [1]
    if len(folds) != len(args.checkpoint):
        raise UsageError("give one --fold per --checkpoint")
    data = _load_set(args.data_dir)
    jobs = list(zip(args.checkpoint, folds))
    with ThreadPoolExecutor(min(workers(), len(jobs))) as pool:
        results = list(pool.map(lambda j: _evaluate_one(j[0], j[1], data, args.threshold, args.tile), jobs))
    per_variant: dict = {}
    for variant, _, _, rep in results:
        per_variant.setdefault(variant, []).append(rep)
    totals = emit_report(per_variant, args.report, args.plot_data, args.factor)
    out = {v: {k: getattr(r, k) for k in ("tpr", "tnr", "accuracy", "far", "precision", "tp", "fp", "fn", "tn")}
           for v, r in totals.items()}
    if args.sweep:
        out["sweep"] = []
        for thr in args.sweep:
            for variant, probs, truth, _ in results:
                r = metrics(confuse(probs, truth, thr), thr)
                out["sweep"].append({"variant": variant, "threshold": thr, "tpr": r.tpr, "tnr": r.tnr, "far": r.far})
    _emit(out)
    return EXIT_OK


def cmd_predict(args) -> int:
    from .training import predict_frames

    model, stats, header = load_checkpoint(args.checkpoint)
    if stats is None:
        raise DataError(f"{args.checkpoint}: checkpoint carries no normalization statistics")
    raw = read_raster(args.input)
    if raw.shape[0] != model.config.in_channels:
        raise DataError(f"{args.input}: expected {model.config.in_channels} feature channels, got {raw.shape[0]}")
    tile = args.tile or tuple(header.get("train_config", {}).get("tile", (144, 160)))
    probs = predict_frames(model, raw[None], stats, tile)[0]
    if not np.all(np.isfinite(probs)):
        raise NumericError("prediction produced non-finite probabilities")
    out = (probs >= args.threshold).astype(np.float32) if args.threshold is not None else probs
    write_raster(args.out, out[None])
    _emit({"pixels": int(probs.size), "mean_probability": float(probs.mean()),
           "positive_pixels": int((probs >= (args.threshold if args.threshold is not None else 0.5)).sum())})
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .checks import format_table, gradient_suite

    results = gradient_suite(args.seed)
    print(format_table(results))
    failed = [r.name for r in results if not r.ok]
    if failed:
        raise NumericError(f"gradient check failed for: {', '.join(failed)}")
    return EXIT_OK


def _read_report_rows(path):
    import csv

    from .evaluation import ConfusionMatrix, metrics

    try:
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from None
    out = []
    for row in rows:
        if row.get("fold") == "all":
            continue
        try:
            cm = ConfusionMatrix(*(float(row[k]) for k in ("tp", "fp", "fn", "tn")))
            out.append((row["variant"], metrics(cm, float(row["threshold"]))))
        except (KeyError, ValueError) as exc:
            raise DataError(f"{path}: malformed report row ({exc})") from None
    return out


def cmd_report(args) -> int:
    from .evaluation import emit_report

    per_variant: dict = {}
    for path in args.reports:
        for variant, rep in _read_report_rows(path):
            per_variant.setdefault(variant, []).append(rep)
    if not per_variant:
        raise DataError("no per-fold rows found in the given reports")
    totals = emit_report(per_variant, args.out, args.plot_data, args.factor)
    _emit({v: {"tpr": r.tpr, "tnr": r.tnr, "accuracy": r.accuracy, "far": r.far, "folds": len(per_variant[v])}
           for v, r in totals.items()})
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="stormcast", description="Lightning nowcasting from optical-flow extrapolation errors.")
    sub = p.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)

    s = sub.add_parser("synth", help="generate a synthetic storm sequence (frames + events)")
    s.add_argument("--config", help="key = value file overriding SynthConfig fields")
    s.add_argument("--out-dir", required=True, help="writes frames/<stamp>.scr and events.csv here")
    s.add_argument("--seed", type=int, help="override the config seed")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("preprocess", help="compute raw 10-channel feature stacks and targets")
    s.add_argument("--frames-dir", required=True, help="directory of 9-channel <stamp>.scr frames")
    s.add_argument("--events", required=True, help="lightning event CSV (timestamp,row,col)")
    s.add_argument("--out-dir", required=True, help="writes features/ and targets/ rasters here")
    s.add_argument("--stats-out", help="JSON file for min/max statistics over all samples")
    s.add_argument("--config", help="key = value file overriding flow solver parameters")
    s.set_defaults(func=cmd_preprocess)

    s = sub.add_parser("flow", help="TV-L1 optical flow between two rasters")
    s.add_argument("--i0", required=True, help="first raster")
    s.add_argument("--i1", required=True, help="second raster")
    s.add_argument("--out", required=True, help="2-channel raster (u = columns, v = rows)")
    s.add_argument("--channel", type=int, default=0, help="channel of multi-channel inputs (default 0)")
    s.add_argument("--config", help="key = value file overriding flow solver parameters")
    s.set_defaults(func=cmd_flow)

    s = sub.add_parser("train", help="train one cross-validation fold")
    s.add_argument("--data-dir", required=True, help="preprocessed directory (features/, targets/)")
    s.add_argument("--fold", type=int, required=True, help="test fold, 1..n_folds")
    s.add_argument("--variant", choices=("runetpp", "unetpp"), default="runetpp", help="network variant")
    s.add_argument("--base-width", type=int, default=16, help="depth-0 width (default 16)")
    s.add_argument("--config", help="key = value file overriding TrainConfig fields")
    s.add_argument("--epochs", type=int, help="override the number of epochs")
    s.add_argument("--out-dir", required=True, help="writes model.sckp and epochs.csv here")
    s.add_argument("--verbose", action="store_true", help="print each epoch log to stderr")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("evaluate", help="verification metrics of checkpoints on their test folds")
    s.add_argument("--checkpoint", action="append", required=True, help="checkpoint file (repeatable)")
    s.add_argument("--data-dir", required=True, help="preprocessed directory")
    s.add_argument("--fold", type=int, action="append", help="fold of each checkpoint (repeatable, default 1)")
    s.add_argument("--threshold", type=float, default=0.5, help="probability threshold (default 0.5)")
    s.add_argument("--sweep", type=float, nargs="+", help="also report TPR/TNR/FAR at these thresholds")
    s.add_argument("--tile", type=_tile, help="tile size HxW (default: from the checkpoint)")
    s.add_argument("--factor", type=float, default=1500.0, help="negative re-weighting factor")
    s.add_argument("--report", help="CSV with per-fold and aggregated metrics")
    s.add_argument("--plot-data", help="TSV of (metric, variant, value)")
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("predict", help="lightning probability map for one feature raster")
    s.add_argument("--checkpoint", required=True, help="checkpoint file")
    s.add_argument("--input", required=True, help="10-channel raw feature raster")
    s.add_argument("--out", required=True, help="1-channel probability raster")
    s.add_argument("--threshold", type=float, help="write a binary mask at this threshold instead")
    s.add_argument("--tile", type=_tile, help="tile size HxW (default: from the checkpoint)")
    s.set_defaults(func=cmd_predict)

    s = sub.add_parser("gradcheck", help="finite-difference check of every layer and the network")
    s.add_argument("--seed", type=int, default=0, help="seed for shapes and values")
    s.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("report", help="aggregate per-fold evaluation CSVs")
    s.add_argument("--reports", nargs="+", required=True, help="CSV files written by evaluate")
    s.add_argument("--out", help="aggregated CSV")
    s.add_argument("--plot-data", help="TSV of (metric, variant, value)")
    s.add_argument("--factor", type=float, default=1500.0, help="negative re-weighting factor")
    s.set_defaults(func=cmd_report)
    return p


def _fail(code: int, message: str) -> int:
    print(f"ERROR {code}: {message}", file=sys.stderr)
    return code


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        _thread_cap()
        args = parser.parse_args(argv)
        if getattr(args, "func", None) is None:
            raise UsageError("a subcommand is required; see stormcast --help")
        return args.func(args)
    except UsageError as exc:
        return _fail(EXIT_USAGE, str(exc))
    except DataError as exc:
        return _fail(EXIT_DATA, f"[{exc.code}] {exc}")
    except (NumericError, FloatingPointError) as exc:
        return _fail(EXIT_NUMERIC, str(exc))
    except (ShapeError, OSError) as exc:
        return _fail(EXIT_DATA, str(exc))
    except ValueError as exc:
        msg = str(exc)
        if msg.startswith("STORMCAST_THREADS"):
            return _fail(EXIT_USAGE, msg)
        return _fail(EXIT_DATA, msg)


if __name__ == "__main__":
    sys.exit(main())
