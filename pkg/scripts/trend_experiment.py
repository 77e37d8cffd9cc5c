"""Convergence trend: epochs until test TPR >= 0.5 for runetpp vs unetpp.

Both variants share data, width and seeds.  The check is reported, not
enforced: the expected ordering depends on the dataset.

    python3 scripts/trend_experiment.py --seeds 0 1 2
"""
from __future__ import annotations

import argparse
import json
from datetime import timedelta

from _common import synthetic_samples

from stormcast.model import ModelConfig, UNetPP
from stormcast.training import TrainConfig, make_folds, train_fold


class _Reached(Exception):
    pass


def epochs_to(data, variant: str, seed: int, width: int, target: float, max_epochs: int) -> int:
    cfg = TrainConfig(epochs=max_epochs, tile=(16, 16), margin_hours=1.0, eval_every=1, seed=seed)
    fold = make_folds(data.timestamps, cfg.n_folds, timedelta(hours=cfg.margin_hours))[0]

    def stop(e):
        if e.tpr is not None and e.tpr >= target:
            raise _Reached(e.epoch)

    try:
        train_fold(UNetPP(ModelConfig(variant, width, seed=seed)), data, cfg, fold, on_epoch=stop)
    except _Reached as hit:
        return hit.args[0]
    return max_epochs + 1


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--base-width", type=int, default=8)
    ap.add_argument("--target", type=float, default=0.5)
    ap.add_argument("--max-epochs", type=int, default=15)
    ap.add_argument("--workers", type=int, default=1)
    args = ap.parse_args()

    data = synthetic_samples(0, args.workers)
    rows = []
    for s in args.seeds:
        r = epochs_to(data, "runetpp", s, args.base_width, args.target, args.max_epochs)
        u = epochs_to(data, "unetpp", s, args.base_width, args.target, args.max_epochs)
        rows.append({"seed": s, "runetpp": r, "unetpp": u})
        print(json.dumps(rows[-1]), flush=True)
    wins = sum(r["runetpp"] <= r["unetpp"] for r in rows)
    print(json.dumps({"runetpp_not_slower": wins, "seeds": len(rows)}))


if __name__ == "__main__":
    main()
