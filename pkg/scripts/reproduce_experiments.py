"""Train the four hypothesis spaces on both benchmark systems and compare them.

    python scripts/reproduce_experiments.py --out runs/repro
    python scripts/reproduce_experiments.py --systems pendulum --kinds hr nn --epochs 2000

For each system this writes the dataset, one model and loss history per kind,
and an evaluation report (error curves, Poincaré clouds) under ``--out``.
"""

from __future__ import annotations

import argparse
import json
import time
import warnings
from pathlib import Path

import numpy as np

from revsym.dynamics import generate_dataset, make_system
from revsym.evaluation import compare_report
from revsym.reversible import build_model
from revsym.training import TrainConfig, TrainingDivergedError, default_scale, split_dataset, train

SIZES = {"henon-heiles": 300, "pendulum": 100}


def run_system(name, kinds, epochs, seed, out: Path, n_cloud, n_cloud_seeds):
    system = make_system(name)
    ds = generate_dataset(system, SIZES[name], seed)
    out.mkdir(parents=True, exist_ok=True)
    ds.save(out / "data.csv")
    cfg = TrainConfig(epochs=epochs)
    _, val = split_dataset(ds, cfg.split_ratio, cfg.seed)
    models, summary = {"truth": system}, {}
    for kind in kinds:
        model = build_model(kind, seed=seed, scale=default_scale(kind, ds), meta=dict(ds.meta))
        t0 = time.perf_counter()
        try:
            fitted, hist, _ = train(model, ds, cfg)
            diverged = False
        except TrainingDivergedError as err:
            fitted, hist, diverged = model, err.history, True
        hist.save(out / f"history_{kind}.csv")
        fitted.save(out / f"model_{kind}.json")
        tl = hist.train_loss
        summary[kind] = {"initial_loss": float(tl[0]), "final_loss": float(tl[-1]),
                         "reduction": float(tl[0] / tl[-1]), "val_loss": float(hist.val_loss[-1]),
                         "diverged": diverged, "seconds": round(time.perf_counter() - t0, 1)}
        print(f"{name:13s} {kind:3s} loss {tl[0]:.3g} -> {tl[-1]:.3g} "
              f"({tl[0] / tl[-1]:.0f}x) val {hist.val_loss[-1]:.3g}"
              f"{'  DIVERGED' if diverged else ''}", flush=True)
        if not diverged:
            models[kind] = fitted
    rows = compare_report(models, system, out / "report", val_ds=val, n_cloud=n_cloud,
                          n_cloud_seeds=n_cloud_seeds)
    for row in rows:
        if row["name"] in summary:
            summary[row["name"]]["err_iter_10"] = row.get("err_iter_10")
    (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    return summary


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", type=Path, default=Path("runs/repro"))
    ap.add_argument("--systems", nargs="+", default=list(SIZES), choices=list(SIZES))
    ap.add_argument("--kinds", nargs="+", default=["nn", "r", "hr", "sn"])
    ap.add_argument("--epochs", type=int, default=TrainConfig().epochs)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--cloud-iterations", type=int, default=500)
    ap.add_argument("--cloud-seeds", type=int, default=20)
    args = ap.parse_args(argv)
    warnings.simplefilter("ignore", RuntimeWarning)
    np.set_printoptions(precision=4)
    for name in args.systems:
        run_system(name, args.kinds, args.epochs, args.seed, args.out / name,
                   args.cloud_iterations, args.cloud_seeds)


if __name__ == "__main__":
    main()
