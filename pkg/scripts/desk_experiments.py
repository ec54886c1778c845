"""Desk-scale training and ablation runs whose results the acceptance tests read.

    python scripts/desk_experiments.py train   --data DIR --out results/
    python scripts/desk_experiments.py ablate  --data DIR --out results/

The dataset is generated with default settings when DIR has no manifest.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import platform
import time
from dataclasses import asdict
from pathlib import Path

from anatoseg.evaluation import evaluate, run_ablation
from anatoseg.synthdata import GeneratorConfig, generate_dataset
from anatoseg.training import TrainConfig, train


def ensure_data(root: Path) -> None:
    if not (root / "manifest.jsonl").exists():
        generate_dataset(root, GeneratorConfig())


def machine() -> dict:
    return {"cpu_count": os.cpu_count(), "platform": platform.platform(), "python": platform.python_version()}


def run_train(args) -> dict:
    cfg = TrainConfig(seed=args.seed)
    t0 = time.perf_counter()
    bundle, res = train(args.data, cfg, out_dir=args.out / "train_run")
    train_s = time.perf_counter() - t0
    rep = evaluate(bundle, args.data, "test")
    return {
        "config": cfg.to_mapping(),
        "generator": asdict(GeneratorConfig()),
        "best_epoch": res["best_epoch"],
        "val_history": res["history"],
        "test_mean_dice": rep.mean_dice,
        "test_per_class_dice": rep.per_class,
        "mean_leak": rep.mean_leak,
        "mean_overlap": rep.mean_overlap,
        "train_seconds": train_s,
        "total_seconds": time.perf_counter() - t0,
        "machine": machine(),
    }


def run_ablate(args) -> dict:
    seeds = [int(s) for s in args.seeds.split(",")]
    arms = args.arms.split(",")
    t0 = time.perf_counter()
    result = run_ablation(args.data, TrainConfig(), seeds, arms, out_dir=args.out / "ablation_runs")
    summary = {arm: {k: list(v) if isinstance(v, tuple) else v for k, v in s.items()}
               for arm, s in result.summary().items()}
    return {"seeds": seeds, "arms": arms, "rows": result.rows, "summary": summary,
            "seconds": time.perf_counter() - t0, "machine": machine()}


def main() -> None:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("what", choices=["train", "ablate"])
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--out", type=Path, default=Path("results"))
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--seeds", default="0,1,2")
    p.add_argument("--arms", default="full,no-anatomy-loss")
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    args.out.mkdir(parents=True, exist_ok=True)
    ensure_data(args.data)
    out = run_train(args) if args.what == "train" else run_ablate(args)
    path = args.out / f"desk_{'training' if args.what == 'train' else 'ablation'}.json"
    path.write_text(json.dumps(out, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    print(f"wrote {path}")


if __name__ == "__main__":
    main()
