"""Paired seeds on one simulated dataset: CULR vs OHLC, and no-pool vs pool.

    python scripts/ablation.py --runs 10 --out runs/ablation [--key=value ...]

Writes ``ablation.json`` with per-run validation/test accuracy for every
variant plus the means, and prints one line per run as it goes.
"""
from __future__ import annotations

import argparse
import json
import time
from pathlib import Path

import numpy as np

from gafcnn.harness import ExperimentConfig, config_types, _coerce, encode_dataset, prepare_dataset, run_experiment

VARIANTS = {
    "culr": {},
    "ohlc": {"feature_set": "OHLC"},
    "culr_pool": {"use_max_pooling": True},
}


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--runs", type=int, default=10)
    ap.add_argument("--out", default="runs/ablation")
    ap.add_argument("--variants", default=",".join(VARIANTS))
    ap.add_argument("overrides", nargs="*", help="ExperimentConfig fields as key=value")
    args = ap.parse_args(argv)

    types = config_types()
    changes = {}
    for item in args.overrides:
        key, _, value = item.lstrip("-").partition("=")
        changes[key] = _coerce(value, types[key])
    base = ExperimentConfig(**changes)

    started = time.time()
    dataset = prepare_dataset(base)
    results = {}
    for name in args.variants.split(","):
        cfg = base.replace(**VARIANTS[name])
        tensors = encode_dataset(dataset, cfg.feature_set)
        rows = []
        for i in range(args.runs):
            run_cfg = cfg.replace(seed=base.seed + i, output_dir=str(Path(args.out) / name / f"run_{i:03d}"))
            res = run_experiment(run_cfg, dataset=dataset, tensors=tensors, write_dataset=False)
            row = {"seed": run_cfg.seed, "val_accuracy": res.val_accuracy, "val_loss": res.val_loss,
                   "test_accuracy": res.test_accuracy,
                   "pattern_accuracy": res.report["test"]["pattern_accuracy"],
                   "epochs": res.report["epochs_run"]}
            rows.append(row)
            print(f"{name:10s} seed={row['seed']:3d} val={row['val_accuracy']:.4f} "
                  f"test={row['test_accuracy']:.4f} pattern={row['pattern_accuracy']:.4f} "
                  f"epochs={row['epochs']} t={time.time() - started:.0f}s", flush=True)
        test = np.array([r["test_accuracy"] for r in rows])
        results[name] = {"runs": rows, "mean_test": float(test.mean()), "max_test": float(test.max())}
        print(f"{name}: mean test {test.mean():.4f}, max {test.max():.4f}", flush=True)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "ablation.json").write_text(json.dumps({"config": base.report_dict(), "results": results}, indent=2))


if __name__ == "__main__":
    main()
