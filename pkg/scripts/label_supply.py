"""How many windows of each class a simulated series yields.

    python scripts/label_supply.py --n-bars 1000000 --seeds 0 1 2 [--key=value ...]

Useful for checking that a GBM/labeller setting can meet the split quotas
before launching a long search.
"""
from __future__ import annotations

import argparse

import numpy as np

from gafcnn.gbm import simulate_bars
from gafcnn.harness import ExperimentConfig, _coerce, config_types
from gafcnn.labeling import N_CLASSES, PatternClass, label_series


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--n-bars", type=int, default=1_000_000)
    ap.add_argument("--seeds", type=int, nargs="+", default=[0])
    ap.add_argument("overrides", nargs="*", help="ExperimentConfig fields as key=value")
    args = ap.parse_args(argv)
    types = config_types()
    changes = {}
    for item in args.overrides:
        key, _, value = item.lstrip("-").partition("=")
        changes[key] = _coerce(value, types[key])
    cfg = ExperimentConfig(n_bars=args.n_bars, **changes)
    q = cfg.quota()
    needed = [q.train[c] * (cfg.class0_weight if c == 0 else 1) + q.validation[c] + q.test[c]
              for c in range(N_CLASSES)]
    print(f"{'class':18s}" + "".join(f"{'seed ' + str(s):>12s}" for s in args.seeds) + f"{'needed':>10s}")
    counts = []
    for seed in args.seeds:
        _, labels = label_series(simulate_bars(cfg.replace(data_seed=seed).gbm_params(), cfg.n_bars),
                                 cfg.labeler_config())
        counts.append(np.bincount(labels, minlength=N_CLASSES))
    for c in range(N_CLASSES):
        print(f"{PatternClass(c).name:18s}" + "".join(f"{int(k[c]):12d}" for k in counts) + f"{needed[c]:10d}")


if __name__ == "__main__":
    main()
