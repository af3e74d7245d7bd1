"""Command-line entry point: ``python -m gafcnn <subcommand>``.

Every ExperimentConfig field is available as ``--field-name`` and in a
``--config`` key-value file; flags override the file. Failures exit nonzero
and print a JSON object ``{"error": <category>, "message": ...}`` on stderr.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

from gafcnn.errors import ConfigError, FormatError, GafCnnError
from gafcnn.gasf import write_pgm
from gafcnn.gbm import simulate_bars
from gafcnn.harness import (CLASS_NAMES, ConfusionMatrix, ExperimentConfig, arch_search, config_types,
                            dump_tensors, encode_dataset, evaluate, load_config, load_series,
                            load_tensors, metrics, parse_config_text, prepare_dataset, report_json,
                            run_experiment)
from gafcnn.labeling import SPLITS, Dataset, dump_dataset, load_dataset
from gafcnn.market import FeatureSet, format_csv
from gafcnn.nn import batch_loss, read_checkpoint, save_checkpoint, train

log = logging.getLogger("gafcnn")


def _bool(text: str) -> bool:
    return parse_config_text(f"strict_engulfing = {text}")["strict_engulfing"]


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key = value file with ExperimentConfig fields")
    conv = {"int": int, "float": float, "bool": _bool, "str": str}
    for name, typ in config_types().items():
        p.add_argument("--" + name.replace("_", "-"), dest=name, type=conv[typ], default=None)


def _config(args) -> ExperimentConfig:
    overrides = {name: getattr(args, name) for name in config_types()}
    if args.config:
        return load_config(args.config, **overrides)
    return ExperimentConfig(**{k: v for k, v in overrides.items() if v is not None})


def _load_data(path: str) -> tuple[FeatureSet, dict]:
    """Tensors from either a tensor file or a dataset file (encoded on the fly)."""
    text = Path(path).read_text(encoding="utf-8")
    first = json.loads(text.split("\n", 1)[0] or "{}")
    if first.get("format") == "gafcnn-tensors":
        return load_tensors(text)
    ds = load_dataset(text)
    return ds.feature_set, encode_dataset(ds)


def _write(path: str | None, content: str) -> None:
    if path in (None, "-"):
        sys.stdout.write(content)
    else:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(content, encoding="utf-8")


def cmd_simulate(args):
    cfg = _config(args)
    ts, ohlc = simulate_bars(cfg.gbm_params(), cfg.n_bars)
    _write(args.out, format_csv(ts, ohlc))


def cmd_label(args):
    cfg = _config(args)
    ds = prepare_dataset(cfg)
    _write(args.out, dump_dataset(ds))
    log.info("labelled split sizes %s", ds.sizes())


def cmd_encode(args):
    ds = load_dataset(Path(args.dataset).read_text(encoding="utf-8"))
    fs = FeatureSet.parse(args.feature_set or ds.feature_set)
    _write(args.out, dump_tensors(ds, fs))
    if args.pgm_dir:
        out = Path(args.pgm_dir)
        out.mkdir(parents=True, exist_ok=True)
        tensors = encode_dataset(ds, fs)
        for name in SPLITS:
            x, y = tensors[name]
            for i in range(min(len(x), args.pgm_limit)):
                for ch in range(x.shape[-1]):
                    write_pgm(x[i, :, :, ch], out / f"{name}_{i:04d}_{CLASS_NAMES[y[i]]}_c{ch}.pgm")


def cmd_train(args):
    cfg = _config(args)
    _, data = _load_data(args.data)
    model, history = train(cfg.cnn_config(), cfg.train_config(), *data["train"], *data["validation"])
    out = Path(args.out_dir or cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(model, out / "model.ckpt")
    (out / "history.csv").write_text(history.to_csv(), encoding="utf-8")
    val_loss, val_acc = batch_loss(model, *data["validation"])
    print(json.dumps({"best_epoch": history.best_epoch, "epochs_run": len(history.val_loss),
                      "val_accuracy": val_acc, "val_loss": val_loss}))


def cmd_eval(args):
    model = read_checkpoint(args.checkpoint)
    _, data = _load_data(args.data)
    x, y = data[args.split]
    if len(x) == 0:
        raise ConfigError(f"split {args.split!r} is empty")
    cm = evaluate(model, x, y)
    report = {"split": args.split, "metrics": metrics(cm).to_dict(), "confusion_matrix": cm.counts.tolist()}
    if args.out_dir:
        out = Path(args.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "confusion.csv").write_text(cm.to_csv(), encoding="utf-8")
        (out / "metrics.json").write_text(report_json(report), encoding="utf-8")
    sys.stdout.write(report_json(report))


def cmd_run(args):
    res = run_experiment(_config(args))
    sys.stdout.write(report_json(res.report))


def cmd_search(args):
    cfg = _config(args)

    def progress(row):
        log.info("run %s seed %s: %s", row["run"], row["seed"],
                 row.get("error") or f"val {row['val_accuracy']:.4f} test {row['test_accuracy']:.4f}")

    summary = arch_search(cfg, args.runs, progress=progress)
    sys.stdout.write(report_json({"completed": len(summary.completed), "failed": len(summary.failed),
                                  "best": summary.best}))
    if summary.best is None:
        raise GafCnnError("every search run failed")


def cmd_report(args):
    if args.run_dir:
        path = Path(args.run_dir) / "confusion.csv"
    elif args.confusion:
        path = Path(args.confusion)
    else:
        raise ConfigError("give --confusion or --run-dir")
    if not path.exists():
        raise FormatError(f"{path} not found")
    cm = ConfusionMatrix.from_csv(path.read_text(encoding="utf-8"))
    sys.stdout.write(report_json(metrics(cm).to_dict()))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gafcnn", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="write a simulated GBM bar CSV")
    _add_config_flags(p)
    p.add_argument("--out", default="-")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("label", help="label windows and write a dataset file")
    _add_config_flags(p)
    p.add_argument("--out", default="-")
    p.set_defaults(func=cmd_label)

    p = sub.add_parser("encode", help="GASF-encode a dataset file")
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", default="-")
    p.add_argument("--feature-set", choices=[f.value for f in FeatureSet])
    p.add_argument("--pgm-dir", help="also write per-channel PGM previews here")
    p.add_argument("--pgm-limit", type=int, default=10, help="previews per split")
    p.set_defaults(func=cmd_encode)

    p = sub.add_parser("train", help="train on a dataset or tensor file")
    _add_config_flags(p)
    p.add_argument("--data", required=True)
    p.add_argument("--out-dir")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="confusion matrix of a checkpoint on one split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", choices=SPLITS, default="test")
    p.add_argument("--out-dir")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("run", help="one end-to-end experiment")
    _add_config_flags(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("search", help="seeded restarts; keeps the best validation accuracy")
    _add_config_flags(p)
    p.add_argument("--runs", type=int, default=100)
    p.set_defaults(func=cmd_search)

    p = sub.add_parser("report", help="metrics from a confusion-matrix CSV")
    p.add_argument("--confusion")
    p.add_argument("--run-dir")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except GafCnnError as exc:
        print(json.dumps({"error": exc.category, "message": str(exc)}), file=sys.stderr)
        return exc.exit_code
    except (OSError, ValueError) as exc:
        print(json.dumps({"error": "io" if isinstance(exc, OSError) else "value", "message": str(exc)}),
              file=sys.stderr)
        return 11 if isinstance(exc, OSError) else 12
    return 0
