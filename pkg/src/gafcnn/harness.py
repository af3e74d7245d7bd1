"""Experiment orchestration: data -> labels -> GASF -> CNN -> confusion matrix."""
from __future__ import annotations

import dataclasses
import json
import logging
import shutil
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from gafcnn.errors import ConfigError, FormatError, GafCnnError
from gafcnn.gasf import encode_windows
from gafcnn.gbm import MINUTE_OF_TRADING_YEAR, GbmParams, simulate_bars
from gafcnn.labeling import (SPLITS, Dataset, LabelerConfig, PatternClass, Quota, build_dataset,
                             dump_dataset)
from gafcnn.market import FeatureSet, parse_csv_arrays
from gafcnn.nn import (CnnConfig, CnnModel, TrainConfig, TrainHistory, batch_loss, dump_checkpoint,
                       predict_batch, train)

logger = logging.getLogger(__name__)

N_CLASSES = len(PatternClass)
CLASS_NAMES = [c.name for c in PatternClass]


class TrainingDiverged(GafCnnError):
    category = "diverged"
    exit_code = 10


@dataclass(frozen=True)
class ExperimentConfig:
    # data
    source: str = "simulate"          # "simulate" or a path to a bar CSV
    n_bars: int = 1_000_000
    s0: float = 1.0
    mu: float = 0.05
    sigma: float = 0.2
    dt: float = MINUTE_OF_TRADING_YEAR
    ticks_per_bar: int = 20
    data_seed: int = 0
    # labelling and sampling
    train_total: int = 2000
    validation_total: int = 400
    test_total: int = 500
    class0_weight: int = 2
    buffer_size: int = 50
    percentile: float = 70.0
    long_body: float = 1.5
    short_body: float = 0.5
    shadow_ratio: float = 2.0
    opposite_shadow_ratio: float = 0.3
    strict_engulfing: bool = False
    # model and training
    feature_set: str = "CULR"
    use_max_pooling: bool = False
    kernel_size: int = 3
    epochs: int = 300
    batch_size: int = 64
    learning_rate: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    early_stopping_patience: int = 20
    seed: int = 0
    output_dir: str = "runs/experiment"

    def __post_init__(self):
        object.__setattr__(self, "feature_set", FeatureSet.parse(self.feature_set).value)
        if min(self.train_total, self.validation_total, self.test_total) <= 0:
            raise ConfigError("split totals must be positive")
        if self.class0_weight < 1:
            raise ConfigError("class0_weight must be >= 1")

    def gbm_params(self) -> GbmParams:
        return GbmParams(self.s0, self.mu, self.sigma, self.dt, self.ticks_per_bar, self.data_seed)

    def labeler_config(self) -> LabelerConfig:
        return LabelerConfig(self.buffer_size, self.percentile, self.long_body, self.short_body,
                             self.shadow_ratio, self.opposite_shadow_ratio, self.strict_engulfing)

    def quota(self) -> Quota:
        try:
            return Quota.from_totals(self.train_total, self.validation_total, self.test_total, self.class0_weight)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    def cnn_config(self) -> CnnConfig:
        return CnnConfig(kernel_size=self.kernel_size, use_max_pooling=self.use_max_pooling)

    def train_config(self) -> TrainConfig:
        return TrainConfig(self.epochs, self.batch_size, self.learning_rate, self.beta1, self.beta2,
                           self.epsilon, self.early_stopping_patience, self.seed)

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)

    def report_dict(self) -> dict:
        """Every field except the output location, for reproducible reports."""
        d = dataclasses.asdict(self)
        d.pop("output_dir")
        return d


def _coerce(value: str, typ):
    if typ in (bool, "bool"):
        v = value.strip().lower()
        if v in ("1", "true", "yes", "on"):
            return True
        if v in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"not a boolean: {value!r}")
    if typ in (int, "int"):
        return int(value)
    if typ in (float, "float"):
        return float(value)
    return value


def config_types() -> dict[str, str]:
    return {f.name: f.type for f in dataclasses.fields(ExperimentConfig)}


def parse_config_text(text: str) -> dict:
    """``key = value`` lines; blank lines and ``#`` comments are ignored."""
    types = config_types()
    out = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"config line {lineno}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in types:
            raise ConfigError(f"config line {lineno}: unknown key {key!r}")
        try:
            out[key] = _coerce(value, types[key])
        except ValueError:
            raise ConfigError(f"config line {lineno}: bad value for {key}: {value!r}") from None
    return out


def load_config(path, **overrides) -> ExperimentConfig:
    values = parse_config_text(Path(path).read_text(encoding="utf-8"))
    values.update({k: v for k, v in overrides.items() if v is not None})
    return ExperimentConfig(**values)


# ---------------------------------------------------------------------------
# metrics

@dataclass
class ConfusionMatrix:
    counts: np.ndarray  # rows = true class, columns = predicted

    @classmethod
    def from_labels(cls, y_true, y_pred, n_classes: int = N_CLASSES) -> "ConfusionMatrix":
        counts = np.zeros((n_classes, n_classes), dtype=np.int64)
        np.add.at(counts, (np.asarray(y_true, dtype=np.int64), np.asarray(y_pred, dtype=np.int64)), 1)
        return cls(counts)

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def to_csv(self) -> str:
        lines = [",".join(CLASS_NAMES[: len(self.counts)])]
        lines += [",".join(str(int(v)) for v in row) for row in self.counts]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_csv(cls, text: str) -> "ConfusionMatrix":
        rows = [l for l in text.splitlines() if l.strip()]
        try:
            counts = np.array([[int(v) for v in r.split(",")] for r in rows[1:]], dtype=np.int64)
        except ValueError:
            raise FormatError("confusion matrix rows must be integers") from None
        if counts.ndim != 2 or counts.shape[0] != counts.shape[1] or len(rows[0].split(",")) != len(counts):
            raise FormatError("confusion matrix must be square with a matching header")
        return cls(counts)


@dataclass
class MetricsReport:
    accuracy: float
    precision: list[float | None]
    recall: list[float | None]
    pattern_accuracy: float | None  # accuracy over test rows whose true class is 1..8
    total: int

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def evaluate(model: CnnModel, x: np.ndarray, y: np.ndarray) -> ConfusionMatrix:
    if len(x) == 0:
        raise ValueError("cannot evaluate on an empty split")
    return ConfusionMatrix.from_labels(y, predict_batch(model, x), model.config.n_classes)


def _ratio(num, den):
    # None marks an undefined ratio so it never leaks NaN into reports
    return float(num) / float(den) if den else None


def metrics(cm: ConfusionMatrix) -> MetricsReport:
    c = np.asarray(cm.counts, dtype=np.int64)
    total = int(c.sum())
    if total == 0:
        raise ValueError("empty confusion matrix")
    diag = np.diag(c)
    return MetricsReport(
        accuracy=float(diag.sum()) / total,
        precision=[_ratio(diag[k], c[:, k].sum()) for k in range(len(c))],
        recall=[_ratio(diag[k], c[k].sum()) for k in range(len(c))],
        pattern_accuracy=_ratio(diag[1:].sum(), c[1:].sum()),
        total=total,
    )


# ---------------------------------------------------------------------------
# pipeline

def load_series(cfg: ExperimentConfig):
    if cfg.source == "simulate":
        return simulate_bars(cfg.gbm_params(), cfg.n_bars)
    path = Path(cfg.source)
    if not path.exists():
        raise ConfigError(f"data source {cfg.source!r} does not exist")
    with path.open(encoding="utf-8") as fh:
        return parse_csv_arrays(fh)


def prepare_dataset(cfg: ExperimentConfig) -> Dataset:
    series = load_series(cfg)
    return build_dataset(series, cfg.quota(), cfg.class0_weight, cfg.data_seed,
                         cfg.labeler_config(), FeatureSet.parse(cfg.feature_set))


def encode_dataset(ds: Dataset, fs: FeatureSet | str | None = None) -> dict[str, tuple[np.ndarray, np.ndarray]]:
    fs = FeatureSet.parse(fs or ds.feature_set)
    out = {}
    for name in SPLITS:
        x, y = ds.arrays(name)
        out[name] = (encode_windows(x, fs), y)
    return out


@dataclass
class RunResult:
    seed: int
    report: dict
    model: CnnModel = field(repr=False)
    history: TrainHistory = field(repr=False)
    confusion: ConfusionMatrix = field(repr=False)

    @property
    def val_accuracy(self) -> float:
        return self.report["validation"]["accuracy"]

    @property
    def val_loss(self) -> float:
        return self.report["validation"]["loss"]

    @property
    def test_accuracy(self) -> float:
        return self.report["test"]["accuracy"]


def report_json(report: dict) -> str:
    return json.dumps(report, indent=2, sort_keys=True) + "\n"


def _write_atomically(out_dir: Path, files: dict[str, str | bytes]) -> None:
    out_dir.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(prefix=f".{out_dir.name}.", dir=out_dir.parent))
    try:
        for name, content in files.items():
            target = tmp / name
            if isinstance(content, bytes):
                target.write_bytes(content)
            else:
                target.write_text(content, encoding="utf-8")
        if out_dir.exists():
            shutil.rmtree(out_dir)
        tmp.rename(out_dir)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise


def run_experiment(cfg: ExperimentConfig, dataset: Dataset | None = None,
                   tensors: dict | None = None, write_dataset: bool = True) -> RunResult:
    """Full pipeline for one training seed; artifacts land in ``cfg.output_dir``.

    Nothing is written unless every stage succeeds. ``dataset``/``tensors``
    let a search reuse one labelled dataset across seeds.
    """
    if dataset is None:
        dataset = prepare_dataset(cfg)
    if tensors is None:
        tensors = encode_dataset(dataset, cfg.feature_set)
    model, history = train(cfg.cnn_config(), cfg.train_config(), *tensors["train"], *tensors["validation"])
    if not model.is_finite():
        raise TrainingDiverged(f"seed {cfg.seed}: non-finite parameters")
    val_loss, val_acc = batch_loss(model, *tensors["validation"])
    cm = evaluate(model, *tensors["test"])
    test = metrics(cm)
    report = {
        "config": cfg.report_dict(),
        "seed": cfg.seed,
        "split_sizes": dataset.sizes(),
        "class_counts": {name: dataset.class_counts(name) for name in SPLITS},
        "epochs_run": len(history.val_loss),
        "best_epoch": history.best_epoch,
        "validation": {"accuracy": val_acc, "loss": val_loss},
        "test": test.to_dict(),
        "confusion_matrix": cm.counts.tolist(),
    }
    files: dict[str, str | bytes] = {
        "model.ckpt": dump_checkpoint(model),
        "confusion.csv": cm.to_csv(),
        "metrics.json": report_json(report),
        "history.csv": history.to_csv(),
    }
    if write_dataset:
        files["dataset.jsonl"] = dump_dataset(dataset)
    _write_atomically(Path(cfg.output_dir), files)
    return RunResult(cfg.seed, report, model, history, cm)


@dataclass
class SearchSummary:
    runs: list[dict]
    best_index: int | None

    @property
    def completed(self) -> list[dict]:
        return [r for r in self.runs if r["status"] == "ok"]

    @property
    def failed(self) -> list[dict]:
        return [r for r in self.runs if r["status"] != "ok"]

    @property
    def best(self) -> dict | None:
        return None if self.best_index is None else self.runs[self.best_index]

    def to_csv(self) -> str:
        cols = ["run", "seed", "status", "val_accuracy", "val_loss", "test_accuracy", "pattern_accuracy", "error"]
        lines = [",".join(cols)]
        for r in self.runs:
            lines.append(",".join("" if r.get(c) is None else str(r.get(c)).replace(",", ";") for c in cols))
        return "\n".join(lines) + "\n"


def select_best(runs: list[dict]) -> int | None:
    """Highest validation accuracy, ties to the lower validation loss, then the earlier run."""
    ok = [i for i, r in enumerate(runs) if r["status"] == "ok"]
    if not ok:
        return None
    return min(ok, key=lambda i: (-runs[i]["val_accuracy"], runs[i]["val_loss"], i))


def arch_search(cfg: ExperimentConfig, n_runs: int,
                runner: Callable[..., RunResult] = run_experiment,
                progress: Callable[[dict], None] | None = None) -> SearchSummary:
    """Seeded restarts ``cfg.seed + i`` of one architecture on one shared dataset.

    Each run writes to ``<output_dir>/run_XXX``; a run that raises is
    recorded as failed and skipped. ``runs.csv`` and ``summary.json`` are
    written at the end.
    """
    if n_runs < 1:
        raise ConfigError("n_runs must be >= 1")
    root = Path(cfg.output_dir)
    dataset = prepare_dataset(cfg)
    tensors = encode_dataset(dataset, cfg.feature_set)
    root.mkdir(parents=True, exist_ok=True)
    (root / "dataset.jsonl").write_text(dump_dataset(dataset), encoding="utf-8")
    runs = []
    for i in range(n_runs):
        run_cfg = cfg.replace(seed=cfg.seed + i, output_dir=str(root / f"run_{i:03d}"))
        row = {"run": i, "seed": run_cfg.seed}
        try:
            res = runner(run_cfg, dataset=dataset, tensors=tensors, write_dataset=False)
        except (GafCnnError, FloatingPointError, ArithmeticError) as exc:
            logger.warning("run %d (seed %d) failed: %s", i, run_cfg.seed, exc)
            row.update(status="failed", error=f"{type(exc).__name__}: {exc}")
        else:
            row.update(status="ok", val_accuracy=res.val_accuracy, val_loss=res.val_loss,
                       test_accuracy=res.test_accuracy,
                       pattern_accuracy=res.report["test"]["pattern_accuracy"])
        runs.append(row)
        if progress is not None:
            progress(row)
    summary = SearchSummary(runs, select_best(runs))
    (root / "runs.csv").write_text(summary.to_csv(), encoding="utf-8")
    best = summary.best
    (root / "summary.json").write_text(report_json({
        "n_runs": n_runs,
        "completed": len(summary.completed),
        "failed": len(summary.failed),
        "best": best,
        "best_dir": None if best is None else f"run_{best['run']:03d}",
    }), encoding="utf-8")
    return summary


# ---------------------------------------------------------------------------
# tensor file: JSON lines, header then one record per window; "tensor" holds
# the 4x10x10 field flattened channel-major (index = c*100 + i*10 + j)

TENSOR_FORMAT = "gafcnn-tensors"
TENSOR_VERSION = 1


def dump_tensors(ds: Dataset, fs: FeatureSet | str | None = None) -> str:
    fs = FeatureSet.parse(fs or ds.feature_set)
    lines = [json.dumps({"format": TENSOR_FORMAT, "version": TENSOR_VERSION, "feature_set": fs.value,
                         "shape": [4, 10, 10], "layout": "channel-major"})]
    for name in SPLITS:
        rows = ds.split(name)
        if not rows:
            continue
        x, _ = ds.arrays(name)
        tensors = np.moveaxis(encode_windows(x, fs), -1, 1).reshape(len(rows), -1)
        for lw, t in zip(rows, tensors):
            lines.append(json.dumps({"split": name, "start": lw.start, "label": int(lw.label),
                                     "tensor": t.tolist()}))
    return "\n".join(lines) + "\n"


def load_tensors(text: str) -> tuple[FeatureSet, dict[str, tuple[np.ndarray, np.ndarray]]]:
    lines = [l for l in text.splitlines() if l.strip()]
    header = json.loads(lines[0]) if lines else {}
    if header.get("format") != TENSOR_FORMAT or header.get("version") != TENSOR_VERSION:
        raise FormatError(f"unrecognised tensor header {header!r}")
    xs: dict[str, list] = {name: [] for name in SPLITS}
    ys: dict[str, list] = {name: [] for name in SPLITS}
    for line in lines[1:]:
        rec = json.loads(line)
        xs[rec["split"]].append(rec["tensor"])
        ys[rec["split"]].append(rec["label"])
    out = {}
    for name in SPLITS:
        x = np.asarray(xs[name], dtype=np.float64).reshape(-1, 4, 10, 10)
        out[name] = (np.moveaxis(x, 1, -1), np.asarray(ys[name], dtype=np.int64))
    return FeatureSet.parse(header["feature_set"]), out
