import csv
import io
import json

import numpy as np
import pytest

from gafcnn.errors import ConfigError, FormatError, QuotaUnmet
from gafcnn.harness import (ConfusionMatrix, ExperimentConfig, RunResult, TrainingDiverged, arch_search,
                            dump_tensors, encode_dataset, evaluate, load_config, load_tensors, metrics,
                            parse_config_text, prepare_dataset, run_experiment, select_best)
from gafcnn.labeling import SIM_QUOTA
from gafcnn.nn import CnnConfig, init_model, read_checkpoint, zero_model


def small_cfg(tmp_path, **kw):
    base = dict(n_bars=100_000, data_seed=1, train_total=100, validation_total=20, test_total=20,
                epochs=3, seed=5, output_dir=str(tmp_path / "exp"))
    base.update(kw)
    return ExperimentConfig(**base)


class TestMetrics:
    def test_two_class(self):
        rep = metrics(ConfusionMatrix(np.array([[3, 1], [2, 4]])))
        assert rep.accuracy == pytest.approx(0.7)
        assert rep.precision[0] == pytest.approx(0.6) and rep.recall[0] == pytest.approx(0.75)
        assert rep.precision[1] == pytest.approx(0.8) and rep.recall[1] == pytest.approx(4 / 6)
        assert rep.pattern_accuracy == pytest.approx(4 / 6)

    def test_identity(self):
        rep = metrics(ConfusionMatrix(np.eye(9, dtype=int) * 10))
        assert rep.accuracy == 1.0 and rep.pattern_accuracy == 1.0
        assert rep.precision == [1.0] * 9 and rep.recall == [1.0] * 9

    def test_empty_column_is_undefined(self):
        rep = metrics(ConfusionMatrix(np.array([[2, 0], [3, 0]])))
        assert rep.precision[1] is None
        assert rep.recall[1] == 0.0
        assert "NaN" not in json.dumps(rep.to_dict())

    def test_pattern_accuracy_is_row_restricted(self):
        c = np.zeros((9, 9), dtype=int)
        c[0, 0], c[0, 3] = 5, 5          # class-0 rows do not count
        c[1, 1], c[2, 0] = 4, 4
        rep = metrics(ConfusionMatrix(c))
        assert rep.accuracy == pytest.approx(9 / 18)
        assert rep.pattern_accuracy == pytest.approx(4 / 8)

    def test_permutation_invariance(self):
        rng = np.random.default_rng(0)
        c = rng.integers(0, 20, (9, 9))
        perm = np.concatenate([[0], 1 + rng.permutation(8)])
        a, b = metrics(ConfusionMatrix(c)), metrics(ConfusionMatrix(c[np.ix_(perm, perm)]))
        assert a.accuracy == pytest.approx(b.accuracy)
        assert a.pattern_accuracy == pytest.approx(b.pattern_accuracy)
        np.testing.assert_allclose(np.array(a.precision)[perm], b.precision)
        np.testing.assert_allclose(np.array(a.recall)[perm], b.recall)

    def test_empty_matrix(self):
        with pytest.raises(ValueError):
            metrics(ConfusionMatrix(np.zeros((9, 9), dtype=int)))

    def test_csv_round_trip(self):
        cm = ConfusionMatrix(np.random.default_rng(1).integers(0, 50, (9, 9)))
        text = cm.to_csv()
        rows = list(csv.reader(io.StringIO(text)))
        assert rows[0][0] == "NoPattern" and rows[0][8] == "InvertedHammer"
        assert len(rows) == 10 and all(len(r) == 9 for r in rows)
        np.testing.assert_array_equal(ConfusionMatrix.from_csv(text).counts, cm.counts)

    def test_bad_csv(self):
        with pytest.raises(FormatError):
            ConfusionMatrix.from_csv("a,b\n1,x\n2,3\n")


class TestEvaluate:
    def test_constant_predictor_single_column(self):
        y = np.repeat(np.arange(9), 3)
        cm = evaluate(zero_model(CnnConfig()), np.random.default_rng(0).normal(size=(27, 10, 10, 4)), y)
        assert (cm.counts[:, 1:] == 0).all()
        np.testing.assert_array_equal(cm.counts[:, 0], np.full(9, 3))

    def test_totals_match(self):
        rng = np.random.default_rng(1)
        y = rng.integers(0, 9, 40)
        cm = evaluate(init_model(CnnConfig(), rng), rng.normal(size=(40, 10, 10, 4)), y)
        assert cm.total == 40
        np.testing.assert_array_equal(cm.counts.sum(axis=1), np.bincount(y, minlength=9))

    def test_perfect_predictor(self):
        cm = ConfusionMatrix.from_labels(np.arange(9), np.arange(9))
        np.testing.assert_array_equal(cm.counts, np.eye(9, dtype=int))
        assert metrics(cm).accuracy == 1.0


class TestConfig:
    def test_defaults(self):
        cfg = ExperimentConfig()
        assert (cfg.train_total, cfg.validation_total, cfg.test_total) == (2000, 400, 500)
        assert cfg.quota() == SIM_QUOTA
        tc = cfg.train_config()
        assert (tc.epochs, tc.batch_size, tc.learning_rate, tc.beta1, tc.beta2, tc.early_stopping_patience) == \
            (300, 64, 0.001, 0.9, 0.999, 20)
        assert cfg.feature_set == "CULR" and not cfg.use_max_pooling

    def test_parse_text(self):
        values = parse_config_text("# sweep\nfeature_set = ohlc\nuse-max-pooling = yes\nepochs=7  # short\n\n")
        assert values == {"feature_set": "ohlc", "use_max_pooling": True, "epochs": 7}
        assert ExperimentConfig(**values).feature_set == "OHLC"

    @pytest.mark.parametrize("text", ["bogus = 1", "epochs = many", "no equals sign", "use_max_pooling = maybe"])
    def test_bad_text(self, text):
        with pytest.raises(ConfigError):
            parse_config_text(text)

    def test_load_with_overrides(self, tmp_path):
        p = tmp_path / "exp.cfg"
        p.write_text("seed = 4\nsigma = 0.3\n")
        cfg = load_config(p, seed=9, epochs=None)
        assert cfg.seed == 9 and cfg.sigma == 0.3 and cfg.epochs == 300

    def test_invalid_totals(self):
        with pytest.raises(ConfigError):
            ExperimentConfig(train_total=0)
        with pytest.raises(ConfigError):
            ExperimentConfig(train_total=2001).quota()


class TestRunExperiment:
    def test_artifacts(self, tmp_path):
        cfg = small_cfg(tmp_path)
        res = run_experiment(cfg)
        out = tmp_path / "exp"
        assert sorted(p.name for p in out.iterdir()) == \
            ["confusion.csv", "dataset.jsonl", "history.csv", "metrics.json", "model.ckpt"]
        report = json.loads((out / "metrics.json").read_text())
        assert report["split_sizes"] == {"train": 100, "validation": 20, "test": 20}
        assert np.array(report["confusion_matrix"]).shape == (9, 9)
        assert sum(map(sum, report["confusion_matrix"])) == 20
        assert "output_dir" not in report["config"]
        assert report["test"]["accuracy"] == res.test_accuracy
        cm = ConfusionMatrix.from_csv((out / "confusion.csv").read_text())
        np.testing.assert_array_equal(cm.counts, report["confusion_matrix"])
        model = read_checkpoint(out / "model.ckpt")
        for k, v in res.model.params.items():
            np.testing.assert_array_equal(model.params[k], v)
        assert len((out / "history.csv").read_text().splitlines()) == 1 + report["epochs_run"]

    def test_deterministic(self, tmp_path):
        a = run_experiment(small_cfg(tmp_path, output_dir=str(tmp_path / "a")))
        b = run_experiment(small_cfg(tmp_path, output_dir=str(tmp_path / "b")))
        assert (tmp_path / "a" / "metrics.json").read_bytes() == (tmp_path / "b" / "metrics.json").read_bytes()
        assert (tmp_path / "a" / "model.ckpt").read_bytes() == (tmp_path / "b" / "model.ckpt").read_bytes()
        assert a.report == b.report

    def test_quota_unmet_leaves_nothing(self, tmp_path):
        cfg = small_cfg(tmp_path, n_bars=2000)
        with pytest.raises(QuotaUnmet):
            run_experiment(cfg)
        assert not (tmp_path / "exp").exists()
        assert list(tmp_path.iterdir()) == []

    def test_csv_source(self, tmp_path):
        from gafcnn.gbm import simulate_bars
        from gafcnn.market import format_csv
        cfg = small_cfg(tmp_path)
        path = tmp_path / "bars.csv"
        path.write_text(format_csv(*simulate_bars(cfg.gbm_params(), cfg.n_bars)))
        a = prepare_dataset(cfg)
        b = prepare_dataset(cfg.replace(source=str(path)))
        for split in ("train", "validation", "test"):
            np.testing.assert_array_equal(a.arrays(split)[0], b.arrays(split)[0])

    def test_missing_source(self, tmp_path):
        with pytest.raises(ConfigError):
            prepare_dataset(small_cfg(tmp_path, source=str(tmp_path / "nope.csv")))


class TestSearch:
    def test_single_run_matches_run_experiment(self, tmp_path):
        cfg = small_cfg(tmp_path, output_dir=str(tmp_path / "search"))
        summary = arch_search(cfg, 1)
        direct = run_experiment(cfg.replace(output_dir=str(tmp_path / "direct")))
        assert summary.best_index == 0
        assert (tmp_path / "search" / "run_000" / "metrics.json").read_bytes() == \
            (tmp_path / "direct" / "metrics.json").read_bytes()
        assert summary.best["test_accuracy"] == direct.test_accuracy

    def test_best_is_argmax_of_persisted_runs(self, tmp_path):
        cfg = small_cfg(tmp_path, output_dir=str(tmp_path / "search"))
        summary = arch_search(cfg, 3)
        rows = list(csv.DictReader((tmp_path / "search" / "runs.csv").open()))
        assert [int(r["seed"]) for r in rows] == [5, 6, 7]
        val = [float(r["val_accuracy"]) for r in rows]
        loss = [float(r["val_loss"]) for r in rows]
        best = min(range(3), key=lambda i: (-val[i], loss[i], i))
        assert summary.best_index == best
        saved = json.loads((tmp_path / "search" / "summary.json").read_text())
        assert saved["best_dir"] == f"run_{best:03d}" and saved["completed"] == 3
        assert (tmp_path / "search" / "dataset.jsonl").exists()

    def test_failed_run_is_skipped(self, tmp_path):
        def runner(cfg, **kw):
            if cfg.seed == 6:
                raise TrainingDiverged("boom")
            return run_experiment(cfg, **kw)
        summary = arch_search(small_cfg(tmp_path), 3, runner=runner)
        assert len(summary.completed) == 2 and len(summary.failed) == 1
        assert summary.failed[0]["seed"] == 6 and "boom" in summary.failed[0]["error"]
        assert summary.best["status"] == "ok"
        assert not (tmp_path / "exp" / "run_001").exists()

    def test_select_best_ties(self):
        runs = [{"status": "ok", "val_accuracy": 0.8, "val_loss": 0.5},
                {"status": "failed"},
                {"status": "ok", "val_accuracy": 0.8, "val_loss": 0.4},
                {"status": "ok", "val_accuracy": 0.8, "val_loss": 0.4}]
        assert select_best(runs) == 2
        assert select_best([{"status": "failed"}]) is None

    def test_zero_runs(self, tmp_path):
        with pytest.raises(ConfigError):
            arch_search(small_cfg(tmp_path), 0)


class TestTensorFile:
    def test_round_trip_matches_encoder(self, tmp_path):
        cfg = small_cfg(tmp_path)
        ds = prepare_dataset(cfg)
        fs, tensors = load_tensors(dump_tensors(ds))
        direct = encode_dataset(ds)
        assert fs.value == "CULR"
        for split in ("train", "validation", "test"):
            np.testing.assert_array_equal(tensors[split][0], direct[split][0])
            np.testing.assert_array_equal(tensors[split][1], direct[split][1])

    def test_bad_header(self):
        with pytest.raises(FormatError):
            load_tensors('{"format": "other"}\n')
