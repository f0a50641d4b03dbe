"""Experiment harness: config handling, CSV format, determinism, reports."""

import copy
import json
import os
import struct

import numpy as np
import pytest
from numpy.testing import assert_allclose

from vibnet import experiments, vnn
from vibnet.experiments import ConfigError


def _tiny_config(**sections) -> dict:
    """Merged config small enough for seconds-scale sweep tests."""
    overrides = {
        "dataset": {"source": "gaussian", "n_train": 48, "n_test": 64,
                    "gaussian_d": 8, "num_classes": 4},
        "model": {"hidden": [16]},
        "train": {"epochs": 3, "batch_size": 16},
        "sweep": {"betas": [0.05], "n_values": [48]},
    }
    for key, table in sections.items():
        overrides.setdefault(key, {}).update(table)
    return experiments.validate_config(experiments.merge_config(overrides))


class TestMergeConfig:
    def test_empty_overrides_give_defaults(self):
        cfg = experiments.merge_config({})
        assert cfg == experiments.DEFAULTS
        assert cfg is not experiments.DEFAULTS

    def test_defaults_are_deep_copied(self):
        before = copy.deepcopy(experiments.DEFAULTS)
        cfg = experiments.merge_config({})
        cfg["train"]["epochs"] = 99999
        cfg["sweep"]["betas"].append(123.0)
        assert experiments.DEFAULTS == before

    def test_nested_override_keeps_siblings(self):
        cfg = experiments.merge_config({"train": {"epochs": 3}})
        assert cfg["train"]["epochs"] == 3
        assert cfg["train"]["batch_size"] == experiments.DEFAULTS["train"]["batch_size"]

    def test_unknown_top_level_key(self):
        with pytest.raises(ConfigError, match="unknown config key"):
            experiments.merge_config({"trian": {}})

    def test_unknown_nested_key(self):
        with pytest.raises(ConfigError, match="train.epocs"):
            experiments.merge_config({"train": {"epocs": 3}})

    def test_scalar_for_table_rejected(self):
        with pytest.raises(ConfigError, match="must be a table"):
            experiments.merge_config({"train": 7})

    def test_non_dict_overrides_rejected(self):
        with pytest.raises(ConfigError, match="must be a table"):
            experiments.merge_config([("seed", 1)])


class TestValidateConfig:
    def _cfg(self, **sections):
        cfg = experiments.merge_config({})
        for key, table in sections.items():
            if isinstance(table, dict):
                cfg[key].update(table)
            else:
                cfg[key] = table
        return cfg

    def test_defaults_validate(self):
        cfg = self._cfg()
        assert experiments.validate_config(cfg) is cfg

    def test_negative_seed(self):
        with pytest.raises(ConfigError, match="seed"):
            experiments.validate_config(self._cfg(seed=-1))

    def test_non_integer_seed(self):
        with pytest.raises(ConfigError, match="seed"):
            experiments.validate_config(self._cfg(seed=1.5))

    def test_jobs_at_least_one(self):
        with pytest.raises(ConfigError, match="jobs"):
            experiments.validate_config(self._cfg(jobs=0))

    def test_empty_sweep_grid(self):
        with pytest.raises(ConfigError, match="nonempty"):
            experiments.validate_config(self._cfg(sweep={"betas": []}))

    def test_bad_label_mode(self):
        with pytest.raises(ConfigError, match="label_mode"):
            experiments.validate_config(self._cfg(sweep={"label_mode": "shuffled"}))

    def test_corruption_level_out_of_range(self):
        with pytest.raises(ConfigError, match="corruption levels"):
            experiments.validate_config(self._cfg(corruption={"levels": [0.0, 1.5]}))

    def test_corruption_beta_must_stay_in_fitting_regime(self):
        with pytest.raises(ConfigError, match="beta < 1"):
            experiments.validate_config(self._cfg(corruption={"beta": 1.0}))

    def test_unknown_dataset_source(self):
        with pytest.raises(ConfigError, match="dataset source"):
            experiments.validate_config(self._cfg(dataset={"source": "cifar"}))

    def test_unknown_noise_model(self):
        with pytest.raises(ConfigError, match="noise"):
            experiments.validate_config(self._cfg(model={"noise": "additive"}))

    def test_negative_train_beta(self):
        with pytest.raises(ConfigError, match="beta"):
            experiments.validate_config(self._cfg(train={"beta": -0.1}))


class TestCsvRoundTrip:
    COLS = ["name", "value", "note"]

    def test_floats_survive_exactly(self, tmp_path):
        # repr() emits the shortest string that parses back to the same
        # double, so a write/read cycle is lossless.
        rows = [{"name": "pi", "value": np.pi, "note": "x"},
                {"name": "tiny", "value": 2.0 ** -1074, "note": ""},
                {"name": "third", "value": 1.0 / 3.0, "note": "y"}]
        path = tmp_path / "vals.csv"
        experiments.write_csv(path, rows, self.COLS)
        header, back = experiments.read_csv(path)
        assert header == self.COLS
        for row, orig in zip(back, rows):
            assert float(row["value"]) == orig["value"]

    def test_missing_column_becomes_empty(self, tmp_path):
        path = tmp_path / "m.csv"
        experiments.write_csv(path, [{"name": "a"}], self.COLS)
        _, back = experiments.read_csv(path)
        assert back[0] == {"name": "a", "value": "", "note": ""}

    def test_field_count_mismatch_names_file_and_line(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("a,b\n1,2\n1,2,3\n", encoding="utf-8")
        with pytest.raises(ConfigError, match=r"bad\.csv:3"):
            experiments.read_csv(path)

    def test_empty_file(self, tmp_path):
        path = tmp_path / "empty.csv"
        path.write_text("", encoding="utf-8")
        with pytest.raises(ConfigError, match="no header"):
            experiments.read_csv(path)

    def test_blank_lines_skipped(self, tmp_path):
        path = tmp_path / "blank.csv"
        path.write_text("a,b\n1,2\n\n3,4\n", encoding="utf-8")
        _, rows = experiments.read_csv(path)
        assert [r["a"] for r in rows] == ["1", "3"]


def _history(ces):
    h = vnn.TrainHistory()
    for i, ce in enumerate(ces):
        h.append(vnn.EpochRecord(
            epoch=i, train_accuracy=0.5, train_ce_nats=ce, info_nats=1.0,
            info_nats_per_sample=0.01, total_loss=ce, learning_rate=0.02,
            seconds=0.0))
    return h


class TestHistoryAndStops:
    def test_history_rows_columns(self):
        rows = experiments.history_rows(_history([1.0, 0.9]))
        assert len(rows) == 2
        assert list(rows[0]) == experiments.HISTORY_COLUMNS
        assert rows[1]["epoch"] == 1
        assert rows[1]["ce_nats_per_sample"] == 0.9

    def test_plateau_stop_waits_for_full_window(self):
        stop = experiments.plateau_stop(3, 1e-3)
        assert not stop(_history([0.5, 0.5]))

    def test_plateau_stop_fires_on_flat_ce(self):
        stop = experiments.plateau_stop(3, 1e-3)
        assert stop(_history([1.0, 0.5, 0.5004, 0.4998]))

    def test_plateau_stop_holds_while_moving(self):
        stop = experiments.plateau_stop(3, 1e-3)
        assert not stop(_history([1.0, 0.9, 0.8, 0.7]))

    def test_make_train_config_constant_lr(self):
        cfg = experiments.merge_config({})
        tc = experiments.make_train_config(cfg, 0.1, 7, epochs=11, constant_lr=True)
        assert tc.lr_decay_epochs == ()
        assert tc.epochs == 11
        assert tc.seed == 7
        tc2 = experiments.make_train_config(cfg, 0.1, 7)
        assert tc2.lr_decay_epochs == tuple(cfg["train"]["lr_decay_epochs"])
        assert tc2.epochs == cfg["train"]["epochs"]


class TestTransitionBeta:
    def _row(self, beta, acc, mode="random"):
        return {"kind": "cell", "beta": str(beta), "label_mode": mode,
                "train_acc": "" if acc is None else str(acc)}

    def test_first_beta_below_half(self):
        rows = [self._row(3.0, 0.12), self._row(0.05, 0.99), self._row(0.5, 0.31)]
        assert experiments.transition_beta(rows) == 0.5

    def test_none_when_always_fitting(self):
        rows = [self._row(0.05, 0.99), self._row(3.0, 0.97)]
        assert experiments.transition_beta(rows) is None

    def test_ignores_real_label_rows_and_failed_cells(self):
        rows = [self._row(0.01, 0.2, mode="real"), self._row(0.02, None),
                self._row(1.0, 0.3)]
        assert experiments.transition_beta(rows) == 1.0


class TestBuildDataset:
    def test_digits_shapes(self):
        cfg = experiments.merge_config({"dataset": {"n_test": 32}})
        train, test = experiments.build_dataset(cfg, 16, 0)
        assert train.features.shape == (16, 28 * 28)
        assert test.features.shape == (32, 28 * 28)
        assert train.num_classes == 10

    def test_same_sample_count_same_data(self):
        # Every beta cell at a given n must see identical inputs, or the
        # sweep would confound beta with dataset resampling.
        cfg = experiments.merge_config({"dataset": {"n_test": 32}})
        a, _ = experiments.build_dataset(cfg, 16, 0)
        b, _ = experiments.build_dataset(cfg, 16, 0)
        assert_allclose(a.features, b.features, rtol=0, atol=0)
        assert np.array_equal(a.labels, b.labels)

    def test_different_seed_different_data(self):
        cfg = experiments.merge_config({"dataset": {"n_test": 32}})
        a, _ = experiments.build_dataset(cfg, 16, 0)
        b, _ = experiments.build_dataset(cfg, 16, 1)
        assert not np.allclose(a.features, b.features)

    def test_normalize_standardizes_train_split(self):
        cfg = experiments.merge_config(
            {"dataset": {"source": "gaussian", "gaussian_d": 6, "n_test": 64,
                         "num_classes": 4}})
        train, _ = experiments.build_dataset(cfg, 256, 3)
        # one global affine over all training pixels, not per-feature
        assert_allclose(train.features.mean(), 0.0, atol=1e-12)
        assert_allclose(train.features.std(), 1.0, atol=1e-12)

    def test_normalize_off(self):
        cfg = experiments.merge_config(
            {"dataset": {"source": "gaussian", "gaussian_d": 6, "n_test": 64,
                         "num_classes": 4, "normalize": False}})
        train, _ = experiments.build_dataset(cfg, 256, 3)
        assert abs(train.features.mean()) > 0.01

    def test_idx_source(self, tmp_path):
        n, side = 8, 4
        images = bytes(range(n * side * side))
        img_path, lab_path = tmp_path / "im.idx", tmp_path / "lab.idx"
        img_path.write_bytes(struct.pack(">IIII", 0x00000803, n, side, side) + images)
        lab_path.write_bytes(struct.pack(">II", 0x00000801, n) + bytes([i % 2 for i in range(n)]))
        cfg = experiments.merge_config({"dataset": {
            "source": "idx", "idx_images": str(img_path), "idx_labels": str(lab_path),
            "n_test": 2, "normalize": False}})
        train, test = experiments.build_dataset(cfg, 4, 0)
        assert train.features.shape == (4, side * side)
        assert test.features.shape == (2, side * side)

    def test_idx_source_needs_paths(self):
        cfg = experiments.merge_config({"dataset": {"source": "idx"}})
        with pytest.raises(ConfigError, match="idx_images"):
            experiments.build_dataset(cfg, 4, 0)

    def test_idx_source_too_small(self, tmp_path):
        img_path, lab_path = tmp_path / "im.idx", tmp_path / "lab.idx"
        img_path.write_bytes(struct.pack(">IIII", 0x00000803, 2, 2, 2) + bytes(8))
        lab_path.write_bytes(struct.pack(">II", 0x00000801, 2) + bytes([0, 1]))
        cfg = experiments.merge_config({"dataset": {
            "source": "idx", "idx_images": str(img_path), "idx_labels": str(lab_path),
            "n_test": 8}})
        with pytest.raises(ConfigError, match="need"):
            experiments.build_dataset(cfg, 8, 0)


def _strip_timing(row: dict) -> dict:
    return {k: v for k, v in row.items() if k not in experiments.TIMING_COLUMNS}


def _csv_without_timing(path) -> list:
    header, rows = experiments.read_csv(path)
    return [_strip_timing(r) for r in rows]


class TestSweepDeterminism:
    def test_rows_identical_across_runs(self):
        cfg = _tiny_config()
        a = experiments.run_beta_n_sweep(cfg)
        b = experiments.run_beta_n_sweep(cfg)
        assert [_strip_timing(r) for r in a] == [_strip_timing(r) for r in b]

    def test_csv_bytes_identical_excluding_timing(self, tmp_path):
        cfg = _tiny_config()
        paths = [tmp_path / "a.csv", tmp_path / "b.csv"]
        for path in paths:
            rows = experiments.run_beta_n_sweep(cfg)
            experiments.write_csv(path, rows, experiments.SWEEP_COLUMNS)
        assert _csv_without_timing(paths[0]) == _csv_without_timing(paths[1])

    def test_parallel_matches_serial(self):
        cfg = _tiny_config(sweep={"betas": [0.05, 0.5]})
        serial = experiments.run_beta_n_sweep(cfg)
        cfg_par = copy.deepcopy(cfg)
        cfg_par["jobs"] = 2
        parallel = experiments.run_beta_n_sweep(cfg_par)
        assert [_strip_timing(r) for r in serial] == [_strip_timing(r) for r in parallel]

    def test_row_shape_and_order(self):
        cfg = _tiny_config(sweep={"betas": [0.5, 0.05], "n_values": [48, 32]})
        rows = experiments.run_beta_n_sweep(cfg)
        assert [(r["beta"], r["n"]) for r in rows] == [
            (0.05, 32), (0.05, 48), (0.5, 32), (0.5, 48)]
        for row in rows:
            assert set(row) == set(experiments.SWEEP_COLUMNS)
            assert row["kind"] == "cell"
            assert row["label_mode"] == "random"
            assert row["error"] == ""
            assert row["epochs_run"] == 3
            assert row["info_nats_per_sample"] == row["info_nats"] / row["n"]

    def test_cell_failure_lands_in_error_column(self):
        cfg = _tiny_config()
        cfg["model"]["activation"] = "sigomid"  # past validation, fails in the cell
        rows = experiments.run_beta_n_sweep(cfg)
        assert len(rows) == 1
        assert rows[0]["train_acc"] == ""
        assert "sigomid" in rows[0]["error"]
        assert rows[0]["beta"] == 0.05


class TestMergeReports:
    def _write_sweep(self, path, rows):
        experiments.write_csv(path, rows, experiments.SWEEP_COLUMNS)

    def _cells(self):
        random_rows = [
            {"kind": "cell", "beta": 0.05, "n": 512, "label_mode": "random",
             "corruption": 1.0, "train_acc": 0.99, "seconds": 1.0, "error": ""},
            {"kind": "cell", "beta": 3.0, "n": 512, "label_mode": "random",
             "corruption": 1.0, "train_acc": 0.11, "seconds": 2.0, "error": ""},
        ]
        corruption_rows = [
            {"kind": "cell", "beta": 0.1, "n": 2048, "label_mode": "corruption",
             "corruption": level, "train_acc": 0.99, "info_nats_per_sample": info,
             "seconds": 1.0, "error": ""}
            for level, info in ((0.0, 1.3), (0.5, 4.1), (1.0, 5.4))
        ]
        return random_rows, corruption_rows

    def test_summary_fields(self, tmp_path):
        random_rows, corruption_rows = self._cells()
        p1, p2 = tmp_path / "sweep.csv", tmp_path / "corr.csv"
        self._write_sweep(p1, random_rows)
        self._write_sweep(p2, corruption_rows)
        summary = experiments.merge_reports([p1, p2])
        assert summary["schema"] == "vibnet-report-v1"
        assert summary["sources"] == ["corr.csv", "sweep.csv"]
        assert summary["row_counts"] == {"cell": 5}
        assert summary["transition_beta"] == 3.0
        assert_allclose(summary["corruption_increase_nats_per_sample"], 5.4 - 1.3)
        assert summary["corruption_info_nats_per_sample"] == {
            "0.0": 1.3, "0.5": 4.1, "1.0": 5.4}
        assert_allclose(summary["random_label_entropy_reference"], np.log(10.0))

    def test_order_independent(self, tmp_path):
        random_rows, corruption_rows = self._cells()
        p1, p2 = tmp_path / "sweep.csv", tmp_path / "corr.csv"
        self._write_sweep(p1, random_rows)
        self._write_sweep(p2, corruption_rows)
        a = experiments.merge_reports([p1, p2])
        b = experiments.merge_reports([p2, p1])
        assert json.dumps(a, sort_keys=True) == json.dumps(b, sort_keys=True)

    def test_no_transition_key_without_random_rows(self, tmp_path):
        _, corruption_rows = self._cells()
        path = tmp_path / "corr.csv"
        self._write_sweep(path, corruption_rows)
        summary = experiments.merge_reports([path])
        assert "transition_beta" not in summary
        assert "corruption_info_nats_per_sample" in summary

    def test_json_serializable(self, tmp_path):
        random_rows, _ = self._cells()
        path = tmp_path / "sweep.csv"
        self._write_sweep(path, random_rows)
        summary = experiments.merge_reports([path])
        json.loads(json.dumps(summary))  # must not raise


class TestCorruptionSweep:
    def test_levels_sorted_and_plateau_stopped(self):
        cfg = _tiny_config(corruption={"levels": [1.0, 0.0], "n": 48,
                                       "max_epochs": 40, "plateau_epochs": 4,
                                       "plateau_tol": 0.5})
        rows = experiments.run_corruption_sweep(cfg)
        assert [r["corruption"] for r in rows] == [0.0, 1.0]
        for row in rows:
            assert row["label_mode"] == "corruption"
            assert row["error"] == ""
            # loose plateau tolerance stops well before the epoch cap
            assert row["epochs_run"] < 40
