"""End-to-end tests of the command-line interface: artifact layout, flag
plumbing, error exits with cleanup, and determinism of emitted files."""

from __future__ import annotations

import json

import numpy as np
import pytest

from necurve.cli import main
from necurve.harness import read_report_json
from necurve.synth import read_records


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli-data")
    config = root / "gen.json"
    config.write_text(json.dumps({
        "jobs": 6,
        "models_per_job": 4,
        "curve_length_mean": 40.0,
        "curve_length_sd": 10.0,
        "examples_per_checkpoint": 10,
        "resample_length": 20,
        "seed": 7,
    }))
    data = root / "data.jsonl"
    assert main(["generate", "--config", str(config), "--out", str(data)]) == 0
    return data


TRAIN_JSON = {
    "epochs": 1,
    "batch": 16,
    "folds": 3,
    "fractions": [0.4],
    "dropout": 0.0,
    "tcn_layers": 1,
    "tcn_filters": 4,
    "tcn_kernel": 2,
    "lstm_layers": 1,
    "lstm_dim": 3,
    "embed_dim": 3,
    "head_hidden": 4,
}


@pytest.fixture()
def train_json(tmp_path):
    path = tmp_path / "train.json"
    path.write_text(json.dumps(TRAIN_JSON))
    return path


class TestHelp:
    def test_help_lists_all_subcommands(self, capsys):
        with pytest.raises(SystemExit) as exit_info:
            main(["--help"])
        assert exit_info.value.code == 0
        text = capsys.readouterr().out
        for command in ("generate", "train", "evaluate", "cross-validate",
                        "consistency", "export-indicator", "report"):
            assert command in text

    def test_subcommand_help_lists_flags(self, capsys):
        with pytest.raises(SystemExit):
            main(["cross-validate", "--help"])
        text = capsys.readouterr().out
        for flag in ("--config", "--data", "--out", "--seed", "--ranker",
                     "--act-df", "--gamma", "--lambda", "--fractions",
                     "--no-metadata", "--mask-mode"):
            assert flag in text


class TestGenerate:
    def test_records_readable_and_deterministic(self, dataset, tmp_path):
        records = read_records(dataset)
        assert len(records) > 0
        assert len(records[0].curve) == 20
        config = tmp_path / "gen.json"
        config.write_text(json.dumps({"jobs": 6, "models_per_job": 4,
                                      "curve_length_mean": 40.0,
                                      "curve_length_sd": 10.0,
                                      "examples_per_checkpoint": 10,
                                      "resample_length": 20, "seed": 7}))
        again = tmp_path / "again.jsonl"
        assert main(["generate", "--config", str(config),
                     "--out", str(again)]) == 0
        assert again.read_bytes() == dataset.read_bytes()

    def test_bad_config_key_fails_without_output(self, tmp_path, capsys):
        config = tmp_path / "gen.json"
        config.write_text(json.dumps({"jobz": 6}))
        out = tmp_path / "data.jsonl"
        assert main(["generate", "--config", str(config),
                     "--out", str(out)]) == 1
        assert "error" in capsys.readouterr().err
        assert not out.exists()


class TestTrainEvaluate:
    def test_train_then_evaluate(self, dataset, train_json, tmp_path, capsys):
        ckpt = tmp_path / "model.json"
        assert main(["train", "--config", str(train_json),
                     "--data", str(dataset), "--out", str(ckpt),
                     "--seed", "3"]) == 0
        assert ckpt.exists()
        assert "best epoch 1" in capsys.readouterr().out
        metrics = tmp_path / "eval.json"
        assert main(["evaluate", "--config", str(ckpt),
                     "--data", str(dataset), "--out", str(metrics)]) == 0
        payload = json.loads(metrics.read_text())
        assert set(payload) == {"fraction", "auc", "accuracy", "pairs"}
        assert 0.0 <= payload["auc"] <= 1.0

    def test_bad_fold_index(self, dataset, train_json, tmp_path, capsys):
        code = main(["train", "--config", str(train_json),
                     "--data", str(dataset), "--out", str(tmp_path / "m.json"),
                     "--fold", "9"])
        assert code == 1
        assert "fold" in capsys.readouterr().err


class TestCrossValidate:
    def test_greedy_artifacts(self, dataset, tmp_path):
        outdir = tmp_path / "cv"
        assert main(["cross-validate", "--data", str(dataset),
                     "--out", str(outdir), "--ranker", "greedy",
                     "--fractions", "0.4,1.0", "--seed", "7"]) == 0
        assert (outdir / "report.json").exists()
        assert (outdir / "metrics.csv").exists()
        assert (outdir / "splits.json").exists()
        assert (outdir / "plotdata" / "greedy_curves.json").exists()
        report = read_report_json(outdir / "report.json")[0]
        assert report.ranker == "greedy"
        assert report.consistency  # wne curve attached
        assert report.fractions == [0.4, 1.0]  # flag propagated
        splits = json.loads((outdir / "splits.json").read_text())
        assert len(splits["folds"]) == 5  # default fold count

    def test_act_ranker_emits_heatmap(self, dataset, train_json, tmp_path):
        outdir = tmp_path / "cv-act"
        assert main(["cross-validate", "--config", str(train_json),
                     "--data", str(dataset), "--out", str(outdir),
                     "--ranker", "r2+act", "--act-df", "1",
                     "--seed", "3"]) == 0
        heatmap = json.loads(
            (outdir / "plotdata" / "indicator_heatmap.json").read_text()
        )
        indicator = np.array(heatmap["indicator"])
        assert indicator.shape == (8, 8)  # round(0.4 * 20) observed points
        np.testing.assert_array_equal(np.argmax(indicator, axis=0),
                                      np.zeros(8, dtype=int))

    def test_bad_ranker_value_rejected_by_parser(self, dataset, tmp_path, capsys):
        with pytest.raises(SystemExit) as exit_info:
            main(["cross-validate", "--data", str(dataset),
                  "--out", str(tmp_path / "cv"), "--ranker", "oracle"])
        assert exit_info.value.code != 0
        assert "oracle" in capsys.readouterr().err

    def test_bad_config_value_exits_nonzero(self, dataset, tmp_path, capsys):
        config = tmp_path / "train.json"
        config.write_text(json.dumps({"epochs": 0}))
        outdir = tmp_path / "cv"
        code = main(["cross-validate", "--config", str(config),
                     "--data", str(dataset), "--out", str(outdir),
                     "--ranker", "greedy"])
        assert code == 1
        assert "error" in capsys.readouterr().err
        assert not outdir.exists()

    def test_failure_after_partial_write_cleans_up(self, dataset, tmp_path, capsys):
        outdir = tmp_path / "cv"
        outdir.mkdir()
        (outdir / "plotdata").write_text("not a directory")  # force late failure
        code = main(["cross-validate", "--data", str(dataset),
                     "--out", str(outdir), "--ranker", "greedy",
                     "--fractions", "0.4", "--seed", "7"])
        assert code == 1
        assert "error" in capsys.readouterr().err
        assert not (outdir / "report.json").exists()
        assert not (outdir / "metrics.csv").exists()
        assert not (outdir / "splits.json").exists()

    def test_reports_identical_across_runs(self, dataset, tmp_path):
        args = ["--data", str(dataset), "--ranker", "greedy",
                "--fractions", "0.4,1.0", "--seed", "7"]
        first, second = tmp_path / "a", tmp_path / "b"
        assert main(["cross-validate", *args, "--out", str(first)]) == 0
        assert main(["cross-validate", *args, "--out", str(second)]) == 0
        for name in ("report.json", "metrics.csv", "splits.json"):
            assert (first / name).read_bytes() == (second / name).read_bytes()


class TestConsistency:
    def test_curve_output(self, dataset, tmp_path, capsys):
        out = tmp_path / "consistency.json"
        assert main(["consistency", "--data", str(dataset),
                     "--out", str(out), "--fractions", "0.5,1.0"]) == 0
        payload = json.loads(out.read_text())
        assert set(payload) == {"lne", "wne"}
        lne_full = [p for p in payload["lne"] if p["fraction"] == 1.0][0]
        assert lne_full["accuracy"] == 1.0
        wne_full = [p for p in payload["wne"] if p["fraction"] == 1.0][0]
        assert wne_full["accuracy"] <= lne_full["accuracy"]
        assert "accuracy" in capsys.readouterr().out


class TestExportIndicator:
    def test_max_init_heatmap(self, tmp_path):
        out = tmp_path / "heatmap.json"
        assert main(["export-indicator", "--out", str(out), "--length", "12",
                     "--init", "max", "--gamma", "0.05", "--seed", "1"]) == 0
        payload = json.loads(out.read_text())
        indicator = np.array(payload["indicator"])
        assert indicator.shape == (12, 12)
        np.testing.assert_array_equal(np.argmax(indicator, axis=0),
                                      np.zeros(12, dtype=int))
        np.testing.assert_allclose(indicator.sum(axis=0), 1.0, rtol=1e-12)

    def test_min_init_heatmap(self, tmp_path):
        out = tmp_path / "heatmap.json"
        assert main(["export-indicator", "--out", str(out), "--length", "6",
                     "--init", "min"]) == 0
        indicator = np.array(json.loads(out.read_text())["indicator"])
        np.testing.assert_array_equal(np.argmax(indicator, axis=0),
                                      np.arange(6))

    def test_unknown_init_fails_clean(self, tmp_path, capsys):
        out = tmp_path / "heatmap.json"
        assert main(["export-indicator", "--out", str(out),
                     "--init", "median"]) == 1
        assert "init" in capsys.readouterr().err
        assert not out.exists()


class TestReport:
    def test_reemit_from_saved_report(self, dataset, tmp_path):
        cv_dir = tmp_path / "cv"
        assert main(["cross-validate", "--data", str(dataset),
                     "--out", str(cv_dir), "--ranker", "greedy",
                     "--fractions", "0.4", "--seed", "7"]) == 0
        re_dir = tmp_path / "re"
        assert main(["report", "--data", str(cv_dir / "report.json"),
                     "--out", str(re_dir)]) == 0
        assert (re_dir / "metrics.csv").read_bytes() == (
            cv_dir / "metrics.csv"
        ).read_bytes()
        assert (re_dir / "plotdata" / "greedy_curves.json").read_bytes() == (
            cv_dir / "plotdata" / "greedy_curves.json"
        ).read_bytes()

    def test_malformed_report_fails(self, tmp_path, capsys):
        bad = tmp_path / "report.json"
        bad.write_text("{not json")
        assert main(["report", "--data", str(bad),
                     "--out", str(tmp_path / "out")]) == 1
        assert "error" in capsys.readouterr().err
