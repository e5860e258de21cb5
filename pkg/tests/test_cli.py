import csv
import json
import xml.etree.ElementTree as ET

import numpy as np
import pytest

from pointcaps import ablation
from pointcaps.autodiff.tensor import Sigmoid
from pointcaps.cli import DEFAULT_LEVELS, EXIT_OK, EXIT_RUNTIME, EXIT_VALIDATION, main
from pointcaps.config import ModelConfig
from pointcaps.dataset import load_dataset
from pointcaps.plots import line_chart

from conftest import tiny_config


@pytest.fixture
def toy_config(tmp_path):
    path = tmp_path / "toy.ini"
    tiny_config(samples_per_class=5, epochs=1).save(path)
    return path


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


class TestTrainEval:
    def test_missing_classifier_names_key(self, tmp_path, capsys):
        path = tmp_path / "bad.ini"
        path.write_text("[model]\nextractor = pointnet\naggregator = maxpool\n")
        assert main(["train", "--config", str(path), "--out", str(tmp_path / "run")]) == EXIT_VALIDATION
        assert "classifier" in capsys.readouterr().err

    def test_unknown_key_is_validation_error(self, tmp_path, capsys):
        path = tmp_path / "bad.ini"
        path.write_text("[model]\nextractor = pointnet\naggregator = maxpool\nclassifier = fc\nwidth = 3\n")
        assert main(["train", "--config", str(path), "--out", str(tmp_path / "run")]) == EXIT_VALIDATION
        assert "width" in capsys.readouterr().err

    def test_missing_config_file(self, tmp_path):
        assert main(["train", "--config", str(tmp_path / "nope.ini"), "--out", str(tmp_path)]) == EXIT_VALIDATION

    def test_bad_arguments(self):
        assert main(["train"]) == EXIT_VALIDATION
        assert main(["frobnicate"]) == EXIT_VALIDATION

    def test_train_writes_artifacts_and_round_trips(self, tmp_path, toy_config):
        out = tmp_path / "run"
        assert main(["train", "--config", str(toy_config), "--out", str(out), "--quiet"]) == EXIT_OK
        assert (out / "checkpoint" / "manifest.json").exists()
        assert (out / "metrics.jsonl").exists()
        snapshot = ModelConfig.load(out / "config.ini")
        assert snapshot == ModelConfig.load(toy_config)

    def test_seed_override_lands_in_snapshot(self, tmp_path, toy_config):
        out = tmp_path / "run"
        assert main(["train", "--config", str(toy_config), "--out", str(out), "--seed", "7", "--quiet"]) == EXIT_OK
        assert ModelConfig.load(out / "config.ini").seed == 7

    def test_metrics_bit_identical_across_runs(self, tmp_path, toy_config):
        for name in ("a", "b"):
            main(["train", "--config", str(toy_config), "--out", str(tmp_path / name), "--quiet"])
        assert (tmp_path / "a" / "metrics.jsonl").read_bytes() == (tmp_path / "b" / "metrics.jsonl").read_bytes()

    def test_eval_reports_json(self, tmp_path, toy_config, capsys):
        out = tmp_path / "run"
        main(["train", "--config", str(toy_config), "--out", str(out), "--quiet"])
        capsys.readouterr()
        assert main(["eval", "--checkpoint", str(out / "checkpoint"), "--outliers", "3"]) == EXIT_OK
        report = json.loads(capsys.readouterr().out)
        assert report["n_samples"] == 4 and 0.0 <= report["accuracy"] <= 1.0
        assert set(report["per_class"]) <= {"cone", "cube", "cylinder", "sphere"}

    def test_eval_missing_checkpoint_is_runtime_error(self, tmp_path, toy_config):
        code = main(["eval", "--config", str(toy_config), "--checkpoint", str(tmp_path / "none")])
        assert code == EXIT_RUNTIME

    def test_f64_precision_flag(self, tmp_path, toy_config):
        out = tmp_path / "run"
        assert main(["--precision", "f64", "train", "--config", str(toy_config), "--out", str(out), "--quiet"]) == 0
        assert len((out / "metrics.jsonl").read_text().splitlines()) == 1


class TestGradcheck:
    def test_ops_scope_passes(self, capsys):
        assert main(["gradcheck", "--scope", "ops"]) == EXIT_OK
        out = capsys.readouterr().out
        assert "PASS sigmoid" in out and "24/24 items passed" in out

    def test_corrupted_rule_fails_naming_op(self, monkeypatch, capsys):
        monkeypatch.setattr(Sigmoid, "backward", lambda self, grad: (grad * self.out,))
        assert main(["gradcheck", "--scope", "ops"]) == EXIT_RUNTIME
        captured = capsys.readouterr()
        assert "FAIL sigmoid" in captured.out and "sigmoid" in captured.err


class TestSynth:
    def test_counts_and_normalization(self, tmp_path):
        out = tmp_path / "data"
        args = ["synth", "--per-class", "100", "--n-points", "32", "--out", str(out)]
        assert main(args) == EXIT_OK
        files = {split: list(out.glob(f"*/{split}/*.pcap")) for split in ("train", "test")}
        assert (len(files["train"]), len(files["test"])) == (320, 80)
        data = load_dataset(out, n_points=32)
        norms = [np.linalg.norm(s.points - s.points.mean(axis=0), axis=1).max() for s in data.train + data.test]
        np.testing.assert_allclose(norms, 1.0, atol=1e-6)

    def test_fixed_seed_identical_bytes(self, tmp_path):
        for name in ("a", "b"):
            main(["synth", "--shapes", "cube,torus", "--per-class", "5", "--n-points", "16", "--seed", "3",
                  "--out", str(tmp_path / name)])
        a = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*.pcap"))
        assert a == sorted(p.relative_to(tmp_path / "b") for p in (tmp_path / "b").rglob("*.pcap"))
        assert all((tmp_path / "a" / p).read_bytes() == (tmp_path / "b" / p).read_bytes() for p in a)

    def test_unknown_shape(self, tmp_path):
        assert main(["synth", "--shapes", "teapot", "--out", str(tmp_path)]) == EXIT_VALIDATION


@pytest.fixture(scope="module")
def tables(tmp_path_factory):
    path = tmp_path_factory.mktemp("cfg") / "toy.ini"
    tiny_config(samples_per_class=5, epochs=1).save(path)
    out = tmp_path_factory.mktemp("ablate")
    assert main(["ablate", "--config", str(path), "--seeds", "1", "--out", str(out)]) == EXIT_OK
    return path, out


class TestAblate:
    def test_classifier_table_shape(self, tables):
        rows = read_csv(tables[1] / "table_classifier.csv")
        assert rows[0] == list(ablation.CLASSIFIER_HEADER)
        assert [tuple(r[:3]) for r in rows[1:]] == [
            ("PointNet", "Maxpooling", "FC"), ("PointNet", "Maxpooling", "3DCapsule"),
            ("PointNet", "NetVlad", "FC"), ("PointNet", "NetVlad", "3DCapsule"),
            ("EdgeConv", "Maxpooling", "FC"), ("EdgeConv", "Maxpooling", "3DCapsule"),
            ("EdgeConv", "NetVlad", "FC"), ("EdgeConv", "NetVlad", "3DCapsule"),
        ]

    def test_compose_table_shape(self, tables):
        rows = read_csv(tables[1] / "table_composecaps.csv")
        assert rows[0] == ["method", "compose_caps", "accuracy"] and len(rows) == 9
        assert [r[1] for r in rows[1:]] == ["No", "Yes"] * 4
        assert [r[0] for r in rows[1::2]] == [
            "PointNet+Maxpooling", "PointNet+NetVlad", "EdgeConv+Maxpooling", "EdgeConv+NetVlad"
        ]

    def test_reconstruction_table_shape(self, tables):
        rows = read_csv(tables[1] / "table_reconstruction.csv")
        assert rows[0] == ["recons_loss", "PointNet+Max", "PointNet+NetVlad", "EdgeConv+Max", "EdgeConv+NetVlad"]
        assert [r[0] for r in rows[1:]] == ["No", "Yes"]
        assert all(0.0 <= float(v) <= 1.0 for r in rows[1:] for v in r[1:])

    def test_shared_cells_agree(self, tables):
        # the default capsule model appears in all three tables and trains once
        classifier = read_csv(tables[1] / "table_classifier.csv")
        compose = read_csv(tables[1] / "table_composecaps.csv")
        recon = read_csv(tables[1] / "table_reconstruction.csv")
        capsule = [r[3] for r in classifier[1:] if r[2] == "3DCapsule"]
        assert capsule == [r[2] for r in compose[1:] if r[1] == "Yes"] == recon[2][1:]
        assert len(list((tables[1] / "runs").glob("*.json"))) == 16

    def test_rerun_identical(self, tables, tmp_path):
        path, first = tables
        assert main(["ablate", "--config", str(path), "--seeds", "1", "--out", str(tmp_path)]) == EXIT_OK
        for name in ablation.FILES.values():
            assert (tmp_path / name).read_bytes() == (first / name).read_bytes()

    def test_failure_gives_partial_csv_and_manifest(self, tmp_path, toy_config, monkeypatch):
        original = ablation.single_run

        def flaky(config, dataset, seed):
            if config.extractor == "edgeconv" and config.classifier == "fc":
                raise FloatingPointError("boom")
            return original(config, dataset, seed)

        monkeypatch.setattr(ablation, "single_run", flaky)
        code = main(["ablate", "--config", str(toy_config), "--seeds", "1", "--tables", "classifier",
                     "--out", str(tmp_path)])
        assert code == EXIT_RUNTIME
        rows = read_csv(tmp_path / "table_classifier.csv")
        assert [r[3] == "" for r in rows[1:]] == [False] * 4 + [True, False, True, False]
        failures = json.loads((tmp_path / "failures.json").read_text())
        assert len(failures) == 2 and all("boom" in f["error"] for f in failures)


class TestSweep:
    def test_default_levels_are_published_lists(self):
        assert DEFAULT_LEVELS["outliers"] == (0, 1, 2, 5, 10, 20, 50, 100)
        assert DEFAULT_LEVELS["perturb"] == (0.0, 0.02, 0.04, 0.06, 0.08, 0.10)

    def test_grids_and_one_chart_per_train_level(self, tmp_path, toy_config):
        args = ["sweep", "--config", str(toy_config), "--mode", "perturb", "--levels", "0,0.05,0.1",
                "--out", str(tmp_path)]
        assert main(args) == EXIT_OK
        grids = sorted(p.name for p in tmp_path.glob("*.csv"))
        assert grids == [f"perturb_{a}_{c}.csv" for a in ("maxpool", "netvlad") for c in ("capsule", "fc")]
        rows = read_csv(tmp_path / "perturb_maxpool_capsule.csv")
        assert rows[0] == ["train_level", "test_level", "accuracy"] and len(rows) == 10
        charts = sorted(tmp_path.glob("*.svg"))
        assert len(charts) == 3
        root = ET.parse(charts[0]).getroot()
        assert len([e for e in root.iter() if e.get("class") == "series"]) == 4

    def test_bad_levels(self, tmp_path, toy_config):
        args = ["sweep", "--config", str(toy_config), "--mode", "outliers", "--levels", "1,x", "--out", str(tmp_path)]
        assert main(args) == EXIT_VALIDATION


class TestPlots:
    def test_chart_is_valid_svg_with_labels(self):
        svg = line_chart({"A": [(0, 0.5), (1, 0.9)], "B & C": [(0, 0.1), (1, 1.2)]}, "title <x>")
        root = ET.fromstring(svg)
        assert root.tag.endswith("svg")
        texts = [e.text for e in root.iter() if e.tag.endswith("text")]
        assert "B & C" in texts and "title <x>" in texts

    def test_empty_series_rejected(self):
        with pytest.raises(ValueError):
            line_chart({}, "t")
