import json

import numpy as np
import pytest

from pointcaps.checkpoint import load_checkpoint, read_manifest, save_checkpoint
from pointcaps.dataset import OUTLIER_LEVELS
from pointcaps.errors import CheckpointError, NumericError, TrainingDiverged
from pointcaps.model import PointCloudClassifier
from pointcaps.training import (
    METRIC_FIELDS,
    OptimizerState,
    adam_step,
    evaluate,
    lr_schedule,
    sweep,
    train,
    write_grid_csv,
)

from conftest import tiny_config


def adam_scalar(p, grads, lr=0.001, b1=0.9, b2=0.999, eps=1e-8):
    """Textbook Adam on one scalar over a sequence of gradients."""
    m = v = 0.0
    for t, g in enumerate(grads, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        p -= lr * (m / (1 - b1**t)) / (np.sqrt(v / (1 - b2**t)) + eps)
    return p


class TestAdam:
    def test_matches_textbook_updates(self):
        rng = np.random.default_rng(0)
        grads = rng.standard_normal((5, 4))
        params = {"w": np.zeros(4)}
        state = OptimizerState(lr=0.01)
        for g in grads:
            adam_step(params, {"w": g.copy()}, state)
        expected = [adam_scalar(0.0, grads[:, i], lr=0.01) for i in range(4)]
        np.testing.assert_allclose(params["w"], expected, rtol=1e-10)

    def test_first_step_moves_by_lr(self):
        params = {"w": np.array([1.0, 1.0])}
        adam_step(params, {"w": np.array([3.0, -0.2])}, OptimizerState(lr=0.1))
        np.testing.assert_allclose(params["w"], [0.9, 1.1], atol=1e-6)

    def test_nan_gradient_names_parameter(self):
        params = {"head.w": np.zeros(2)}
        with pytest.raises(NumericError, match="head.w"):
            adam_step(params, {"head.w": np.array([0.0, np.nan])}, OptimizerState())
        np.testing.assert_array_equal(params["head.w"], 0)

    @pytest.mark.parametrize("epoch, lr", [(0, 1e-3), (19, 1e-3), (20, 5e-4), (59, 2.5e-4)])
    def test_step_schedule(self, epoch, lr):
        assert lr_schedule(epoch) == pytest.approx(lr)


class TestTrainLoop:
    def test_metrics_checkpoint_and_reload(self, tmp_path, tiny_dataset):
        cfg = tiny_config()
        result = train(cfg, tiny_dataset, out_dir=tmp_path)
        lines = (tmp_path / "metrics.jsonl").read_text().splitlines()
        assert len(lines) == cfg.epochs
        assert tuple(json.loads(lines[0])) == METRIC_FIELDS
        model, manifest = load_checkpoint(tmp_path / "checkpoint")
        assert manifest["class_names"] == tiny_dataset.class_names
        points = np.stack([s.points for s in tiny_dataset.test])
        np.testing.assert_array_equal(model.scores(points), result.model.scores(points))
        assert evaluate(tmp_path / "checkpoint", tiny_dataset.test).accuracy == pytest.approx(
            result.metrics.best_accuracy
        )

    def test_bitwise_deterministic(self, tmp_path, tiny_dataset):
        for name in ("a", "b"):
            train(tiny_config(aggregator="netvlad"), tiny_dataset, out_dir=tmp_path / name)
        assert (tmp_path / "a" / "metrics.jsonl").read_bytes() == (tmp_path / "b" / "metrics.jsonl").read_bytes()

    @pytest.mark.parametrize("classifier", ["capsule", "fc"])
    def test_loss_descends(self, tiny_dataset, classifier):
        metrics = train(tiny_config(classifier=classifier, epochs=8), tiny_dataset).metrics.epochs
        assert metrics[-1]["loss_total"] < metrics[0]["loss_total"]

    def test_nan_loss_raises_diverged(self, tiny_dataset, monkeypatch):
        original = PointCloudClassifier.loss

        def poisoned(self, points, labels):
            parts = original(self, points, labels)
            parts.total = parts.total * float("nan")
            return parts

        monkeypatch.setattr(PointCloudClassifier, "loss", poisoned)
        with pytest.raises(TrainingDiverged):
            train(tiny_config(), tiny_dataset)


class TestCheckpoint:
    def test_hash_mismatch_refused(self, tmp_path, tiny_dataset):
        cfg = tiny_config()
        save_checkpoint(PointCloudClassifier(cfg, 4), tmp_path / "ck")
        with pytest.raises(CheckpointError, match="hash"):
            load_checkpoint(tmp_path / "ck", cfg.replace(q=9))

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(CheckpointError):
            read_manifest(tmp_path)

    def test_corrupt_tensor_file(self, tmp_path):
        cfg = tiny_config()
        path = save_checkpoint(PointCloudClassifier(cfg, 4), tmp_path / "ck")
        victim = next(path.glob("*.bin"))
        victim.write_bytes(victim.read_bytes()[:10])
        with pytest.raises(CheckpointError):
            load_checkpoint(path)


class TestSweep:
    def test_rows_are_train_major(self, tiny_dataset, tmp_path):
        cfg = tiny_config(epochs=1)
        rows = sweep(cfg, tiny_dataset, "outliers", [0, 5], [0, 10, 20])
        assert [(a, b) for a, b, _ in rows] == [(0, 0), (0, 10), (0, 20), (5, 0), (5, 10), (5, 20)]
        write_grid_csv(tmp_path / "grid.csv", rows)
        lines = (tmp_path / "grid.csv").read_text().splitlines()
        assert lines[0] == "train_level,test_level,accuracy" and len(lines) == 7

    def test_parallel_matches_serial(self, tiny_dataset):
        cfg = tiny_config(epochs=1)
        serial = sweep(cfg, tiny_dataset, "perturb", [0.0, 0.04], [0.0, 0.1])
        assert sweep(cfg, tiny_dataset, "perturb", [0.0, 0.04], [0.0, 0.1], parallel=2) == serial

    def test_default_outlier_levels(self):
        assert OUTLIER_LEVELS == (0, 1, 2, 5, 10, 20, 50, 100)
