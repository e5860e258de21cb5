"""Adam, the step learning-rate schedule, the training loop, evaluation and
corruption sweeps."""

import csv
import json
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from pointcaps.checkpoint import load_checkpoint, save_checkpoint
from pointcaps.dataset import CorruptionSpec, batch_iterator, build_training_mix, corrupt_all
from pointcaps.errors import NumericError, TrainingDiverged
from pointcaps.model import PointCloudClassifier

METRIC_FIELDS = ("epoch", "lr", "loss_total", "loss_margin", "loss_recon", "acc_train", "acc_test")
GRID_HEADER = ("train_level", "test_level", "accuracy")


# ----------------------------------------------------------------------
# optimizer
# ----------------------------------------------------------------------
@dataclass
class OptimizerState:
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params, grads, state, lr=None):
    """One bias-corrected Adam update of ``params`` (dict path -> ndarray) in place.

    A non-finite gradient aborts before anything is modified.
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for parameter '{name}'")
    lr = state.lr if lr is None else lr
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    correction = np.sqrt(1.0 - b2**t) / (1.0 - b1**t)
    for name, p in params.items():
        g = grads[name]
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p -= (lr * correction) * m / (np.sqrt(v) + state.eps * np.sqrt(1.0 - b2**t))
    return params, state


class Adam:
    def __init__(self, named_params, lr=0.001):
        self.params = dict(named_params)
        self.state = OptimizerState(lr=lr)

    def step(self, lr=None):
        adam_step(
            {k: p.data for k, p in self.params.items()},
            {k: p.grad for k, p in self.params.items()},
            self.state,
            lr,
        )

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()


def lr_schedule(epoch, base_lr=0.001, step=20, factor=0.5):
    """Step decay: ``base_lr * factor ** floor(epoch / step)``."""
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    return base_lr * factor ** (epoch // step)


# ----------------------------------------------------------------------
# training
# ----------------------------------------------------------------------
@dataclass
class EvalResult:
    accuracy: float
    per_class: dict
    n_samples: int


@dataclass
class RunMetrics:
    epochs: list = field(default_factory=list)
    timings: list = field(default_factory=list)
    grid: list = field(default_factory=list)
    best_epoch: int = -1
    best_accuracy: float = 0.0


@dataclass
class TrainResult:
    model: PointCloudClassifier
    metrics: RunMetrics
    checkpoint: Path | None = None


def _accuracy(pred, labels):
    return float(np.mean(np.asarray(pred) == np.asarray(labels))) if len(labels) else 0.0


def train(config, dataset, seed=None, out_dir=None, train_samples=None, log=None):
    """Train a model from scratch; keeps the best-by-test-accuracy weights.

    ``train_samples`` overrides ``dataset.train`` (used for corrupted training
    mixes). With ``out_dir`` the metrics stream, timings and best checkpoint
    are written there. The returned model carries the best weights.
    """
    seed = config.seed if seed is None else seed
    samples = dataset.train if train_samples is None else train_samples
    model = PointCloudClassifier(config, dataset.n_classes, seed=seed)
    out_dir = Path(out_dir) if out_dir is not None else None
    ckpt_path = out_dir / "checkpoint" if out_dir is not None else None
    metrics_fh = timing_fh = None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        metrics_fh = open(out_dir / "metrics.jsonl", "w")
        timing_fh = open(out_dir / "timing.jsonl", "w")

    if config.aggregator == "netvlad":
        init_batches = []
        for i, (points, _) in enumerate(batch_iterator(samples, config.batch_size, shuffle_seed=(seed, 1_000_003))):
            if i >= config.vlad_init_batches:
                break
            init_batches.append(points)
        model.init_vlad(init_batches, seed)

    optimizer = Adam(model.named_parameters(), lr=config.lr)
    metrics = RunMetrics()
    best_state = None
    try:
        for epoch in range(config.epochs):
            started = time.perf_counter()
            lr = lr_schedule(epoch, config.lr, config.lr_step, config.lr_factor)
            model.train()
            totals = {"total": 0.0, "margin": 0.0, "recon": 0.0}
            correct = seen = batches = 0
            for points, labels in batch_iterator(samples, config.batch_size, shuffle_seed=(seed, epoch)):
                optimizer.zero_grad()
                parts = model.loss(points, labels)
                total = float(parts.total.data)
                if not np.isfinite(total):
                    raise TrainingDiverged(
                        f"loss became {total} at epoch {epoch}", checkpoint=ckpt_path if best_state else None
                    )
                parts.total.backward()
                try:
                    optimizer.step(lr)
                except NumericError as exc:
                    raise TrainingDiverged(str(exc), checkpoint=ckpt_path if best_state else None) from None
                totals["total"] += total
                totals["margin"] += float(parts.margin.data)
                totals["recon"] += float(parts.recon.data) if parts.recon is not None else 0.0
                correct += int(np.sum(parts.predictions == labels))
                seen += len(labels)
                batches += 1
            test_acc = evaluate(model, dataset.test, batch_size=config.batch_size).accuracy
            n = max(batches, 1)
            record = {
                "epoch": epoch,
                "lr": lr,
                "loss_total": totals["total"] / n,
                "loss_margin": totals["margin"] / n,
                "loss_recon": totals["recon"] / n,
                "acc_train": correct / seen if seen else 0.0,
                "acc_test": test_acc,
            }
            metrics.epochs.append(record)
            elapsed = time.perf_counter() - started
            metrics.timings.append({"epoch": epoch, "seconds": elapsed})
            if test_acc > metrics.best_accuracy or best_state is None:
                metrics.best_accuracy = test_acc
                metrics.best_epoch = epoch
                best_state = {k: v.copy() for k, v in model.state_dict().items()}
                if ckpt_path is not None:
                    save_checkpoint(model, ckpt_path, dataset.class_names, {"epoch": epoch, "acc_test": test_acc})
            if metrics_fh:
                metrics_fh.write(json.dumps(record) + "\n")
                metrics_fh.flush()
                timing_fh.write(json.dumps({"epoch": epoch, "seconds": round(elapsed, 3)}) + "\n")
                timing_fh.flush()
            if log:
                log(record)
    finally:
        if metrics_fh:
            metrics_fh.close()
            timing_fh.close()
    if best_state is not None:
        model.load_state_dict(best_state)
    elif ckpt_path is not None:
        save_checkpoint(model, ckpt_path, dataset.class_names, {"epoch": -1})
    model.eval()
    return TrainResult(model=model, metrics=metrics, checkpoint=ckpt_path)


def evaluate(model, samples, corruption=None, batch_size=16, config=None):
    """Accuracy and per-class accuracy of ``model`` (a model or checkpoint path).

    Corruption, when given, is applied to the samples before evaluation.
    """
    if not isinstance(model, PointCloudClassifier):
        model, _ = load_checkpoint(model, config)
    if corruption is not None:
        samples = corrupt_all(samples, corruption)
    was_training = model.training
    model.eval()
    preds, labels = [], []
    for points, lab in batch_iterator(samples, batch_size, drop_last=False):
        preds.append(model.predict(points))
        labels.append(lab)
    model.train(was_training)
    if not labels:
        return EvalResult(0.0, {}, 0)
    pred = np.concatenate(preds)
    lab = np.concatenate(labels)
    per_class = {int(c): _accuracy(pred[lab == c], lab[lab == c]) for c in np.unique(lab)}
    return EvalResult(_accuracy(pred, lab), per_class, len(lab))


# ----------------------------------------------------------------------
# sweeps
# ----------------------------------------------------------------------
def corruption_for(mode, level, seed):
    if mode == "outliers":
        return CorruptionSpec(outlier_count=int(level), seed=seed)
    if mode == "perturb":
        return CorruptionSpec(perturb_std=float(level), seed=seed)
    raise ValueError(f"unknown sweep mode {mode!r}")


def _sweep_row(config, dataset, mode, train_level, test_levels, seed):
    spec = corruption_for(mode, train_level, seed)
    mix = build_training_mix(dataset.train, spec, seed=seed)
    result = train(config, dataset, seed=seed, train_samples=mix)
    rows = []
    for test_level in test_levels:
        # test corruption seed is shared across rows so every model sees the same test set
        acc = evaluate(result.model, dataset.test, corruption_for(mode, test_level, seed + 1)).accuracy
        rows.append((train_level, test_level, acc))
    return rows


def run_cells(fn, cells, parallel=1):
    """Evaluate ``fn(*cell)`` for every cell, in order; cells share no state."""
    if parallel <= 1 or len(cells) <= 1:
        return [fn(*cell) for cell in cells]
    with ProcessPoolExecutor(max_workers=parallel) as pool:
        futures = [pool.submit(fn, *cell) for cell in cells]
        return [f.result() for f in futures]


def sweep(config, dataset, mode, train_levels, test_levels, seed=None, parallel=1):
    """Train once per train level (clean + corrupted mix) and evaluate at every test level.

    Returns a list of ``(train_level, test_level, accuracy)`` rows in
    train-major order.
    """
    if not train_levels or not test_levels:
        raise ValueError("sweep needs non-empty level lists")
    seed = config.seed if seed is None else seed
    cells = [(config, dataset, mode, lvl, list(test_levels), seed) for lvl in train_levels]
    rows = []
    for part in run_cells(_sweep_row, cells, parallel):
        rows.extend(part)
    return rows


def write_grid_csv(path, rows):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(GRID_HEADER)
        for train_level, test_level, acc in rows:
            writer.writerow([_level(train_level), _level(test_level), f"{acc:.6f}"])


def _level(value):
    return f"{value:g}" if isinstance(value, float) else str(value)
