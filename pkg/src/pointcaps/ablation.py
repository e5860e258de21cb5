"""Ablation grids: classifier (FC vs capsule), ComposeCaps on/off and
reconstruction loss on/off, for every extractor x aggregator pair.

Each grid cell is the test accuracy of a fresh training run, averaged over
seeds. Runs are cached on disk by (full config text, seed), so a cell shared
by several tables (the default capsule model appears in all three) trains
once, and an interrupted ablation resumes where it stopped.
"""

import csv
import hashlib
import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

from pointcaps.dataset import CorruptionSpec, build_training_mix
from pointcaps.training import evaluate, train

PAIRS = (("pointnet", "maxpool"), ("pointnet", "netvlad"), ("edgeconv", "maxpool"), ("edgeconv", "netvlad"))
EXTRACTOR_LABEL = {"pointnet": "PointNet", "edgeconv": "EdgeConv"}
AGGREGATOR_LABEL = {"maxpool": "Maxpooling", "netvlad": "NetVlad"}
SHORT_AGGREGATOR_LABEL = {"maxpool": "Max", "netvlad": "NetVlad"}
CLASSIFIER_LABEL = {"fc": "FC", "capsule": "3DCapsule"}

CLASSIFIER_HEADER = ("feature_extraction", "aggregation", "classifier", "accuracy")
COMPOSE_HEADER = ("method", "compose_caps", "accuracy")
RECON_HEADER = ("recons_loss",) + tuple(
    f"{EXTRACTOR_LABEL[e]}+{SHORT_AGGREGATOR_LABEL[a]}" for e, a in PAIRS
)
TABLES = ("classifier", "compose", "recon")
FILES = {"classifier": "table_classifier.csv", "compose": "table_composecaps.csv", "recon": "table_reconstruction.csv"}


@dataclass
class AblationResult:
    tables: dict = field(default_factory=dict)  # name -> list of rows
    cells: dict = field(default_factory=dict)  # cell key -> per-seed accuracies (configured test corruption)
    clean_cells: dict = field(default_factory=dict)  # cell key -> per-seed accuracies on the clean test split
    failures: list = field(default_factory=list)

    @property
    def complete(self):
        return not self.failures


def variant(base, extractor, aggregator, classifier="capsule", compose=True, recon=True):
    """The base config with one grid cell's switches applied."""
    return base.replace(
        extractor=extractor,
        aggregator=aggregator,
        classifier=classifier,
        compose_caps=compose,
        reconstruction_loss=recon,
    ).validate()


def cell_key(config):
    """``(extractor, aggregator, classifier, compose_caps, reconstruction_loss)``."""
    return (config.extractor, config.aggregator, config.classifier, config.compose_caps, config.reconstruction_loss)


def run_key(config, seed):
    return hashlib.sha256(f"{config.to_text()}\nseed={seed}".encode()).hexdigest()[:16]


def single_run(config, dataset, seed):
    """Train one model; returns its accuracy on the configured (possibly corrupted)
    test split and on the clean test split."""
    samples = None
    if config.train_outliers or config.train_perturb:
        spec = CorruptionSpec(config.train_outliers, config.train_perturb, seed=seed)
        samples = build_training_mix(dataset.train, spec, seed=seed)
    result = train(config, dataset, seed=seed, train_samples=samples)
    clean = evaluate(result.model, dataset.test, batch_size=config.batch_size).accuracy
    if not (config.test_outliers or config.test_perturb):
        return {"accuracy": clean, "clean_accuracy": clean}
    test_spec = CorruptionSpec(config.test_outliers, config.test_perturb, seed=seed + 1)
    corrupted = evaluate(result.model, dataset.test, test_spec, batch_size=config.batch_size).accuracy
    return {"accuracy": corrupted, "clean_accuracy": clean}


def _guarded_run(config, dataset, seed):
    try:
        return single_run(config, dataset, seed)
    except Exception as exc:  # one failed cell must not sink the grid
        return {"error": f"{type(exc).__name__}: {exc}"}


def _completed(jobs, dataset, parallel):
    """Outcomes of ``jobs`` in order, yielded as each finishes so it can be cached."""
    if parallel <= 1:
        for _, cfg, seed in jobs:
            yield _guarded_run(cfg, dataset, seed)
        return
    with ProcessPoolExecutor(max_workers=parallel) as pool:
        futures = [pool.submit(_guarded_run, cfg, dataset, seed) for _, cfg, seed in jobs]
        for future in futures:
            yield future.result()


def _cells_for(base, tables):
    """Ordered, de-duplicated configs the requested tables need."""
    wanted = {}
    for extractor, aggregator in PAIRS:
        if "classifier" in tables:
            for classifier in ("fc", "capsule"):
                cfg = variant(base, extractor, aggregator, classifier)
                wanted.setdefault(cfg.to_text(), cfg)
        if "compose" in tables:
            for compose in (False, True):
                cfg = variant(base, extractor, aggregator, compose=compose)
                wanted.setdefault(cfg.to_text(), cfg)
        if "recon" in tables:
            for recon in (False, True):
                cfg = variant(base, extractor, aggregator, recon=recon)
                wanted.setdefault(cfg.to_text(), cfg)
    return list(wanted.values())


def run_ablation(base, dataset, seeds=(0,), out_dir=None, tables=TABLES, parallel=1, log=None):
    """Run every cell of ``tables`` for every seed; write CSVs when ``out_dir`` is given.

    Accuracy in each CSV cell is the mean over seeds; a cell with any failed
    seed is left empty and the failure is listed in ``failures.json``. CSV
    accuracies are measured under the config's test corruption; the clean
    test accuracy of the same runs is kept in ``clean_cells``.
    """
    for name in tables:
        if name not in TABLES:
            raise ValueError(f"unknown ablation table {name!r}; choose from {', '.join(TABLES)}")
    out_dir = Path(out_dir) if out_dir is not None else None
    cache_dir = out_dir / "runs" if out_dir is not None else None
    if cache_dir is not None:
        cache_dir.mkdir(parents=True, exist_ok=True)

    configs = _cells_for(base, tables)
    jobs, outcomes = [], {}
    for cfg in configs:
        for seed in seeds:
            key = run_key(cfg, seed)
            cached = cache_dir / f"{key}.json" if cache_dir is not None else None
            if cached is not None and cached.exists():
                outcomes[key] = json.loads(cached.read_text())
            else:
                jobs.append((key, cfg, seed))

    for (key, cfg, seed), outcome in zip(jobs, _completed(jobs, dataset, parallel)):
        outcomes[key] = outcome
        if cache_dir is not None and "accuracy" in outcome:
            (cache_dir / f"{key}.json").write_text(json.dumps(outcome) + "\n")
        if log:
            log(cfg, seed, outcome)

    result = AblationResult()

    def cell(cfg):
        accs, clean = [], []
        for seed in seeds:
            outcome = outcomes[run_key(cfg, seed)]
            if "error" in outcome:
                failure = {
                    "extractor": cfg.extractor,
                    "aggregator": cfg.aggregator,
                    "classifier": cfg.classifier,
                    "compose_caps": cfg.compose_caps,
                    "reconstruction_loss": cfg.reconstruction_loss,
                    "seed": seed,
                    "error": outcome["error"],
                }
                if failure not in result.failures:  # shared cells are visited once per table
                    result.failures.append(failure)
                accs = None
            elif accs is not None:
                accs.append(outcome["accuracy"])
                clean.append(outcome["clean_accuracy"])
        key = cell_key(cfg)
        result.cells[key] = accs
        result.clean_cells[key] = None if accs is None else clean
        return None if accs is None else sum(accs) / len(accs)

    if "classifier" in tables:
        result.tables["classifier"] = [
            (EXTRACTOR_LABEL[e], AGGREGATOR_LABEL[a], CLASSIFIER_LABEL[c], cell(variant(base, e, a, c)))
            for e, a in PAIRS
            for c in ("fc", "capsule")
        ]
    if "compose" in tables:
        result.tables["compose"] = [
            (f"{EXTRACTOR_LABEL[e]}+{AGGREGATOR_LABEL[a]}", "Yes" if flag else "No", cell(variant(base, e, a, compose=flag)))
            for e, a in PAIRS
            for flag in (False, True)
        ]
    if "recon" in tables:
        result.tables["recon"] = [
            ("Yes" if flag else "No", *(cell(variant(base, e, a, recon=flag)) for e, a in PAIRS))
            for flag in (False, True)
        ]

    if out_dir is not None:
        write_tables(result, out_dir)
    return result


def _fmt(value):
    if value is None:
        return ""
    if isinstance(value, float):
        return f"{value:.6f}"
    return str(value)


HEADERS = {"classifier": CLASSIFIER_HEADER, "compose": COMPOSE_HEADER, "recon": RECON_HEADER}


def write_tables(result, out_dir):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for name, rows in result.tables.items():
        with open(out_dir / FILES[name], "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(HEADERS[name])
            for row in rows:
                writer.writerow([_fmt(v) for v in row])
    manifest = out_dir / "failures.json"
    if result.failures:
        manifest.write_text(json.dumps(result.failures, indent=2) + "\n")
    elif manifest.exists():
        manifest.unlink()
