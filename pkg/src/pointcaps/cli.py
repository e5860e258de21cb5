"""Command-line entry point: ``pointcaps {train,eval,gradcheck,ablate,sweep,synth}``.

Exit codes: 0 success, 1 validation error (bad config, arguments or data
layout), 2 runtime failure (divergence, failed gradient check, failed
ablation cell, unreadable checkpoint).
"""

import argparse
import json
import sys
import time
from pathlib import Path

from pointcaps import ablation, gradsuite
from pointcaps.autodiff import precision
from pointcaps.config import ModelConfig
from pointcaps.dataset import (
    OUTLIER_LEVELS,
    PERTURB_LEVELS,
    CorruptionSpec,
    load_dataset,
    make_synthetic_dataset,
    save_dataset,
)
from pointcaps.errors import (
    ConfigError,
    ParseError,
    PointCapsError,
    SchemaError,
    UsageError,
)
from pointcaps.plots import sweep_charts
from pointcaps.training import evaluate, sweep, train, write_grid_csv

EXIT_OK, EXIT_VALIDATION, EXIT_RUNTIME = 0, 1, 2
VALIDATION_ERRORS = (ConfigError, ParseError, SchemaError, UsageError)
DEFAULT_LEVELS = {"outliers": OUTLIER_LEVELS, "perturb": PERTURB_LEVELS}
RESOLVED_CONFIG = "config.ini"


class RuntimeFailure(Exception):
    """A command ran but its result is a failure (exit code 2)."""


# ----------------------------------------------------------------------
# helpers
# ----------------------------------------------------------------------
def _load_config(args):
    try:
        cfg = ModelConfig.load(args.config)
    except FileNotFoundError:
        raise UsageError(f"config file not found: {args.config}") from None
    if getattr(args, "seed", None) is not None:
        cfg = cfg.replace(seed=args.seed).validate()
    return cfg


def load_data(cfg):
    """The dataset a config names: a directory on disk, or synthetic primitives."""
    if cfg.dataset:
        return load_dataset(cfg.dataset, n_points=cfg.n_points, seed=cfg.seed)
    return make_synthetic_dataset(cfg.shapes, cfg.samples_per_class, cfg.n_points, seed=cfg.seed)


def parse_levels(text, mode):
    cast = int if mode == "outliers" else float
    try:
        levels = [cast(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise UsageError(f"--levels: cannot parse {text!r} as {cast.__name__} levels") from None
    if not levels:
        raise UsageError("--levels: empty level list")
    return levels


def _out(args):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _print_epoch(record):
    print(
        f"epoch {record['epoch']:3d}  lr {record['lr']:.2e}  loss {record['loss_total']:.4f}  "
        f"train {record['acc_train']:.3f}  test {record['acc_test']:.3f}",
        flush=True,
    )


# ----------------------------------------------------------------------
# commands
# ----------------------------------------------------------------------
def cmd_train(args):
    cfg = _load_config(args)
    out = _out(args)
    cfg.save(out / RESOLVED_CONFIG)
    result = train(cfg, load_data(cfg), out_dir=out, log=None if args.quiet else _print_epoch)
    print(f"best test accuracy {result.metrics.best_accuracy:.4f} at epoch {result.metrics.best_epoch}")
    return EXIT_OK


def cmd_eval(args):
    cfg = _load_config(args) if args.config else None
    checkpoint = Path(args.checkpoint)
    if cfg is None:
        try:
            cfg = ModelConfig.load(checkpoint / RESOLVED_CONFIG)
        except FileNotFoundError:
            raise UsageError(f"{checkpoint}: no stored config; pass --config") from None
    data = load_data(cfg)
    spec = CorruptionSpec(args.outliers, args.perturb, seed=cfg.seed + 1)
    result = evaluate(checkpoint, data.test, spec, batch_size=cfg.batch_size, config=cfg)
    report = {"accuracy": result.accuracy, "n_samples": result.n_samples, "per_class": {
        data.class_names[c]: acc for c, acc in result.per_class.items()
    }}
    print(json.dumps(report, sort_keys=True))
    return EXIT_OK


def cmd_gradcheck(args):
    started = time.perf_counter()

    def log(report, seconds):
        print(f"{report}  [{seconds:.1f}s]", flush=True)

    reports = gradsuite.run_suite(args.scope, log=log)
    failed = [r.name for r in reports if not r.passed]
    worst = max(reports, key=lambda r: r.max_error)
    print(
        f"{len(reports) - len(failed)}/{len(reports)} items passed; worst {worst.name} "
        f"{worst.max_error:.3e}; {time.perf_counter() - started:.1f}s"
    )
    if failed:
        raise RuntimeFailure(f"gradient check failed for: {', '.join(failed)}")
    return EXIT_OK


def cmd_ablate(args):
    cfg = _load_config(args)
    out = _out(args)
    seeds = [cfg.seed + i for i in range(args.seeds)]

    def log(run_cfg, seed, outcome):
        label = f"{run_cfg.extractor}+{run_cfg.aggregator}+{run_cfg.classifier}"
        flags = f"compose={run_cfg.compose_caps} recon={run_cfg.reconstruction_loss}"
        status = f"{outcome['accuracy']:.4f}" if "accuracy" in outcome else outcome["error"]
        print(f"{label} {flags} seed={seed}: {status}", flush=True)

    result = ablation.run_ablation(
        cfg, load_data(cfg), seeds, out_dir=out, tables=args.tables, parallel=args.parallel, log=log
    )
    for name in result.tables:
        print(f"wrote {out / ablation.FILES[name]}")
    if result.failures:
        raise RuntimeFailure(f"{len(result.failures)} ablation run(s) failed; see {out / 'failures.json'}")
    return EXIT_OK


def cmd_sweep(args):
    cfg = _load_config(args)
    out = _out(args)
    levels = parse_levels(args.levels, args.mode) if args.levels else list(DEFAULT_LEVELS[args.mode])
    data = load_data(cfg)
    curves = {}
    for aggregator in ("maxpool", "netvlad"):
        for classifier in ("fc", "capsule"):
            run_cfg = cfg.replace(aggregator=aggregator, classifier=classifier).validate()
            label = (
                f"{ablation.EXTRACTOR_LABEL[cfg.extractor]}+{ablation.AGGREGATOR_LABEL[aggregator]}"
                f"+{ablation.CLASSIFIER_LABEL[classifier]}"
            )
            rows = sweep(run_cfg, data, args.mode, levels, levels, parallel=args.parallel)
            write_grid_csv(out / f"{args.mode}_{aggregator}_{classifier}.csv", rows)
            curves[label] = rows
            print(f"{label}: {len(rows)} grid cells", flush=True)
    paths = sweep_charts(curves, out, args.mode)
    print(f"wrote {len(curves)} grids and {len(paths)} charts to {out}")
    return EXIT_OK


def cmd_synth(args):
    shapes = [s.strip() for s in args.shapes.split(",") if s.strip()]
    data = make_synthetic_dataset(shapes, args.per_class, args.n_points, seed=args.seed)
    out = _out(args)
    save_dataset(data, out)
    (out / "classes.txt").write_text("\n".join(data.class_names) + "\n")
    print(f"wrote {len(data.train)} train and {len(data.test)} test samples to {out}")
    return EXIT_OK


# ----------------------------------------------------------------------
# argument parsing
# ----------------------------------------------------------------------
def build_parser():
    parser = argparse.ArgumentParser(prog="pointcaps", description=__doc__.splitlines()[0])
    parser.add_argument("--precision", choices=("f32", "f64"), default="f32", help="tensor dtype (default f32)")
    sub = parser.add_subparsers(dest="command", required=True)

    def with_config(p, required=True):
        p.add_argument("--config", required=required, help="run configuration file")
        p.add_argument("--seed", type=int, help="override the config seed")

    p = sub.add_parser("train", help="train one model")
    with_config(p)
    p.add_argument("--out", required=True, help="run directory")
    p.add_argument("--quiet", action="store_true", help="suppress per-epoch lines")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on the test split")
    with_config(p, required=False)
    p.add_argument("--checkpoint", required=True, help="checkpoint directory")
    p.add_argument("--outliers", type=int, default=0, help="outlier points per test sample")
    p.add_argument("--perturb", type=float, default=0.0, help="Gaussian perturbation std on test samples")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="run the registered gradient checks")
    p.add_argument("--scope", choices=gradsuite.SCOPES, default="ops")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("ablate", help="classifier, ComposeCaps and reconstruction-loss ablation tables")
    with_config(p)
    p.add_argument("--out", required=True)
    p.add_argument("--seeds", type=int, default=3, help="runs per cell, seeds seed..seed+n-1 (default 3)")
    p.add_argument("--tables", nargs="+", choices=ablation.TABLES, default=list(ablation.TABLES))
    p.add_argument("--parallel", type=int, default=1, help="concurrent runs")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("sweep", help="train/test corruption grid with SVG charts")
    with_config(p)
    p.add_argument("--mode", choices=("outliers", "perturb"), required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--levels", help="comma-separated levels for both train and test (default: the published lists)")
    p.add_argument("--parallel", type=int, default=1, help="concurrent train levels")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("synth", help="write a synthetic primitives dataset")
    p.add_argument("--shapes", default="sphere,cube,cylinder,cone")
    p.add_argument("--per-class", type=int, default=100)
    p.add_argument("--n-points", type=int, default=256)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse reports usage errors with code 2
        return EXIT_OK if exc.code == 0 else EXIT_VALIDATION
    try:
        with precision(args.precision):
            return args.func(args)
    except VALIDATION_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (RuntimeFailure, PointCapsError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
