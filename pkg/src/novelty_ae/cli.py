"""Command-line interface.

Subcommands: ``train``, ``score``, ``eval``, ``ablate``, ``viz``. Exit
codes are stable so schedulers can branch on them: 0 success, 2 bad
configuration or inputs, 3 training aborted, 4 checkpoint problem, 5
missing artifacts (datasets, models, results).
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np
import torch

from .checkpoint import CheckpointError, latest_checkpoint
from .config import (ConfigError, TrainConfig, config_from_mapping,
                     load_config, parse_overrides, save_config)
from .data import (IngestError, ShapeError, SplitError, load_dataset,
                   make_split)
from .evaluation import (EvalError, RESULT_COLUMNS, ablation_driver,
                         evaluate_split, load_trained_model, resolve_model,
                         run_protocol, write_results_json, write_results_tsv)
from .scoring import ScoringError, encode_images, reconstruct_images, score_batch, select_scores, write_scores
from .trainer import Trainer, TrainingAbort, train
from .viz import (VizError, latent_heatmap, latent_histogram, level_curve,
                  reconstruction_grid)

log = logging.getLogger("novelty_ae")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_TRAINING = 3
EXIT_CHECKPOINT = 4
EXIT_MISSING = 5


class MissingArtifact(Exception):
    """A required input file, model, or result is absent."""


def _add_common_data_args(p: argparse.ArgumentParser):
    p.add_argument("--data", required=True, help="dataset path")
    p.add_argument("--format", default="idx",
                   choices=["idx", "cifar-binary", "image-directory"],
                   help="dataset layout")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="novelty-ae",
        description="One-class novelty detection with an adversarial autoencoder")
    parser.add_argument("--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="train a one-class model")
    p_train.add_argument("--config", help="YAML config file")
    p_train.add_argument("--override", action="append", default=[],
                         metavar="KEY=VALUE",
                         help="config override, repeatable; the last value wins")
    p_train.add_argument("--seed", type=int, help="seed for every random stream")
    p_train.add_argument("--out", required=True, help="run directory")
    p_train.add_argument("--resume", action="store_true",
                         help="continue from the newest checkpoint in --out")
    p_train.add_argument("--force", action="store_true",
                         help="discard any previous run in --out")
    p_train.add_argument("--stop-at", type=int, default=None,
                         help="pause after this iteration (for staged runs)")

    p_score = sub.add_parser("score", help="score images with a trained model")
    p_score.add_argument("--model", required=True, help="run directory of a trained model")
    _add_common_data_args(p_score)
    p_score.add_argument("--known-class", type=int, default=None,
                         help="score that class's test split instead of every image")
    p_score.add_argument("--protocol", default="B", choices=["A", "B"])
    p_score.add_argument("--score", default="sa", choices=["pp", "sc", "sa"],
                         help="score method")
    p_score.add_argument("--level", type=int, default=4, choices=range(5),
                         help="feature level")
    p_score.add_argument("--seed", type=int, default=0, help="split seed")
    p_score.add_argument("--out", required=True, help="output TSV path")
    p_score.add_argument("--force", action="store_true", help="overwrite existing output")

    p_eval = sub.add_parser("eval", help="AUC over dataset classes from a model registry")
    p_eval.add_argument("--registry", required=True,
                        help="directory of model_<dataset>_<class> runs")
    _add_common_data_args(p_eval)
    p_eval.add_argument("--protocol", default="B", choices=["A", "B"])
    p_eval.add_argument("--classes", default=None,
                        help="comma-separated class list (default: all)")
    p_eval.add_argument("--score", default="sa", choices=["pp", "sc", "sa"])
    p_eval.add_argument("--level", type=int, default=4, choices=range(5))
    p_eval.add_argument("--seed", type=int, default=0)
    p_eval.add_argument("--out", required=True, help="output directory")
    p_eval.add_argument("--force", action="store_true", help="overwrite existing results")

    p_abl = sub.add_parser("ablate", help="score-method x level grid for one model")
    p_abl.add_argument("--model", required=True, help="run directory")
    _add_common_data_args(p_abl)
    p_abl.add_argument("--protocol", default="B", choices=["A", "B"])
    p_abl.add_argument("--seed", type=int, default=0)
    p_abl.add_argument("--out", required=True, help="output directory")
    p_abl.add_argument("--force", action="store_true", help="overwrite existing results")

    p_viz = sub.add_parser("viz", help="diagnostic figures for a trained model")
    p_viz.add_argument("--model", required=True, help="run directory")
    _add_common_data_args(p_viz)
    p_viz.add_argument("--protocol", default="B", choices=["A", "B"])
    p_viz.add_argument("--seed", type=int, default=0)
    p_viz.add_argument("--results", default=None,
                       help="results TSV to plot as an AUC-by-level curve")
    p_viz.add_argument("--score", default="sc", choices=["pp", "sc", "sa"],
                       help="method filter for the level curve")
    p_viz.add_argument("--out", required=True, help="output directory")
    return parser


def _build_train_config(args) -> TrainConfig:
    overrides = parse_overrides(args.override)
    if args.config:
        if not Path(args.config).exists():
            raise MissingArtifact(f"config file not found: {args.config}")
        config = load_config(args.config, overrides)
    else:
        config = config_from_mapping(overrides)
    if args.seed is not None:
        config = config.replace(seed=args.seed)
    return config.validate()


def _require(path: Path, what: str) -> Path:
    if not Path(path).exists():
        raise MissingArtifact(f"{what} not found: {path}")
    return Path(path)


def _refuse_existing(path: Path, force: bool):
    if Path(path).exists() and not force:
        raise ConfigError(f"{path} already exists; pass --force to overwrite")


def cmd_train(args) -> int:
    config = _build_train_config(args)
    out_dir = Path(args.out)
    existing = latest_checkpoint(out_dir) if out_dir.exists() else None
    if existing is not None and not args.resume:
        if not args.force:
            raise ConfigError(
                f"{out_dir} already holds checkpoints; pass --resume to "
                "continue or --force to start over")
        for stale in list(out_dir.glob("ckpt_*.npz")) + list(out_dir.glob("ckpt_*.npz.done")):
            stale.unlink()
        for name in ("metrics.tsv", "split.json", "config.yaml"):
            stale = out_dir / name
            if stale.exists():
                stale.unlink()
    _require(Path(config.dataset), "dataset")
    out_dir.mkdir(parents=True, exist_ok=True)
    if not args.resume:
        save_config(config, out_dir / "config.yaml")
    trainer = train(config, out_dir, resume=args.resume, stop_at=args.stop_at)
    trainer.close()
    log.info("finished at iteration %d; artifacts in %s", trainer.t, out_dir)
    return EXIT_OK


def cmd_score(args) -> int:
    _refuse_existing(Path(args.out), args.force)
    model, config = load_trained_model(_require(Path(args.model), "model run directory"))
    torch.set_num_threads(config.torch_threads)
    collection = load_dataset(_require(Path(args.data), "dataset"), args.format)
    if args.known_class is None:
        records = score_batch(model, collection.pixels,
                              use_preactivation=config.use_preactivation)
    else:
        split = make_split(collection, args.known_class, args.protocol, args.seed)
        records = score_batch(model, split.test_in, label="in",
                              use_preactivation=config.use_preactivation)
        tail = score_batch(model, split.test_out, label="out",
                           use_preactivation=config.use_preactivation)
        for rec in tail:
            rec.sample_id += len(records)
        records.extend(tail)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    write_scores(records, args.out)
    log.info("wrote %d scores to %s", len(records), args.out)
    return EXIT_OK


def cmd_eval(args) -> int:
    out_dir = Path(args.out)
    _refuse_existing(out_dir / "results.tsv", args.force)
    _require(Path(args.registry), "model registry")
    _require(Path(args.data), "dataset")
    classes = None
    if args.classes:
        classes = [int(c) for c in args.classes.split(",") if c.strip() != ""]
    results = run_protocol(args.registry, args.data, args.format, args.protocol,
                           classes=classes, method=args.score, level=args.level,
                           seed=args.seed)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_results_tsv(results, out_dir / "results.tsv")
    write_results_json(results, out_dir / "results.json")
    mean_auc = float(np.mean([r.auc for r in results]))
    log.info("mean AUC over %d classes: %.4f", len(results), mean_auc)
    return EXIT_OK


def cmd_ablate(args) -> int:
    out_dir = Path(args.out)
    _refuse_existing(out_dir / "ablation.tsv", args.force)
    results = ablation_driver(_require(Path(args.model), "model run directory"),
                              _require(Path(args.data), "dataset"),
                              args.format, args.protocol, seed=args.seed)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_results_tsv(results, out_dir / "ablation.tsv")
    write_results_json(results, out_dir / "ablation.json")
    log.info("wrote %d grid cells to %s", len(results), out_dir / "ablation.tsv")
    return EXIT_OK


def _read_level_curve(path: Path, method: str):
    lines = _require(path, "results table").read_text().splitlines()
    if not lines or lines[0].split("\t") != RESULT_COLUMNS:
        raise EvalError(f"{path} is not a results table")
    points = {}
    for line in lines[1:]:
        cells = line.split("\t")
        if len(cells) == len(RESULT_COLUMNS) and cells[3] == method:
            points[int(cells[4])] = float(cells[5])
    if not points:
        raise EvalError(f"no rows with method {method!r} in {path}")
    levels = sorted(points)
    return levels, [points[l] for l in levels]


def cmd_viz(args) -> int:
    model, config = load_trained_model(_require(Path(args.model), "model run directory"))
    torch.set_num_threads(config.torch_threads)
    collection = load_dataset(_require(Path(args.data), "dataset"), args.format)
    split = make_split(collection, config.known_class, args.protocol, args.seed)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)

    sample = split.test_in[:64]
    codes = encode_images(model, sample)
    recons = reconstruct_images(model, sample[:8])
    written = [
        latent_heatmap(codes, out_dir / "latent_heatmap.png"),
        latent_histogram(codes, out_dir / "latent_histogram.png"),
        reconstruction_grid(sample[:8], recons, out_dir / "reconstructions.png"),
    ]
    if args.results:
        levels, aucs = _read_level_curve(Path(args.results), args.score)
        written.append(level_curve(levels, aucs, out_dir / "level_curve.png",
                                   title=f"AUC by feature level ({args.score})"))
    log.info("wrote %s", ", ".join(p.name for p in written))
    return EXIT_OK


_HANDLERS = {
    "train": cmd_train,
    "score": cmd_score,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "viz": cmd_viz,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse exits 2 on bad usage, 0 on --help; keep those codes
        return int(exc.code or 0)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        return _HANDLERS[args.command](args)
    except (ConfigError, IngestError, ShapeError, SplitError, ScoringError,
            VizError) as exc:
        log.error("%s", exc)
        return EXIT_CONFIG
    except TrainingAbort as exc:
        log.error("%s", exc)
        return EXIT_TRAINING
    except CheckpointError as exc:
        log.error("%s", exc)
        return EXIT_CHECKPOINT
    except (MissingArtifact, EvalError, FileNotFoundError) as exc:
        log.error("%s", exc)
        return EXIT_MISSING


if __name__ == "__main__":
    sys.exit(main())
