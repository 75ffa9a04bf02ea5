"""Detection quality evaluation.

AUC is computed by ranks (the Mann-Whitney statistic) with half credit for
ties, which matches the pairwise definition exactly — no trapezoid
approximation. The protocol runner scores every class of a dataset against
its trained model from a registry directory; the adversarial harness
measures how the AUC degrades when test images are perturbed inside an
L-infinity ball.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt
from .config import TrainConfig, config_from_mapping
from .data import OneClassSplit, load_dataset, make_split
from .networks import NoveltyModel
from .scoring import SCORE_METHODS, N_LEVELS, score_batch, select_scores

log = logging.getLogger(__name__)


class EvalError(Exception):
    """Evaluation asked for inputs or artifacts that are not available."""


def auc(scores_in: np.ndarray, scores_out: np.ndarray) -> float:
    """Probability that a novel sample outscores an in-class one (ties count half).

    Exactly equals the average over all (in, out) pairs of
    1[out > in] + 0.5 * 1[out == in].
    """
    s_in = np.asarray(scores_in, dtype=np.float64).ravel()
    s_out = np.asarray(scores_out, dtype=np.float64).ravel()
    if s_in.size == 0 or s_out.size == 0:
        raise EvalError("AUC needs at least one score on each side")
    if not (np.isfinite(s_in).all() and np.isfinite(s_out).all()):
        raise EvalError("AUC input contains non-finite scores")
    s_in = np.sort(s_in)
    below = np.searchsorted(s_in, s_out, side="left")
    below_or_equal = np.searchsorted(s_in, s_out, side="right")
    credit = below + 0.5 * (below_or_equal - below)
    return float(credit.sum() / (s_in.size * s_out.size))


@dataclass
class EvalResult:
    """One (class, score method, level) evaluation outcome."""

    dataset: str
    known_class: int
    protocol: str
    method: str
    level: int
    auc: float
    n_in: int
    n_out: int
    trained_iterations: int
    config_fingerprint: str

    def row(self) -> list:
        return [self.dataset, self.known_class, self.protocol, self.method,
                self.level, repr(self.auc), self.n_in, self.n_out,
                self.trained_iterations, self.config_fingerprint]


RESULT_COLUMNS = ["dataset", "known_class", "protocol", "method", "level",
                  "auc", "n_in", "n_out", "trained_iterations",
                  "config_fingerprint"]


def load_trained_model(run_dir: str | Path):
    """Rebuild the model of a finished run from its newest checkpoint.

    Returns ``(model, config)`` with the model in eval mode.
    """
    run_dir = Path(run_dir)
    path = ckpt.latest_checkpoint(run_dir)
    if path is None:
        raise EvalError(f"no completed checkpoint under {run_dir}")
    payload = ckpt.load_checkpoint(path)
    config = config_from_mapping(payload["config"])
    conv1_key = "input_disc.conv1.weight_raw"
    channels = int(payload["model_state"][conv1_key].shape[1])
    model = NoveltyModel(channels=channels, d_z=config.d_z,
                      base_width=config.base_width, tanh_encoder=config.tanh_encoder)
    model.load_state_dict(payload["model_state"])
    model.mark_trained(payload["iteration"])
    model.eval()
    return model, config


def registry_key(dataset_name: str, known_class: int) -> str:
    return f"model_{dataset_name}_{known_class}"


def resolve_model(registry_dir: str | Path, dataset_name: str, known_class: int) -> Path:
    """Locate one class's run directory inside the model registry."""
    registry_dir = Path(registry_dir)
    run_dir = registry_dir / registry_key(dataset_name, known_class)
    if run_dir.is_dir() and ckpt.latest_checkpoint(run_dir) is not None:
        return run_dir
    available = sorted(p.name for p in registry_dir.glob("model_*")
                       if p.is_dir() and ckpt.latest_checkpoint(p) is not None)
    raise EvalError(
        f"no trained model for class {known_class} of {dataset_name!r} in "
        f"{registry_dir} (expected {registry_key(dataset_name, known_class)}; "
        f"available: {available or 'none'})")


def score_split(model: NoveltyModel, split: OneClassSplit, config: TrainConfig):
    """Full score records for both test partitions of a split."""
    recs_in = score_batch(model, split.test_in, label="in",
                          use_preactivation=config.use_preactivation)
    recs_out = score_batch(model, split.test_out, label="out",
                           use_preactivation=config.use_preactivation)
    return recs_in, recs_out


def result_from_records(recs_in, recs_out, split: OneClassSplit,
                        config: TrainConfig, method: str, level: int,
                        dataset_name: str, trained_iterations: int) -> EvalResult:
    value = auc(select_scores(recs_in, method, level),
                select_scores(recs_out, method, level))
    return EvalResult(dataset=dataset_name or Path(config.dataset).name,
                      known_class=split.known_class, protocol=split.protocol,
                      method=method, level=level, auc=value,
                      n_in=len(recs_in), n_out=len(recs_out),
                      trained_iterations=trained_iterations,
                      config_fingerprint=config.fingerprint())


def evaluate_split(model: NoveltyModel, split: OneClassSplit, config: TrainConfig,
                   method: str = "sa", level: int = 4,
                   dataset_name: str = "") -> EvalResult:
    """Score a split's test partitions and report the AUC."""
    recs_in, recs_out = score_split(model, split, config)
    return result_from_records(recs_in, recs_out, split, config, method, level,
                               dataset_name, model.trained_iterations)


def run_protocol(registry_dir: str | Path, source: str | Path, data_format: str,
                 protocol: str, classes=None, method: str = "sa", level: int = 4,
                 seed: int = 0) -> list:
    """Evaluate every requested class of a dataset against its registry model."""
    collection = load_dataset(source, data_format)
    dataset_name = Path(source).name
    if classes is None:
        classes = sorted(int(c) for c in np.unique(collection.labels))
    results = []
    for known_class in classes:
        run_dir = resolve_model(registry_dir, dataset_name, known_class)
        model, config = load_trained_model(run_dir)
        split = make_split(collection, known_class, protocol, seed)
        results.append(evaluate_split(model, split, config, method, level,
                                      dataset_name=dataset_name))
        log.info("class %d: AUC(%s, level %d) = %.4f",
                 known_class, method, level, results[-1].auc)
    return results


def make_adversarial_surrogate(images: np.ndarray, epsilon: float,
                               rng: np.random.Generator) -> np.ndarray:
    """Perturb images uniformly inside the L-infinity ball of radius epsilon.

    This is a random-noise stress test, not a decision-boundary attack: it
    probes score stability under bounded perturbations rather than seeking
    the worst case, so its degradation numbers are optimistic relative to a
    true attack.
    """
    if epsilon < 0:
        raise EvalError(f"epsilon must be >= 0, got {epsilon}")
    noise = rng.uniform(-epsilon, epsilon, size=images.shape).astype(np.float32)
    return np.clip(images + noise, -1.0, 1.0)


def adversarial_harness(model: NoveltyModel, split: OneClassSplit, config: TrainConfig,
                        epsilons, method: str = "sa", level: int = 4,
                        seed: int = 0) -> list:
    """AUC under increasing input perturbation; returns (epsilon, auc) pairs."""
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(9,)))
    rows = []
    for eps in epsilons:
        test_in = make_adversarial_surrogate(split.test_in, eps, rng)
        test_out = make_adversarial_surrogate(split.test_out, eps, rng)
        recs_in = score_batch(model, test_in, use_preactivation=config.use_preactivation)
        recs_out = score_batch(model, test_out, use_preactivation=config.use_preactivation)
        rows.append((float(eps), auc(select_scores(recs_in, method, level),
                                     select_scores(recs_out, method, level))))
    return rows


def ablation_driver(run_dir: str | Path, source: str | Path, data_format: str,
                    protocol: str, methods=SCORE_METHODS,
                    levels=tuple(range(N_LEVELS)), seed: int = 0) -> list:
    """Evaluate one trained model over a grid of score methods and levels.

    Cells that make no sense (the pixel score is level-free, so only its
    level-0 cell runs) are skipped with a warning rather than failing the
    sweep.
    """
    model, config = load_trained_model(run_dir)
    collection = load_dataset(source, data_format)
    split = make_split(collection, config.known_class, protocol, seed)
    dataset_name = Path(source).name
    recs_in, recs_out = score_split(model, split, config)
    results = []
    for method in methods:
        for level in levels:
            if method == "pp" and level != 0:
                log.warning("skipping cell (%s, level %d): the pixel score "
                            "has no feature level", method, level)
                continue
            results.append(result_from_records(
                recs_in, recs_out, split, config, method, level,
                dataset_name, model.trained_iterations))
    return results


def write_results_tsv(results: list, path: str | Path) -> None:
    lines = ["\t".join(RESULT_COLUMNS)]
    for res in results:
        lines.append("\t".join(str(v) for v in res.row()))
    Path(path).write_text("\n".join(lines) + "\n")


def write_results_json(results: list, path: str | Path) -> None:
    payload = {
        "results": [asdict(r) for r in results],
        "mean_auc": float(np.mean([r.auc for r in results])) if results else None,
    }
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
