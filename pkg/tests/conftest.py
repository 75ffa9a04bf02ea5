"""Shared fixtures.

The expensive artifacts — the digit corpus on disk and the two
smoke-trained models — are cached under ``.cache/`` at the repository root
(override with NOVELTY_AE_TEST_CACHE) so repeated pytest invocations reuse
them. A cached run is only accepted when its config fingerprint matches
the fixture's config and training reached the configured horizon.
"""

from __future__ import annotations

import logging
import os
import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from dataset_factory import build_digits_idx  # noqa: E402

REPO_ROOT = Path(__file__).resolve().parent.parent
CACHE_ROOT = Path(os.environ.get("NOVELTY_AE_TEST_CACHE", REPO_ROOT / ".cache"))

SMOKE_CLASS = 1
SMOKE_SEED = 0

# verdict lines recorded by the acceptance tests; replayed after the run so
# they stay visible even when pytest captures test output at the fd level
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance gate")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def smoke_config(digits_root: Path):
    """Desk-scale config for the main smoke-trained model."""
    from novelty_ae.config import desk_preset

    return desk_preset(dataset=str(digits_root), data_format="idx",
                       known_class=SMOKE_CLASS, protocol="B",
                       base_width=4, seed=SMOKE_SEED)


def tanh_variant_config(digits_root: Path):
    """Bounded-encoder ablation: tanh latent, no feature reconstruction, no cycle."""
    return smoke_config(digits_root).replace(
        tanh_encoder=True, active_levels=[], alpha_z=0.0)


@pytest.fixture(scope="session")
def digits_root() -> Path:
    root = CACHE_ROOT / "digits_idx"
    if not (root / "train-images-idx3-ubyte").exists():
        build_digits_idx(root)
    return root


def _ensure_trained(config, run_dir: Path) -> Path:
    """Train (or resume) a run unless a finished, matching one is cached."""
    from novelty_ae import checkpoint as ckpt
    from novelty_ae.trainer import train

    latest = ckpt.latest_checkpoint(run_dir) if run_dir.exists() else None
    if latest is not None:
        payload = ckpt.load_checkpoint(latest)
        if payload["config"] == config.to_dict() and payload["iteration"] >= config.T:
            return run_dir
        if payload["config"] != config.to_dict():
            raise RuntimeError(
                f"cached run {run_dir} was trained with a different config; "
                "delete it to retrain")
    logging.getLogger(__name__).warning(
        "training smoke model into %s (%d iterations, this takes a while)",
        run_dir, config.T)
    trainer = train(config, run_dir, resume=latest is not None)
    trainer.close()
    return run_dir


@pytest.fixture(scope="session")
def smoke_run(digits_root) -> Path:
    """Run directory of the fully trained desk-scale model."""
    return _ensure_trained(smoke_config(digits_root),
                           CACHE_ROOT / "runs" / f"model_digits_idx_{SMOKE_CLASS}")


@pytest.fixture(scope="session")
def tanh_run(digits_root) -> Path:
    """Run directory of the bounded-encoder ablation variant."""
    return _ensure_trained(tanh_variant_config(digits_root),
                           CACHE_ROOT / "runs" / f"model_digits_idx_{SMOKE_CLASS}_tanh")


@pytest.fixture(scope="session")
def smoke_model(smoke_run):
    from novelty_ae.evaluation import load_trained_model

    return load_trained_model(smoke_run)


@pytest.fixture(scope="session")
def smoke_split(digits_root, smoke_model):
    from novelty_ae.data import load_dataset, make_split

    _, config = smoke_model
    collection = load_dataset(digits_root, "idx")
    return make_split(collection, config.known_class, config.protocol, config.seed)


@pytest.fixture()
def tiny_model():
    """A small untrained-architecture model for fast scoring/unit tests."""
    from novelty_ae.config import desk_preset
    from novelty_ae.networks import build_model

    cfg = desk_preset(base_width=2, d_z=6, channels=1, seed=3)
    model = build_model(cfg)
    model.mark_trained(1)
    model.eval()
    return model
