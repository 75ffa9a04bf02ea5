"""Alternating one-class training loop.

Each iteration draws one minibatch of in-class images and one batch of
prior codes, updates the two discriminators on the hinge loss, then
updates the encoder and generator jointly on the adversarial terms plus
the ramped reconstruction and latent-cycle terms.

All randomness comes from named numpy streams whose states are saved in
every checkpoint, so a resumed run continues bit-for-bit where the
original left off. Checkpoints are written behind the training loop by a
worker thread.
"""

from __future__ import annotations

import logging
import queue
import threading
from pathlib import Path

import numpy as np
import torch

from . import checkpoint as ckpt
from .config import ConfigError, TrainConfig
from .data import BatchStream, load_dataset, make_split, save_manifest
from .losses import (LossReport, assemble_eg_objective, hinge_d_loss,
                     hinge_g_loss, latent_cycle_loss, multi_level_recon_loss,
                     ramp_coefficient)
from .networks import NoveltyModel, build_model

log = logging.getLogger(__name__)

METRICS_HEADER = "iteration\tmetric\tvalue"


class TrainingAbort(RuntimeError):
    """Training hit a non-finite loss and stopped; the batch was dumped."""


def sample_prior(rng: np.random.Generator, n: int, d_z: int) -> np.ndarray:
    """Draw n latent codes from the uniform prior on [-1, 1]^d_z as float32."""
    return rng.uniform(-1.0, 1.0, size=(n, d_z)).astype(np.float32)


def latent_containment(codes) -> np.ndarray:
    """Per-sample L1 distance to the unit hypercube [-1, 1]^d.

    Zero when every coordinate already lies in [-1, 1]; otherwise the sum
    of the per-coordinate overshoots.
    """
    z = codes.detach().cpu().numpy() if isinstance(codes, torch.Tensor) else np.asarray(codes)
    z = np.atleast_2d(z)
    return np.maximum(np.abs(z, dtype=np.float64) - 1.0, 0.0).sum(axis=1)


def to_torch_batch(pixels: np.ndarray) -> torch.Tensor:
    """(n, 32, 32, c) float32 numpy batch -> (n, c, 32, 32) torch tensor."""
    return torch.from_numpy(np.ascontiguousarray(pixels)).permute(0, 3, 1, 2).contiguous()


class _CheckpointWriter:
    """Background thread that serializes checkpoints off the training loop."""

    def __init__(self):
        self._queue: queue.Queue = queue.Queue()
        self._error = None
        self._thread = threading.Thread(target=self._loop, daemon=True)
        self._thread.start()

    def _loop(self):
        while True:
            item = self._queue.get()
            if item is None:
                self._queue.task_done()
                return
            try:
                ckpt.save_checkpoint(**item)
            except BaseException as exc:  # surfaced on the next enqueue/flush
                self._error = exc
            finally:
                self._queue.task_done()

    def _check(self):
        if self._error is not None:
            err, self._error = self._error, None
            raise ckpt.CheckpointError(f"background checkpoint write failed: {err}") from err

    def enqueue(self, **kwargs):
        self._check()
        self._queue.put(kwargs)

    def flush(self):
        self._queue.join()
        self._check()

    def close(self):
        self._queue.put(None)
        self._queue.join()
        self._thread.join()
        self._check()


class Trainer:
    """Owns one training run: model, optimizers, RNG streams, and artifacts.

    ``out_dir`` receives ``metrics.tsv`` plus ``ckpt_********.npz``
    archives (with ``.done`` markers). Passing ``resume=True`` restores the
    newest completed checkpoint and continues from its iteration.
    """

    def __init__(self, config: TrainConfig, train_pixels: np.ndarray,
                 out_dir: str | Path, resume: bool = False):
        config.validate()
        torch.set_num_threads(config.torch_threads)
        self.config = config
        self.out_dir = Path(out_dir)
        self.out_dir.mkdir(parents=True, exist_ok=True)
        self.metrics_path = self.out_dir / "metrics.tsv"

        channels = int(train_pixels.shape[-1])
        if config.channels not in (0, channels):
            raise ConfigError(
                f"config expects {config.channels}-channel images, dataset has {channels}")
        self.model: NoveltyModel = build_model(config, channels)
        self.opt_d = torch.optim.Adam(
            list(self.model.latent_disc.parameters())
            + list(self.model.input_disc.parameters()),
            lr=config.lr_d, betas=(config.adam_beta1, config.adam_beta2))
        self.opt_eg = torch.optim.Adam(
            list(self.model.encoder.parameters())
            + list(self.model.generator.parameters()),
            lr=config.lr_eg, betas=(config.adam_beta1, config.adam_beta2))

        # independent, individually seeded streams: batch order and prior draws
        self.data_stream = BatchStream(
            train_pixels, config.N,
            seed=np.random.SeedSequence(config.seed, spawn_key=(1,)))
        self.prior_rng = np.random.default_rng(
            np.random.SeedSequence(config.seed, spawn_key=(2,)))

        self.t = 0
        self.history: list = []
        self._writer = _CheckpointWriter()

        if resume:
            self._restore_latest()
        else:
            self.metrics_path.write_text(METRICS_HEADER + "\n")
        self._metrics_fh = self.metrics_path.open("a")

    # -- checkpointing ---------------------------------------------------

    def _rng_states(self) -> dict:
        return {
            "data": self.data_stream.state(),
            "prior": self.prior_rng.bit_generator.state,
        }

    def _snapshot(self) -> dict:
        model_state = {k: v.detach().clone() for k, v in self.model.state_dict().items()}
        return dict(
            path=self.out_dir / ckpt.checkpoint_name(self.t),
            model_state=model_state,
            opt_d_state=_clone_opt_state(self.opt_d.state_dict()),
            opt_eg_state=_clone_opt_state(self.opt_eg.state_dict()),
            iteration=self.t,
            config_dict=self.config.to_dict(),
            rng_states=self._rng_states(),
            history=list(self.history),
        )

    def save_checkpoint(self):
        self.model.mark_trained(self.t)
        self._writer.enqueue(**self._snapshot())

    def _restore_latest(self):
        path = ckpt.latest_checkpoint(self.out_dir)
        if path is None:
            raise ckpt.CheckpointError(f"no completed checkpoint under {self.out_dir}")
        payload = ckpt.load_checkpoint(path)
        stored = payload["config"]
        current = self.config.to_dict()
        if stored != current:
            diff = sorted(k for k in set(stored) | set(current)
                          if stored.get(k) != current.get(k))
            raise ConfigError(f"config differs from checkpoint on keys: {diff}")
        self.model.load_state_dict(payload["model_state"])
        self.opt_d.load_state_dict(payload["opt_d_state"])
        self.opt_eg.load_state_dict(payload["opt_eg_state"])
        self.data_stream.load_state(payload["rng_states"]["data"])
        self.prior_rng.bit_generator.state = payload["rng_states"]["prior"]
        self.t = payload["iteration"]
        self.history = list(payload["history"])
        self._truncate_metrics()
        log.info("resumed from %s at iteration %d", path.name, self.t)

    def _truncate_metrics(self):
        """Drop metric rows newer than the restored iteration."""
        if not self.metrics_path.exists():
            self.metrics_path.write_text(METRICS_HEADER + "\n")
            for it, name, value in self.history:
                with self.metrics_path.open("a") as fh:
                    fh.write(f"{it}\t{name}\t{value!r}\n")
            return
        kept = [METRICS_HEADER]
        for line in self.metrics_path.read_text().splitlines()[1:]:
            if line and int(line.split("\t", 1)[0]) <= self.t:
                kept.append(line)
        self.metrics_path.write_text("\n".join(kept) + "\n")

    # -- one optimization step -------------------------------------------

    def _guard_finite(self, value: torch.Tensor, label: str, t: int,
                      x: torch.Tensor, z: np.ndarray):
        if torch.isfinite(value).all():
            return
        dump = self.out_dir / f"abort_{t:08d}.npz"
        np.savez(dump, images=x.detach().permute(0, 2, 3, 1).numpy(),
                 prior=z, iteration=np.asarray(t))
        raise TrainingAbort(
            f"non-finite {label} at iteration {t}; offending batch saved to {dump}")

    def train_step(self, t: int) -> LossReport:
        """One discriminator update followed by one encoder/generator update."""
        cfg = self.config
        self.model.train()
        report = LossReport(ramp=ramp_coefficient(t, cfg.T))

        x = to_torch_batch(next(self.data_stream))
        z_prior_np = sample_prior(self.prior_rng, cfg.N, cfg.d_z)
        z_prior = torch.from_numpy(z_prior_np)

        # discriminators: prior codes and real images are the "real" side
        with torch.no_grad():
            z_enc = self.model.encoder(x)
            x_gen = self.model.generator(z_prior)
        dz_real = self.model.latent_disc(z_prior)
        dz_fake = self.model.latent_disc(z_enc)
        dx_real, _ = self.model.input_disc(x)
        dx_fake, _ = self.model.input_disc(x_gen)
        loss_dz = hinge_d_loss(dz_real, dz_fake)
        loss_dx = hinge_d_loss(dx_real, dx_fake)
        loss_d = loss_dz + loss_dx
        self._guard_finite(loss_d, "discriminator loss", t, x, z_prior_np)
        self.model.zero_grad(set_to_none=True)
        loss_d.backward()
        self.opt_d.step()
        report.d_z_loss = float(loss_dz.detach())
        report.d_x_loss = float(loss_dx.detach())

        # encoder/generator: fool both discriminators, reconstruct, close the cycle
        z_enc = self.model.encoder(x)
        x_hat = self.model.generator(z_enc)
        x_gen = self.model.generator(z_prior)
        adv_z = hinge_g_loss(self.model.latent_disc(z_enc))
        adv_x = hinge_g_loss(self.model.input_disc(x_gen)[0])
        if cfg.use_feature_recon:
            with torch.no_grad():
                stack_x = self.model.input_disc.features(x)
            stack_hat = self.model.input_disc.features(x_hat)
            recon = multi_level_recon_loss(stack_x, stack_hat,
                                           cfg.active_levels, cfg.level_mean)
        else:
            recon = adv_z.new_zeros(())
        if cfg.alpha_z > 0:
            cycle = latent_cycle_loss(z_prior, self.model.encoder(x_gen))
        else:
            cycle = adv_z.new_zeros(())
        total = assemble_eg_objective(adv_z, adv_x, recon, cycle,
                                      t, cfg.T, cfg.alpha_z)
        self._guard_finite(total, "encoder/generator loss", t, x, z_prior_np)
        self.model.zero_grad(set_to_none=True)
        total.backward()
        self.opt_eg.step()

        report.eg_adv_z = float(adv_z.detach())
        report.eg_adv_x = float(adv_x.detach())
        report.recon = float(recon.detach())
        report.cycle = float(cycle.detach())
        report.total_eg = float(total.detach())
        return report

    # -- the loop ----------------------------------------------------------

    def _log_metrics(self, t: int, report: LossReport):
        for name, value in report.items():
            self.history.append((t, name, value))
            self._metrics_fh.write(f"{t}\t{name}\t{value!r}\n")
        self._metrics_fh.flush()

    def run(self, stop_at: int | None = None) -> int:
        """Advance training to ``stop_at`` (default: the configured horizon)."""
        cfg = self.config
        end = cfg.T if stop_at is None else min(int(stop_at), cfg.T)
        while self.t < end:
            t = self.t + 1
            report = self.train_step(t)
            self.t = t
            self._log_metrics(t, report)
            if t % cfg.checkpoint_every == 0 or t == cfg.T or t == end:
                self.save_checkpoint()
                log.info("iteration %d/%d  eg=%.4f  d=%.4f", t, cfg.T,
                         report.total_eg, report.d_z_loss + report.d_x_loss)
        self._writer.flush()
        return self.t

    def close(self):
        self._metrics_fh.close()
        self._writer.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def _clone_opt_state(state: dict) -> dict:
    out = {"state": {}, "param_groups": [dict(g) for g in state["param_groups"]]}
    for idx, slots in state["state"].items():
        out["state"][idx] = {
            k: (v.detach().clone() if isinstance(v, torch.Tensor) else v)
            for k, v in slots.items()}
    return out


def train(config: TrainConfig, out_dir: str | Path, resume: bool = False,
          stop_at: int | None = None) -> Trainer:
    """Load the dataset, build the one-class split, and run training.

    The caller owns the returned trainer and must ``close()`` it (or use it
    as a context manager).
    """
    config.validate()
    collection = load_dataset(config.dataset, config.data_format)
    split = make_split(collection, config.known_class, config.protocol, config.seed)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if not resume:
        save_manifest(split, out_dir / "split.json", seed=config.seed)
    trainer = Trainer(config, split.train_in, out_dir, resume=resume)
    trainer.run(stop_at)
    return trainer
