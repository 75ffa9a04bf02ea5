"""Adversarial, reconstruction, and latent-cycle training losses.

Both GAN pairs use the hinge formulation. The reconstruction loss compares
images through the input discriminator's hidden layers rather than pixel
space alone, and the two non-adversarial terms are ramped in linearly over
the course of training.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch

from .networks import FeatureStack


class LossInputError(ValueError):
    """Loss called with inputs it cannot score (empty batch, bad levels)."""


def _check_logits(t: torch.Tensor, name: str):
    if t.ndim != 1:
        raise LossInputError(f"{name} must be a 1-D logit vector, got shape {tuple(t.shape)}")
    if t.numel() == 0:
        raise LossInputError(f"{name} is empty; hinge losses are undefined on empty batches")


def hinge_d_loss(real_logits: torch.Tensor, fake_logits: torch.Tensor) -> torch.Tensor:
    """Discriminator hinge loss: push real logits above +1, fake below -1."""
    _check_logits(real_logits, "real_logits")
    _check_logits(fake_logits, "fake_logits")
    return (torch.relu(1.0 - real_logits).mean()
            + torch.relu(1.0 + fake_logits).mean())


def hinge_g_loss(fake_logits: torch.Tensor) -> torch.Tensor:
    """Generator-side hinge loss: raise the discriminator's fake logits."""
    _check_logits(fake_logits, "fake_logits")
    return -fake_logits.mean()


def multi_level_recon_loss(stack_x: FeatureStack, stack_xhat: FeatureStack,
                           active_levels: list[int] | None = None,
                           level_mean: bool = False) -> torch.Tensor:
    """Sum of elementwise L1 gaps across feature levels, averaged over the batch.

    Level 0 is the raw image; higher levels are discriminator hidden
    layers. Each level contributes the plain sum of absolute differences
    over its elements (no per-element normalization), unless ``level_mean``
    switches every level to a per-element mean.
    """
    if active_levels is None:
        active_levels = list(range(len(stack_x)))
    n_levels = len(stack_x.levels)
    if len(stack_xhat.levels) != n_levels:
        raise LossInputError("feature stacks have different depths")
    bad = [l for l in active_levels if not 0 <= l < n_levels]
    if bad:
        raise LossInputError(f"active levels {bad} out of range 0..{n_levels - 1}")
    batch = stack_x.levels[0].shape[0]
    if batch == 0:
        raise LossInputError("empty batch")
    total = stack_x.levels[0].new_zeros(())
    for l in active_levels:
        a, b = stack_x.levels[l], stack_xhat.levels[l]
        if a.shape != b.shape:
            raise LossInputError(f"level {l} shapes differ: {tuple(a.shape)} vs {tuple(b.shape)}")
        gap = (a - b).abs().flatten(1).sum(dim=1)
        if level_mean:
            gap = gap / a[0].numel()
        total = total + gap.mean()
    return total


def latent_cycle_loss(z: torch.Tensor, z_cycle: torch.Tensor) -> torch.Tensor:
    """Mean L1 distance between prior codes and their re-encodings."""
    if z.shape != z_cycle.shape:
        raise LossInputError(f"code shapes differ: {tuple(z.shape)} vs {tuple(z_cycle.shape)}")
    if z.numel() == 0:
        raise LossInputError("empty batch")
    return (z - z_cycle).abs().sum(dim=1).mean()


def ramp_coefficient(t: int, total: int) -> float:
    """Linear ramp t/T for the non-adversarial loss terms (t counted from 1)."""
    if not 1 <= t <= total:
        raise LossInputError(f"iteration {t} outside 1..{total}")
    return t / total


@dataclass
class LossReport:
    """Scalar components of one optimization step, for the metrics log."""

    d_z_loss: float = float("nan")
    d_x_loss: float = float("nan")
    eg_adv_z: float = float("nan")
    eg_adv_x: float = float("nan")
    recon: float = float("nan")
    cycle: float = float("nan")
    ramp: float = float("nan")
    total_eg: float = float("nan")

    def items(self):
        return [("d_z_loss", self.d_z_loss), ("d_x_loss", self.d_x_loss),
                ("eg_adv_z", self.eg_adv_z), ("eg_adv_x", self.eg_adv_x),
                ("recon", self.recon), ("cycle", self.cycle),
                ("ramp", self.ramp), ("total_eg", self.total_eg)]


def assemble_eg_objective(adv_z: torch.Tensor, adv_x: torch.Tensor,
                          recon: torch.Tensor, cycle: torch.Tensor,
                          t: int, total: int, alpha_z: float) -> torch.Tensor:
    """Combine encoder/generator terms with the ramped weights.

    The adversarial parts enter at full strength; reconstruction and
    latent-cycle terms are scaled by t/T (the cycle term additionally by
    its own weight).
    """
    c = ramp_coefficient(t, total)
    return adv_z + adv_x + c * recon + c * alpha_z * cycle
