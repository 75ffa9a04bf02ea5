"""Novelty scores computed from reconstructions.

A test image is encoded, regenerated, and compared against its
reconstruction — pixelwise and inside the input discriminator's feature
spaces. Higher scores mean "less like the training class". Every sample
gets a full record: the per-pixel error, the feature-space L1 score s_c,
the centered-cosine score s_a, both of those at every feature level, and
the feature means entering the mean-gap bound.

The final feature level can be represented by the signed pre-activation
pair [min(h,0), relu(h)], keeping the information the ReLU would discard.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .networks import NoveltyModel

COSINE_EPS = 1e-8
SCORE_METHODS = ("pp", "sc", "sa")
N_LEVELS = 5
TOP_LEVEL = N_LEVELS - 1


class ScoringError(Exception):
    """Scoring was asked of a model or inputs it cannot serve."""


def _as_torch(images) -> torch.Tensor:
    if isinstance(images, torch.Tensor):
        x = images
    else:
        arr = np.ascontiguousarray(images, dtype=np.float32)
        if not arr.flags.writeable:
            arr = arr.copy()
        if arr.ndim != 4:
            raise ScoringError(f"expected a rank-4 image batch, got shape {arr.shape}")
        x = torch.from_numpy(arr)
        if x.shape[-1] in (1, 3) and x.shape[1] not in (1, 3):
            x = x.permute(0, 3, 1, 2).contiguous()
    return x


def top_level_features(stack, use_preactivation: bool = True) -> torch.Tensor:
    """Flattened final-level features, optionally as the signed pre-activation pair."""
    if use_preactivation:
        h = stack.preact
        return torch.cat([h.clamp(max=0.0), torch.relu(h)], dim=1).flatten(1)
    return stack.levels[TOP_LEVEL].flatten(1)


def level_features(model: NoveltyModel, x: torch.Tensor, level: int,
                   use_preactivation: bool = True) -> torch.Tensor:
    """Flattened feature vectors of ``x`` at one tap of the input discriminator.

    Level 0 is the image itself; the final level honors the
    pre-activation switch.
    """
    if not 0 <= level < N_LEVELS:
        raise ScoringError(f"feature level must be 0..{N_LEVELS - 1}, got {level}")
    if level == 0:
        return x.flatten(1)
    stack = model.input_disc.features(x)
    if level == TOP_LEVEL:
        return top_level_features(stack, use_preactivation)
    return stack.levels[level].flatten(1)


def score_per_pixel(x: torch.Tensor, x_hat: torch.Tensor) -> torch.Tensor:
    """Summed absolute pixel error per sample."""
    if x.shape != x_hat.shape:
        raise ScoringError(f"shape mismatch: {tuple(x.shape)} vs {tuple(x_hat.shape)}")
    return (x - x_hat).abs().flatten(1).sum(dim=1)


def score_consistency(feat_x: torch.Tensor, feat_hat: torch.Tensor) -> torch.Tensor:
    """Summed absolute feature error per sample (L1 in feature space)."""
    if feat_x.shape != feat_hat.shape:
        raise ScoringError(f"shape mismatch: {tuple(feat_x.shape)} vs {tuple(feat_hat.shape)}")
    return (feat_x - feat_hat).abs().sum(dim=1)


def score_alignment(feat_x: torch.Tensor, feat_hat: torch.Tensor) -> torch.Tensor:
    """One minus the cosine of the mean-centered feature vectors.

    Ranges over [0, 2]: 0 for perfectly aligned pairs, 2 for opposed ones.
    A pair where either centered vector (nearly) vanishes carries no
    direction and scores exactly 1, like an uncorrelated pair.
    """
    if feat_x.shape != feat_hat.shape:
        raise ScoringError(f"shape mismatch: {tuple(feat_x.shape)} vs {tuple(feat_hat.shape)}")
    a = feat_x - feat_x.mean(dim=1, keepdim=True)
    b = feat_hat - feat_hat.mean(dim=1, keepdim=True)
    na = a.norm(dim=1)
    nb = b.norm(dim=1)
    cos = (a * b).sum(dim=1) / (na * nb).clamp_min(COSINE_EPS)
    cos = cos.clamp(-1.0, 1.0)
    degenerate = (na < COSINE_EPS) | (nb < COSINE_EPS)
    return torch.where(degenerate, torch.ones_like(cos), 1.0 - cos)


@dataclass
class ScoreRecord:
    """Every score of one sample.

    ``s_c`` and ``s_a`` are the final-level scores (they equal
    ``layer_scores[4]``); ``layer_scores`` maps each level to its
    ``(s_c, s_a)`` pair; ``m_x``/``m_hat`` are the final-level feature
    means of the input and its reconstruction.
    """

    sample_id: int
    label: str = ""
    s_per_pixel: float = 0.0
    s_c: float = 0.0
    s_a: float = 0.0
    m_x: float = 0.0
    m_hat: float = 0.0
    layer_scores: dict = field(default_factory=dict)


def _require_trained(model: NoveltyModel):
    if model.trained_iterations == 0:
        raise ScoringError(
            "model has no recorded training iterations; score with a trained "
            "checkpoint (or mark_trained for synthetic tests)")


def score_batch(model: NoveltyModel, images, label: str = "",
                use_preactivation: bool = True, chunk: int = 256) -> list:
    """Full score records for a batch of images, in input order.

    Runs in eval mode, so each sample's record is independent of the batch
    it arrived in.
    """
    _require_trained(model)
    x_all = _as_torch(images)
    model.eval()
    records = []
    with torch.no_grad():
        for start in range(0, x_all.shape[0], chunk):
            x = x_all[start:start + chunk]
            x_hat = model.reconstruct(x)
            stack_x = model.input_disc.features(x)
            stack_hat = model.input_disc.features(x_hat)
            pp = score_per_pixel(x, x_hat).double()

            per_level = {}
            for level in range(N_LEVELS):
                if level == 0:
                    fx, fh = x.flatten(1), x_hat.flatten(1)
                elif level == TOP_LEVEL:
                    fx = top_level_features(stack_x, use_preactivation)
                    fh = top_level_features(stack_hat, use_preactivation)
                else:
                    fx = stack_x.levels[level].flatten(1)
                    fh = stack_hat.levels[level].flatten(1)
                per_level[level] = (score_consistency(fx, fh).double(),
                                    score_alignment(fx, fh).double())
                if level == TOP_LEVEL:
                    m_x = fx.mean(dim=1).double()
                    m_hat = fh.mean(dim=1).double()

            for i in range(x.shape[0]):
                records.append(ScoreRecord(
                    sample_id=start + i,
                    label=label,
                    s_per_pixel=float(pp[i]),
                    s_c=float(per_level[TOP_LEVEL][0][i]),
                    s_a=float(per_level[TOP_LEVEL][1][i]),
                    m_x=float(m_x[i]),
                    m_hat=float(m_hat[i]),
                    layer_scores={l: (float(per_level[l][0][i]),
                                      float(per_level[l][1][i]))
                                  for l in range(N_LEVELS)},
                ))
    return records


def select_scores(records: list, method: str, level: int | None = None) -> np.ndarray:
    """Pull one score column out of a record list as float64.

    ``method`` is ``pp``, ``sc``, or ``sa``; ``level`` picks a feature
    level for the latter two (default: the final level).
    """
    if method not in SCORE_METHODS:
        raise ScoringError(f"unknown score method {method!r}; pick from {SCORE_METHODS}")
    if method == "pp":
        return np.asarray([r.s_per_pixel for r in records], dtype=np.float64)
    if level is None or level == TOP_LEVEL:
        attr = "s_c" if method == "sc" else "s_a"
        return np.asarray([getattr(r, attr) for r in records], dtype=np.float64)
    if not 0 <= level < N_LEVELS:
        raise ScoringError(f"feature level must be 0..{N_LEVELS - 1}, got {level}")
    slot = 0 if method == "sc" else 1
    return np.asarray([r.layer_scores[level][slot] for r in records], dtype=np.float64)


def decide(scores, threshold: float) -> np.ndarray:
    """Flag novelty where the score strictly exceeds the threshold."""
    return np.asarray(scores, dtype=np.float64) > threshold


def encode_images(model: NoveltyModel, images, chunk: int = 256) -> np.ndarray:
    """Latent codes of a batch, in eval mode, as (n, d_z) float32."""
    x_all = _as_torch(images)
    model.eval()
    outs = []
    with torch.no_grad():
        for start in range(0, x_all.shape[0], chunk):
            outs.append(model.encoder(x_all[start:start + chunk]).numpy())
    return np.concatenate(outs, axis=0)


def reconstruct_images(model: NoveltyModel, images, chunk: int = 256) -> np.ndarray:
    """Reconstructions of a batch as (n, 32, 32, c) float32 in [-1, 1]."""
    x_all = _as_torch(images)
    model.eval()
    outs = []
    with torch.no_grad():
        x_hat = [model.reconstruct(x_all[s:s + chunk]).permute(0, 2, 3, 1).contiguous()
                 for s in range(0, x_all.shape[0], chunk)]
        outs = [t.numpy() for t in x_hat]
    return np.concatenate(outs, axis=0)


_BASE_COLUMNS = ["sample_id", "label", "s_per_pixel", "s_c", "s_a", "m_x", "m_hat"]


def _columns() -> list:
    cols = list(_BASE_COLUMNS)
    for level in range(N_LEVELS):
        cols += [f"sc_{level}", f"sa_{level}"]
    return cols


def write_scores(records: list, path: str | Path) -> None:
    """Write score records as TSV; floats keep full round-trip precision."""
    lines = ["\t".join(_columns())]
    for r in records:
        cells = [str(r.sample_id), r.label, repr(r.s_per_pixel), repr(r.s_c),
                 repr(r.s_a), repr(r.m_x), repr(r.m_hat)]
        for level in range(N_LEVELS):
            sc, sa = r.layer_scores[level]
            cells += [repr(sc), repr(sa)]
        lines.append("\t".join(cells))
    Path(path).write_text("\n".join(lines) + "\n")


def read_scores(path: str | Path) -> list:
    """Read score records written by :func:`write_scores`, losslessly."""
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0].split("\t") != _columns():
        raise ScoringError(f"{path} is not a score file")
    records = []
    for line in lines[1:]:
        if not line:
            continue
        cells = line.split("\t")
        layer_scores = {}
        for level in range(N_LEVELS):
            sc, sa = cells[7 + 2 * level], cells[8 + 2 * level]
            layer_scores[level] = (float(sc), float(sa))
        records.append(ScoreRecord(
            sample_id=int(cells[0]), label=cells[1],
            s_per_pixel=float(cells[2]), s_c=float(cells[3]), s_a=float(cells[4]),
            m_x=float(cells[5]), m_hat=float(cells[6]), layer_scores=layer_scores))
    return records
