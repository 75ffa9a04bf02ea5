"""Diagnostic figures: latent activity, reconstructions, level curves.

All figures are written straight to disk with the non-interactive Agg
backend, so plotting works in headless jobs.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .data import descale  # noqa: E402


class VizError(Exception):
    """A figure was asked of data it cannot show."""


def latent_heatmap(codes: np.ndarray, path: str | Path, title: str = "latent codes"):
    """Samples-by-dimensions heatmap of a batch of latent codes."""
    codes = np.asarray(codes)
    if codes.ndim != 2 or codes.size == 0:
        raise VizError(f"expected a non-empty (batch, dims) code array, "
                       f"got shape {codes.shape}")
    fig, ax = plt.subplots(figsize=(8, 4.5))
    im = ax.imshow(codes, aspect="auto", interpolation="nearest", cmap="RdBu_r")
    ax.set_xlabel("latent dimension")
    ax.set_ylabel("sample")
    ax.set_title(title)
    fig.colorbar(im, ax=ax, label="activation")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)


def latent_histogram(codes: np.ndarray, path: str | Path, bins: int = 80,
                     title: str = "latent value distribution"):
    """Histogram over all code entries; the axis spans the full value range."""
    codes = np.asarray(codes).ravel()
    if codes.size == 0:
        raise VizError("no code values to plot")
    fig, ax = plt.subplots(figsize=(7, 4))
    ax.hist(codes, bins=bins, range=(codes.min(), codes.max() or 1e-6),
            color="tab:blue", alpha=0.85)
    ax.axvline(-1.0, color="tab:red", linestyle="--", linewidth=1)
    ax.axvline(1.0, color="tab:red", linestyle="--", linewidth=1)
    ax.set_xlabel("code value")
    ax.set_ylabel("count")
    ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)


def _to_display(img: np.ndarray) -> np.ndarray:
    """[-1,1] float image (h, w, c) -> uint8 display image."""
    out = descale(img[None])[0]
    return out[..., 0] if out.shape[-1] == 1 else out


def reconstruction_grid(originals: np.ndarray, reconstructions: np.ndarray,
                        path: str | Path, max_rows: int = 8,
                        title: str = "original vs reconstruction"):
    """Rows of (original, reconstruction) pairs, aligned for eyeballing."""
    originals = np.asarray(originals)
    reconstructions = np.asarray(reconstructions)
    if originals.shape != reconstructions.shape:
        raise VizError(f"shape mismatch: {originals.shape} vs {reconstructions.shape}")
    if originals.ndim != 4:
        raise VizError(f"expected (n, h, w, c) images, got shape {originals.shape}")
    n = min(originals.shape[0], max_rows)
    if n == 0:
        raise VizError("no images to plot")
    fig, axes = plt.subplots(n, 2, figsize=(3.2, 1.6 * n), squeeze=False)
    for row in range(n):
        for col, batch in enumerate((originals, reconstructions)):
            ax = axes[row][col]
            ax.imshow(_to_display(batch[row]), cmap="gray", vmin=0, vmax=255)
            ax.set_xticks([])
            ax.set_yticks([])
    axes[0][0].set_title("input", fontsize=9)
    axes[0][1].set_title("reconstruction", fontsize=9)
    fig.suptitle(title, fontsize=10)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)


def level_curve(levels, aucs, path: str | Path, title: str = "AUC by feature level"):
    """Detection quality as a function of the scored feature level."""
    levels = list(levels)
    aucs = list(aucs)
    if len(levels) != len(aucs) or not levels:
        raise VizError("levels and AUCs must be equal-length and non-empty")
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(levels, aucs, marker="o", color="tab:green")
    ax.set_xticks(levels)
    ax.set_xlabel("feature level")
    ax.set_ylabel("AUC")
    ax.set_ylim(0.0, 1.0)
    ax.grid(True, alpha=0.3)
    ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)
