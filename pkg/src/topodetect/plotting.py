"""Heatmap overlays and ROC figures."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

HEATMAP_CMAP = "inferno"
HEATMAP_PERCENTILE = 99.0


def normalize_score(score, percentile: float = HEATMAP_PERCENTILE) -> np.ndarray:
    """Map ``score`` to [0, 1]: the minimum goes to 0, the given percentile and above to 1."""
    score = np.asarray(score, dtype=np.float64)
    lo = float(np.min(score))
    hi = float(np.percentile(score, percentile))
    if hi <= lo:
        return np.zeros_like(score)
    return np.clip((score - lo) / (hi - lo), 0.0, 1.0)


def heatmap_overlay(score, background) -> np.ndarray:
    """RGB uint8 overlay of a score map on a grayscale image, same pixel grid as ``score``.

    Each pixel blends the min-max normalised background with the inferno
    colour of the normalised score, using the normalised score as opacity.
    """
    s = normalize_score(score)
    bg = np.asarray(background, dtype=np.float64)
    if bg.ndim == 3:
        bg = bg.mean(axis=0)
    if bg.shape != s.shape:
        raise ValueError("background and score map must share a grid")
    span = bg.max() - bg.min()
    gray = (bg - bg.min()) / span if span > 0 else np.zeros_like(bg)
    colour = matplotlib.colormaps[HEATMAP_CMAP](s)[..., :3]
    rgb = (1.0 - s[..., None]) * gray[..., None] + s[..., None] * colour
    return np.rint(np.clip(rgb, 0, 1) * 255).astype(np.uint8)


def plot_roc(curves: dict, path, title: str | None = None):
    """Save ROC curves ``{label: RocCurve}`` to ``path``."""
    fig, ax = plt.subplots(figsize=(4.2, 4.0))
    for label, c in curves.items():
        ax.plot(c.fpr, c.tpr, lw=1.5, label=f"{label} (AUC {c.auc:.3f})")
    ax.plot([0, 1], [0, 1], color="0.6", lw=0.8, ls="--")
    ax.set_xlim(0, 1)
    ax.set_ylim(0, 1)
    ax.set_xlabel("false positive rate")
    ax.set_ylabel("true positive rate")
    if title:
        ax.set_title(title)
    ax.legend(loc="lower right", fontsize=8, frameon=False)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_elbo_trace(trace, path):
    fig, ax = plt.subplots(figsize=(4.5, 3.0))
    ax.plot(np.arange(len(trace)), trace, lw=1.0)
    ax.set_xlabel("iteration (finest level)")
    ax.set_ylabel("ELBO")
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return path
