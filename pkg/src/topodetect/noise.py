"""Feature-space Gaussian reconstruction likelihood with diagonal covariance."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .grid import as_image

VARIANCE_FLOOR = 1e-8


@dataclass
class NoiseParams:
    """Per-feature-channel log variances of the reconstruction noise."""

    log_var: np.ndarray

    def __post_init__(self):
        self.log_var = np.atleast_1d(np.asarray(self.log_var, dtype=np.float64))
        if self.log_var.ndim != 1 or not np.all(np.isfinite(self.log_var)):
            raise ValueError("log_var must be a finite 1-D array")

    @classmethod
    def unit(cls, channels: int) -> "NoiseParams":
        return cls(np.zeros(channels))

    @property
    def var(self) -> np.ndarray:
        return np.exp(self.log_var)

    def to_dict(self) -> dict:
        return {"var": [float(x) for x in self.var]}


def extract_features(img, mode: str = "identity", external=None) -> np.ndarray:
    """Feature map ``(F, H, W)`` for an image.

    ``identity`` uses the image channels themselves (the MSE special case);
    ``external`` returns a precomputed map after checking it matches the grid.
    """
    img = as_image(img)
    if mode == "identity":
        return img.copy()
    if mode == "external":
        if external is None:
            raise ValueError("external feature mode requires a feature map")
        feats = np.asarray(external, dtype=np.float64)
        if feats.ndim == 2:
            feats = feats[None]
        if feats.ndim != 3 or feats.shape[1:] != img.shape[1:]:
            raise ValueError(f"feature map grid {feats.shape[1:]} does not match image grid {img.shape[1:]}")
        if not np.all(np.isfinite(feats)):
            raise ValueError("feature map contains non-finite values")
        return feats
    raise ValueError(f"unknown feature mode {mode!r}")


def nll_per_pixel(fJ, fI_warped, noise: NoiseParams) -> np.ndarray:
    """Per-pixel ``-log N(fJ_k | fI_warped_k, diag(var))``."""
    fJ = np.asarray(fJ, dtype=np.float64)
    fI_warped = np.asarray(fI_warped, dtype=np.float64)
    if fJ.shape != fI_warped.shape:
        raise ValueError(f"feature maps differ in shape: {fJ.shape} vs {fI_warped.shape}")
    if fJ.shape[0] != noise.log_var.shape[0]:
        raise ValueError("noise parameters do not match the feature dimension")
    var = noise.var[:, None, None]
    r2 = (fJ - fI_warped) ** 2
    return 0.5 * np.sum(np.log(2 * np.pi) + noise.log_var[:, None, None] + r2 / var, axis=0)


def update_noise(residual_batch) -> NoiseParams:
    """Closed-form per-channel Gaussian MLE of the variance over ``(fJ, fI_warped)`` pairs."""
    batch = list(residual_batch)
    if not batch:
        raise ValueError("update_noise needs a nonempty batch")
    sq = 0.0
    count = 0
    for fJ, fIw in batch:
        r = np.asarray(fJ, dtype=np.float64) - np.asarray(fIw, dtype=np.float64)
        sq = sq + np.sum(r.reshape(r.shape[0], -1) ** 2, axis=1)
        count += r.shape[1] * r.shape[2]
    var = np.maximum(sq / count, VARIANCE_FLOOR)
    return NoiseParams(np.log(var))
