"""Registration-based baseline change scores."""

from __future__ import annotations

import numpy as np
from scipy import ndimage

from .grid import as_image, jacobian_determinant, warp

# default Gaussian-derivative scale (px) and gradient weight
LI_WYATT_DEFAULTS = {"sigma": 6.0, "K": 2.0}
DET_FLOOR = 1e-6


def gaussian_gradient_magnitude(img: np.ndarray, sigma: float) -> np.ndarray:
    """Gradient magnitude by separable Gaussian-derivative filters (truncated at 4 sigma, reflected borders)."""
    gy = ndimage.gaussian_filter(img, sigma, order=(1, 0), mode="reflect", truncate=4.0)
    gx = ndimage.gaussian_filter(img, sigma, order=(0, 1), mode="reflect", truncate=4.0)
    return np.hypot(gx, gy)


def score_li_wyatt(I, J, field, sigma: float = LI_WYATT_DEFAULTS["sigma"],
                   K: float = LI_WYATT_DEFAULTS["K"]) -> np.ndarray:
    """Gradient-normalised squared residual ``r^2 / (1 + K g^2)`` after warping ``I`` onto ``J``.

    ``r = J - I o phi`` and ``g`` is the Gaussian-derivative gradient
    magnitude of the warped source at scale ``sigma``. This reconstructs an
    intensity-difference / image-gradient detector; the weighting of the
    original method is not reproduced exactly.
    """
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    I = as_image(I)
    J = as_image(J)
    if I.shape[0] != 1 or J.shape[0] != 1:
        raise ValueError("the gradient-normalised residual expects single-channel images")
    warped = warp(I, field)[0]
    r = J[0] - warped
    g = gaussian_gradient_magnitude(warped, sigma)
    return r**2 / (1.0 + K * g**2)


def score_jacdet(field) -> np.ndarray:
    """``log(|det J_phi|)^2`` per pixel, with ``|det|`` floored at 1e-6."""
    det = np.abs(jacobian_determinant(field))
    return np.log(np.maximum(det, DET_FLOOR)) ** 2
