"""Per-pair variational registration by direct optimisation of the ELBO.

The proposal ``q(phi | I, J)`` is a per-pixel diagonal Gaussian whose mean
and log-variance are optimised with Adam on reparameterised samples
``phi = mu + sqrt(v) * eps``. The data term is the feature-space Gaussian
likelihood, the regulariser the closed-form KL against the rank-corrected
Laplacian prior. Prior weights and the noise variances are re-estimated in
closed form every ``update_every`` iterations.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field, fields

import numpy as np
from scipy import ndimage

from .grid import NeighborGraph, as_image, resize, warp, warp_gradient
from .noise import NoiseParams, extract_features, nll_per_pixel, update_noise
from .prior import (
    PriorParams,
    VariationalField,
    estimate_prior,
    kl_closed_form,
    kl_closed_form_grad,
    update_running,
)

logger = logging.getLogger(__name__)


class RegistrationError(RuntimeError):
    """The optimisation diverged (non-finite bound)."""

    def __init__(self, iteration: int, level: int = 0):
        super().__init__(f"registration diverged at iteration {iteration} (pyramid level {level})")
        self.iteration = iteration
        self.level = level


@dataclass
class RegistrationConfig:
    iterations: int = 300  # per pyramid level
    samples_per_step: int = 1
    learning_rate: float = 0.05  # on mu, in pixels
    logv_learning_rate: float = 0.05
    pyramid_levels: int = 3
    init_log_v: float = 0.0
    seed: int = 0
    decay: float = 0.99
    update_every: int = 10  # iterations per closed-form prior/noise update
    min_level_size: int = 8
    final_lr_fraction: float = 0.05  # linear step-size anneal within each level
    learn_prior: bool = True
    learn_noise: bool = True

    def __post_init__(self):
        if self.iterations < 1 or self.samples_per_step < 1 or self.pyramid_levels < 1:
            raise ValueError("iterations, samples_per_step and pyramid_levels must be >= 1")
        if self.update_every < 1:
            raise ValueError("update_every must be >= 1")
        if self.learning_rate <= 0 or self.logv_learning_rate <= 0:
            raise ValueError("learning rates must be positive")
        if not 0.0 < self.decay < 1.0:
            raise ValueError("decay must lie in (0, 1)")
        if not 0.0 < self.final_lr_fraction <= 1.0:
            raise ValueError("final_lr_fraction must lie in (0, 1]")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def field_types(cls) -> dict:
        return {f.name: f.type for f in fields(cls)}


@dataclass
class RegistrationResult:
    q: VariationalField  # phi_{J->I}, on the grid of J
    elbo_trace: np.ndarray  # finest pyramid level
    prior: PriorParams
    noise: NoiseParams

    @property
    def field(self) -> np.ndarray:
        return self.q.mu


def elbo_terms(q: VariationalField, fI, fJ, prior: PriorParams, noise: NoiseParams,
               eps: np.ndarray, graph: NeighborGraph | None = None):
    """Monte-Carlo ELBO for fixed noise draws ``eps`` and its gradient.

    Parameters
    ----------
    eps : array, (S, D, H, W)
        Standard normal draws; ``phi_s = mu + sqrt(v) * eps_s``.

    Returns
    -------
    value, grad_mu, grad_log_v
    """
    graph = graph or NeighborGraph(*q.shape)
    fI = as_image(fI)
    fJ = as_image(fJ)
    eps = np.asarray(eps, dtype=np.float64)
    if eps.ndim == 3:
        eps = eps[None]
    S = eps.shape[0]
    sd = np.exp(0.5 * q.log_v)
    inv_var = np.exp(-noise.log_var)[:, None, None]
    data = 0.0
    g_phi_mu = np.zeros_like(q.mu)
    g_phi_logv = np.zeros_like(q.mu)
    for s in range(S):
        phi = q.mu + sd * eps[s]
        warped = warp(fI, phi)
        data += float(np.sum(nll_per_pixel(fJ, warped, noise)))
        g = warp_gradient(fI, phi, -(fJ - warped) * inv_var)
        g_phi_mu += g
        g_phi_logv += g * 0.5 * sd * eps[s]
    kl2 = kl_closed_form(q, prior, graph)
    kg_mu, kg_logv = kl_closed_form_grad(q, prior, graph)
    value = -data / S - 0.5 * kl2
    grad_mu = -g_phi_mu / S - 0.5 * kg_mu
    grad_logv = -g_phi_logv / S - 0.5 * kg_logv
    return value, grad_mu, grad_logv


def elbo(q: VariationalField, fI, fJ, prior: PriorParams, noise: NoiseParams,
         samples: int = 1, rng=None, graph: NeighborGraph | None = None) -> float:
    """Evidence lower bound ``E_q[log p_noise(J | I o phi)] - KL(q || p)``, estimated with ``samples`` draws."""
    if samples < 1:
        raise ValueError("samples must be >= 1")
    rng = np.random.default_rng(rng)
    eps = rng.standard_normal((samples,) + q.mu.shape)
    return elbo_terms(q, fI, fJ, prior, noise, eps, graph)[0]


class _Adam:
    def __init__(self, shape, lr, b1=0.9, b2=0.999, eps=1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, b1, b2, eps
        self.m = np.zeros(shape)
        self.v = np.zeros(shape)
        self.t = 0

    def step(self, grad, scale=1.0):
        self.t += 1
        self.m = self.b1 * self.m + (1 - self.b1) * grad
        self.v = self.b2 * self.v + (1 - self.b2) * grad**2
        mhat = self.m / (1 - self.b1**self.t)
        vhat = self.v / (1 - self.b2**self.t)
        return scale * self.lr * mhat / (np.sqrt(vhat) + self.eps)


def expected_residuals(q: VariationalField, fI, fJ, eps: np.ndarray):
    """``(fJ, fI o phi_s)`` pairs for the draws ``eps``; their mean squared residual estimates ``E_q[r^2]``."""
    sd = np.exp(0.5 * q.log_v)
    return [(fJ, warp(fI, q.mu + sd * e)) for e in eps]


def _noise_or_fail(q, fI, fJ, eps, iteration, level) -> NoiseParams:
    pairs = expected_residuals(q, fI, fJ, eps)
    if not all(np.all(np.isfinite(w)) for _, w in pairs) or not np.all(np.isfinite(fJ)):
        raise RegistrationError(iteration, level)
    return update_noise(pairs)


def _effective_levels(shape, cfg: RegistrationConfig) -> int:
    levels = cfg.pyramid_levels
    while levels > 1 and min(shape) / 2 ** (levels - 1) < cfg.min_level_size:
        levels -= 1
    return levels


def _downsample(feats: np.ndarray, factor: int) -> np.ndarray:
    if factor == 1:
        return feats
    h, w = feats.shape[1:]
    smooth = ndimage.gaussian_filter(feats, sigma=(0, factor / 2, factor / 2), mode="nearest")
    return resize(smooth, (int(np.ceil(h / factor)), int(np.ceil(w / factor))))


def _upsample_q(q: VariationalField, shape) -> VariationalField:
    h, w = q.shape
    H, W = shape
    mu = resize(q.mu, shape)
    mu[0] *= W / w
    mu[1] *= H / h
    return VariationalField(mu, resize(q.log_v, shape))


def register(I, J, features_I=None, features_J=None, cfg: RegistrationConfig | None = None,
             prior: PriorParams | None = None, noise: NoiseParams | None = None) -> RegistrationResult:
    """Fit ``q(phi_{J->I})`` so that ``I o phi`` explains ``J``.

    ``I`` is the moving image, ``J`` the fixed one; the returned field lives
    on the grid of ``J``. When ``cfg.learn_prior`` / ``cfg.learn_noise`` are
    off, the given ``prior`` / ``noise`` stay fixed. Otherwise they only
    supply the starting point and the final estimates are folded into
    ``prior``'s running averages once.
    """
    cfg = cfg or RegistrationConfig()
    I = as_image(I)
    J = as_image(J)
    if I.shape[0] != J.shape[0]:
        raise ValueError("images must have the same channel count")
    fI = extract_features(I) if features_I is None else extract_features(I, "external", features_I)
    fJ = extract_features(J) if features_J is None else extract_features(J, "external", features_J)
    if fI.shape[0] != fJ.shape[0]:
        raise ValueError("feature maps must have the same feature dimension")
    if prior is None:
        prior = PriorParams(decay=cfg.decay)
    if noise is None:
        noise = NoiseParams.unit(fJ.shape[0])

    rng = np.random.default_rng(cfg.seed)
    levels = _effective_levels(fJ.shape[1:], cfg)
    q = None
    trace: list[float] = []
    local_prior = prior.snapshot()
    local_noise = noise
    for level in reversed(range(levels)):
        factor = 2**level
        fI_l = _downsample(fI, factor)
        fJ_l = _downsample(fJ, factor)
        shape = fJ_l.shape[1:]
        graph = NeighborGraph(*shape)
        if q is None:
            q = VariationalField.zeros(*shape, dims=2, log_v=cfg.init_log_v)
        else:
            q = _upsample_q(q, shape)
        opt_mu = _Adam(q.mu.shape, cfg.learning_rate)
        opt_lv = _Adam(q.mu.shape, cfg.logv_learning_rate)
        for it in range(cfg.iterations):
            if it % cfg.update_every == 0:
                if cfg.learn_prior:
                    a, b = estimate_prior([q], graph)
                    local_prior.alpha, local_prior.beta = a, b
            eps = rng.standard_normal((cfg.samples_per_step,) + q.mu.shape)
            if it % cfg.update_every == 0 and cfg.learn_noise:
                local_noise = _noise_or_fail(q, fI_l, fJ_l, eps, it, level)
            value, g_mu, g_lv = elbo_terms(q, fI_l, fJ_l, local_prior, local_noise, eps, graph)
            if not (np.isfinite(value) and np.all(np.isfinite(g_mu)) and np.all(np.isfinite(g_lv))):
                raise RegistrationError(it, level)
            if level == 0:
                trace.append(value)
            anneal = 1.0 - (1.0 - cfg.final_lr_fraction) * it / max(cfg.iterations - 1, 1)
            q.mu += opt_mu.step(g_mu, anneal)
            q.log_v += opt_lv.step(g_lv, anneal)
        logger.debug("level %d done: elbo=%.4f alpha=%.4g beta=%.4g", level, value,
                     local_prior.alpha, local_prior.beta)

    if cfg.learn_prior:
        a, b = estimate_prior([q], graph)
        local_prior.alpha, local_prior.beta = a, b
        update_running(prior, a, b)
        local_prior.running_alpha, local_prior.running_beta = prior.running_alpha, prior.running_beta
    if cfg.learn_noise:
        eps = rng.standard_normal((cfg.samples_per_step,) + q.mu.shape)
        local_noise = _noise_or_fail(q, fI, fJ, eps, cfg.iterations, 0)
    return RegistrationResult(q=q, elbo_trace=np.asarray(trace), prior=local_prior, noise=local_noise)


def register_bidirectional(I, J, features_I=None, features_J=None, cfg: RegistrationConfig | None = None,
                           prior: PriorParams | None = None, noise: NoiseParams | None = None):
    """Register in both directions with a shared prior state.

    Returns ``(result_J_to_I, result_I_to_J)``; the first field lives on
    ``J``'s grid, the second on ``I``'s.
    """
    prior = prior if prior is not None else PriorParams(decay=(cfg or RegistrationConfig()).decay)
    forward = register(I, J, features_I, features_J, cfg, prior, noise)
    backward = register(J, I, features_J, features_I, cfg, prior, noise)
    return forward, backward
