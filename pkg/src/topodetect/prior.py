"""Rank-corrected Laplacian prior on displacement fields and its KL divergence.

The prior is ``prod_d N(phi^(d) | 0, P^-1)`` with precision
``P = alpha * Lambda + beta / n^2 * 1 1^T`` where ``Lambda`` is the graph
Laplacian of the 4-neighbourhood. The rank-one term restores the eigenvalue
that ``Lambda`` lacks along the constant vector, so only ``beta`` sees
global translations.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .grid import NeighborGraph


@dataclass
class VariationalField:
    """Per-pixel diagonal Gaussian ``q(phi_k^(d)) = N(mu_k^(d), v_k^(d))``.

    ``mu`` and ``log_v`` have shape ``(D, H, W)``.
    """

    mu: np.ndarray
    log_v: np.ndarray

    def __post_init__(self):
        self.mu = np.asarray(self.mu, dtype=np.float64)
        self.log_v = np.asarray(self.log_v, dtype=np.float64)
        if self.mu.shape != self.log_v.shape or self.mu.ndim != 3:
            raise ValueError(f"mu and log_v must share a (D, H, W) shape, got {self.mu.shape} and {self.log_v.shape}")
        if not (np.all(np.isfinite(self.mu)) and np.all(np.isfinite(self.log_v))):
            raise ValueError("variational field has non-finite parameters")

    @classmethod
    def zeros(cls, height: int, width: int, dims: int = 2, log_v: float = 0.0) -> "VariationalField":
        return cls(np.zeros((dims, height, width)), np.full((dims, height, width), float(log_v)))

    @property
    def v(self) -> np.ndarray:
        return np.exp(self.log_v)

    @property
    def dims(self) -> int:
        return self.mu.shape[0]

    @property
    def shape(self) -> tuple[int, int]:
        return self.mu.shape[1], self.mu.shape[2]

    def copy(self) -> "VariationalField":
        return VariationalField(self.mu.copy(), self.log_v.copy())


@dataclass
class PriorParams:
    """Prior precision weights and their running averages.

    ``alpha`` weighs neighbour differences, ``beta`` the mean translation.
    The running averages are ``None`` until the first :func:`update_running`.
    """

    alpha: float = 1.0
    beta: float = 1.0
    running_alpha: float | None = None
    running_beta: float | None = None
    decay: float = 0.99

    def __post_init__(self):
        _check_positive(self.alpha, self.beta)
        if not 0.0 < self.decay < 1.0:
            raise ValueError(f"decay must lie in (0, 1), got {self.decay}")

    def snapshot(self) -> "PriorParams":
        return PriorParams(self.alpha, self.beta, self.running_alpha, self.running_beta, self.decay)

    def to_dict(self) -> dict:
        return {"alpha": self.alpha, "beta": self.beta, "running_alpha": self.running_alpha,
                "running_beta": self.running_beta, "decay": self.decay}


class DegenerateBatchError(ValueError):
    """Prior statistics vanish, so the closed-form weights are undefined."""


def _check_positive(alpha, beta):
    if not (alpha > 0 and beta > 0):
        raise ValueError(f"prior parameters must be positive, got alpha={alpha}, beta={beta}")


def laplacian_quadratic(mu, graph: NeighborGraph) -> float:
    """``sum_d sum_k sum_{l in N(k)} (mu_k^(d) - mu_l^(d))^2``.

    Every undirected edge is visited from both endpoints, so the result is
    ``2 * sum_d mu^(d)^T Lambda mu^(d)``.
    """
    mu = np.asarray(mu, dtype=np.float64)
    return float(np.sum(graph.neighbor_sq_diff(mu)))


def _translation_weight(beta: float, n: int) -> float:
    return beta / n**2


def kl_closed_form(q: VariationalField, prior: PriorParams, graph: NeighborGraph) -> float:
    """Twice the KL divergence ``KL(q || p_alpha,beta)``, without the grid constant.

    The returned value is
    ``-(n-1) D log(alpha) - D log(beta) + beta sum_d mean(mu^(d))^2
    + sum_{d,k} [-log v + (alpha |N(k)| + beta/n^2) v] + alpha sum_d mu^T Lambda mu``.
    """
    _check_positive(prior.alpha, prior.beta)
    alpha, beta = prior.alpha, prior.beta
    n, D = graph.n, q.dims
    v = q.v
    means = q.mu.reshape(D, -1).mean(axis=1)
    trace_w = alpha * graph.degree + _translation_weight(beta, n)
    return float(
        -(n - 1) * D * np.log(alpha)
        - D * np.log(beta)
        + beta * np.sum(means**2)
        + np.sum(-q.log_v + trace_w * v)
        + 0.5 * alpha * laplacian_quadratic(q.mu, graph)
    )


def kl_closed_form_grad(q: VariationalField, prior: PriorParams, graph: NeighborGraph):
    """Gradients of :func:`kl_closed_form` with respect to ``mu`` and ``log_v``."""
    alpha, beta = prior.alpha, prior.beta
    n, D = graph.n, q.dims
    sums = q.mu.reshape(D, -1).sum(axis=1)
    g_mu = 2.0 * beta / n**2 * sums[:, None, None] + 2.0 * alpha * graph.apply_laplacian(q.mu)
    trace_w = alpha * graph.degree + _translation_weight(beta, n)
    g_logv = -1.0 + trace_w * q.v
    return g_mu, np.broadcast_to(g_logv, q.mu.shape).copy()


def prior_precision(prior: PriorParams, graph: NeighborGraph) -> np.ndarray:
    """Dense precision matrix ``alpha Lambda + beta/n^2 11^T``."""
    n = graph.n
    return prior.alpha * graph.dense_laplacian() + _translation_weight(prior.beta, n) * np.ones((n, n))


def kl_dense_oracle(q: VariationalField, prior: PriorParams, graph: NeighborGraph) -> float:
    """Exact ``KL(q || p_alpha,beta)`` with all constants, via a dense Cholesky factor.

    Intended as a test oracle on small grids (``n <= 64``).
    """
    if not (prior.alpha > 0 and prior.beta > 0):
        raise ValueError("singular prior precision: alpha and beta must be positive")
    P = prior_precision(prior, graph)
    L = np.linalg.cholesky(P)
    logdet_p = 2.0 * np.sum(np.log(np.diag(L)))
    n = graph.n
    total = 0.0
    for d in range(q.dims):
        m = q.mu[d].ravel()
        v = q.v[d].ravel()
        total += 0.5 * (np.dot(np.diag(P), v) + m @ P @ m - n - np.sum(np.log(v)) - logdet_p)
    return float(total)


def prior_sufficient_stats(q: VariationalField, graph: NeighborGraph) -> tuple[float, float]:
    """Per-field statistics whose batch means determine the optimal ``(alpha, beta)``.

    Setting the derivatives of :func:`kl_closed_form` to zero gives
    ``alpha = (n-1) D / S_a`` and ``beta = D / S_b`` with
    ``S_a = sum_{d,k} |N(k)| v + sum_d mu^T Lambda mu`` and
    ``S_b = sum_d [mean(mu^(d))^2 + sum_k v_k^(d) / n^2]``.
    """
    n, D = graph.n, q.dims
    v = q.v
    s_alpha = float(np.sum(graph.degree * v) + 0.5 * laplacian_quadratic(q.mu, graph))
    means = q.mu.reshape(D, -1).mean(axis=1)
    s_beta = float(np.sum(means**2) + np.sum(v) / n**2)
    return s_alpha, s_beta


def estimate_prior(batch, graph: NeighborGraph) -> tuple[float, float]:
    """Minimise the batch-mean of :func:`kl_closed_form` over ``alpha`` and ``beta``."""
    batch = list(batch)
    if not batch:
        raise ValueError("estimate_prior needs a nonempty batch")
    stats = np.array([prior_sufficient_stats(q, graph) for q in batch])
    s_alpha, s_beta = stats.mean(axis=0)
    if s_alpha <= 0 or s_beta <= 0 or not np.isfinite(s_alpha + s_beta):
        raise DegenerateBatchError("degenerate batch")
    D = batch[0].dims
    return (graph.n - 1) * D / s_alpha, D / s_beta


def update_running(prior: PriorParams, alpha: float, beta: float) -> PriorParams:
    """Set the current ``(alpha, beta)`` and fold them into the running averages (in place)."""
    _check_positive(alpha, beta)
    prior.alpha, prior.beta = float(alpha), float(beta)
    if prior.running_alpha is None or prior.running_beta is None:
        prior.running_alpha, prior.running_beta = float(alpha), float(beta)
    else:
        k = prior.decay
        prior.running_alpha = k * prior.running_alpha + (1 - k) * float(alpha)
        prior.running_beta = k * prior.running_beta + (1 - k) * float(beta)
    return prior
