"""Per-pixel topological change scores built from the registration bound.

``score_L`` splits the negative bound of one registration into per-pixel
terms on the fixed image's grid. ``score_L_sym`` adds the reverse
direction pulled back through the forward field, ``score_Q`` contrasts a
target against the variability inside a control set and ``atlas_mean``
aggregates control variability on a common atlas grid.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .grid import NeighborGraph, as_image, compose_scoremap, warp
from .noise import NoiseParams, extract_features, nll_per_pixel
from .prior import PriorParams, VariationalField
from .registration import RegistrationConfig, RegistrationResult, register, register_bidirectional

logger = logging.getLogger(__name__)


def score_L(q: VariationalField, fI, fJ, prior: PriorParams, noise: NoiseParams,
            graph: NeighborGraph | None = None) -> np.ndarray:
    """Per-pixel decomposition of the bound for ``q = q(phi_{J->I})`` evaluated at ``phi = mu``.

    Pixel ``k`` receives its reconstruction NLL, its share
    ``beta/n^2 * sum_d mu_k^(d) * sum_i mu_i^(d)`` of the translation term and
    ``sum_d [-log v_k + (alpha |N(k)| + beta/n^2) v_k + alpha/2 sum_{l in N(k)} (mu_k - mu_l)^2]``.
    Each neighbour pair is split evenly between its two endpoints, so the
    map sums to the NLL plus the q-dependent part of twice the KL.
    """
    graph = graph or NeighborGraph(*q.shape)
    alpha, beta = prior.alpha, prior.beta
    n = graph.n
    nll = nll_per_pixel(fJ, warp(fI, q.mu), noise)
    sums = q.mu.reshape(q.dims, -1).sum(axis=1)
    translation = beta / n**2 * np.sum(q.mu * sums[:, None, None], axis=0)
    v = q.v
    local = np.sum(-q.log_v + (alpha * graph.degree + beta / n**2) * v
                   + 0.5 * alpha * graph.neighbor_sq_diff(q.mu), axis=0)
    return nll + translation + local


def symmetric_score(L_forward, L_backward, field_forward) -> np.ndarray:
    """``L(J|I) + L(I|J) o phi_{J->I}``, on the grid of ``J``."""
    return np.asarray(L_forward, dtype=np.float64) + compose_scoremap(L_backward, field_forward)


@dataclass
class SymmetricScore:
    score: np.ndarray  # L_sym(J|I), grid of J
    forward: RegistrationResult  # phi_{J->I}
    backward: RegistrationResult  # phi_{I->J}
    L_forward: np.ndarray  # L(J|I), grid of J
    L_backward: np.ndarray  # L(I|J), grid of I

    @property
    def reverse_score(self) -> np.ndarray:
        """``L_sym(I|J)`` on the grid of ``I``, from the same two registrations."""
        return symmetric_score(self.L_backward, self.L_forward, self.backward.field)


def _features(img, feats):
    return extract_features(img) if feats is None else extract_features(img, "external", feats)


def score_L_sym(I, J, features_I=None, features_J=None, cfg: RegistrationConfig | None = None,
                prior: PriorParams | None = None, noise: NoiseParams | None = None) -> SymmetricScore:
    """Bidirectional score ``L_sym(J|I)`` on the grid of ``J``.

    Each direction is scored with the prior and noise estimates of its own
    registration.
    """
    I = as_image(I)
    J = as_image(J)
    fI = _features(I, features_I)
    fJ = _features(J, features_J)
    fwd, bwd = register_bidirectional(I, J, fI, fJ, cfg, prior, noise)
    L_f = score_L(fwd.q, fI, fJ, fwd.prior, fwd.noise)
    L_b = score_L(bwd.q, fJ, fI, bwd.prior, bwd.noise)
    return SymmetricScore(symmetric_score(L_f, L_b, fwd.field), fwd, bwd, L_f, L_b)


@dataclass
class ControlSet:
    """Control images (with optional features) keyed by identifier."""

    members: list = field(default_factory=list)  # (image, features or None, identifier)

    def __post_init__(self):
        self.members = [(as_image(img), None if f is None else np.asarray(f, dtype=np.float64), str(name))
                        for img, f, name in self.members]
        ids = [m[2] for m in self.members]
        if len(set(ids)) != len(ids):
            raise ValueError("control identifiers must be unique")

    def __len__(self):
        return len(self.members)

    def ids(self) -> list[str]:
        return [m[2] for m in self.members]

    @classmethod
    def from_images(cls, images, ids=None) -> "ControlSet":
        ids = ids or [f"control_{i:03d}" for i in range(len(images))]
        return cls([(img, None, name) for img, name in zip(images, ids)])


def pairwise_lsym(controls: ControlSet, cfg: RegistrationConfig | None = None,
                  prior: PriorParams | None = None, noise: NoiseParams | None = None) -> dict:
    """``L_sym(I|K)`` for every ordered pair of distinct controls, keyed ``(id_I, id_K)``.

    Both orders of a pair come from the same two registrations.
    """
    out = {}
    members = controls.members
    for a in range(len(members)):
        for b in range(a + 1, len(members)):
            imgI, fI, idI = members[a]
            imgK, fK, idK = members[b]
            res = score_L_sym(imgK, imgI, fK, fI, cfg, prior, noise)  # L_sym(I|K) on I's grid
            out[(idI, idK)] = res.score
            out[(idK, idI)] = res.reverse_score
            logger.info("pairwise L_sym %s <-> %s", idI, idK)
    return out


def inner_means(controls: ControlSet, cfg: RegistrationConfig | None = None,
                prior: PriorParams | None = None, noise: NoiseParams | None = None,
                pairwise: dict | None = None) -> dict:
    """Hold-one-out ``E_{K != I}[L_sym(I|K)]`` per control ``I``, on ``I``'s grid."""
    if len(controls) < 2:
        raise ValueError("inner expectation needs at least 2 controls")
    pairwise = pairwise if pairwise is not None else pairwise_lsym(controls, cfg, prior, noise)
    ids = controls.ids()
    return {i: np.mean([pairwise[(i, k)] for k in ids if k != i], axis=0) for i in ids}


def outlier_score(lsym_maps, inner_maps, fields) -> np.ndarray:
    """Combine ``L_sym(J|I)``, ``E_K[L_sym(I|K)]`` and ``phi_{J->I}`` over controls ``I`` into ``Q(J)``."""
    terms = [np.asarray(L, dtype=np.float64) - compose_scoremap(m, f)
             for L, m, f in zip(lsym_maps, inner_maps, fields, strict=True)]
    if not terms:
        raise ValueError("outlier score needs at least one control")
    return np.mean(terms, axis=0)


@dataclass
class OutlierScore:
    Q: np.ndarray
    lsym: dict  # control id -> L_sym(J|I)
    fields: dict  # control id -> phi_{J->I}

    @property
    def mean_lsym(self) -> np.ndarray:
        return np.mean(list(self.lsym.values()), axis=0)


def score_Q(J, controls: ControlSet, features_J=None, cfg: RegistrationConfig | None = None,
            prior: PriorParams | None = None, noise: NoiseParams | None = None,
            cache: dict | None = None) -> OutlierScore:
    """Outlier score ``Q(J) = E_I[L_sym(J|I) - E_K[L_sym(I|K)] o phi_{J->I}]``.

    ``cache`` maps control ids to precomputed inner means; missing entries are
    computed (and added to the dict).
    """
    if len(controls) < 2:
        raise ValueError("outlier score needs at least 2 controls")
    if cache is None:
        cache = {}
    missing = [i for i in controls.ids() if i not in cache]
    if missing:
        cache.update(inner_means(controls, cfg, prior, noise))
    lsym, fields = {}, {}
    for img, feats, name in controls.members:
        res = score_L_sym(img, J, feats, features_J, cfg, prior, noise)
        lsym[name] = res.score
        fields[name] = res.forward.field
    ids = controls.ids()
    Q = outlier_score([lsym[i] for i in ids], [cache[i] for i in ids], [fields[i] for i in ids])
    return OutlierScore(Q=Q, lsym=lsym, fields=fields)


def atlas_mean(controls: ControlSet, atlas, atlas_features=None, cfg: RegistrationConfig | None = None,
               prior: PriorParams | None = None, noise: NoiseParams | None = None,
               inner: dict | None = None) -> np.ndarray:
    """``E_{I,K}[L_sym(I|K) o phi_{Atlas->I}]`` on the atlas grid."""
    if len(controls) < 2:
        raise ValueError("atlas aggregation needs at least 2 controls")
    inner = inner if inner is not None else inner_means(controls, cfg, prior, noise)
    atlas = as_image(atlas)
    maps = []
    for img, feats, name in controls.members:
        res = register(img, atlas, feats, atlas_features, cfg, prior, noise)
        maps.append(compose_scoremap(inner[name], res.field))
    return np.mean(maps, axis=0)
