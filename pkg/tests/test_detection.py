import numpy as np
import pytest
from conftest import random_q, smooth_texture

from topodetect.detection import (
    ControlSet,
    atlas_mean,
    outlier_score,
    score_L,
    score_L_sym,
    score_Q,
    symmetric_score,
)
from topodetect.grid import NeighborGraph, warp
from topodetect.noise import NoiseParams, nll_per_pixel
from topodetect.prior import PriorParams, VariationalField, kl_closed_form
from topodetect.registration import RegistrationConfig
from topodetect.synth import SynthSpec, _disk, generate_pair


def const_field(h, w, dx, dy):
    return np.stack([np.full((h, w), float(dx)), np.full((h, w), float(dy))])


def translation_scores(rng, size=20, t=(2, 1)):
    """Score maps of an integer-translation pair with exact constructed proposals."""
    I = smooth_texture(rng, size)
    fwd = const_field(size, size, -t[0], -t[1])
    J = warp(I, fwd)
    log_v = np.full((2, size, size), -1.5)
    q_f = VariationalField(fwd, log_v)
    q_b = VariationalField(-fwd, log_v)
    prior = PriorParams(2.0, 0.5)
    noise = NoiseParams(np.log([0.01]))
    L_f = score_L(q_f, I, J, prior, noise)
    L_b = score_L(q_b, J, I, prior, noise)
    return symmetric_score(L_f, L_b, q_f.mu), symmetric_score(L_b, L_f, q_b.mu)


class TestScoreL:
    def test_sum_consistency(self, rng):
        for h, w in ((5, 7), (8, 8)):
            g = NeighborGraph(h, w)
            q = random_q(rng, h, w)
            fI, fJ = rng.random((2, 3, h, w))
            prior = PriorParams(*rng.uniform(0.2, 3.0, 2))
            noise = NoiseParams(rng.uniform(-2, 1, 3))
            L = score_L(q, fI, fJ, prior, noise, g)
            nll = np.sum(nll_per_pixel(fJ, warp(fI, q.mu), noise))
            const = -(g.n - 1) * q.dims * np.log(prior.alpha) - q.dims * np.log(prior.beta)
            expect = nll + kl_closed_form(q, prior, g) - const
            assert np.sum(L) == pytest.approx(expect, abs=1e-8 * max(1.0, abs(expect)))

    def test_variance_monotone_and_local(self, rng):
        g = NeighborGraph(6, 6)
        q = random_q(rng, 6, 6)
        fI, fJ = rng.random((2, 1, 6, 6))
        prior = PriorParams(1.0, 1.0)
        noise = NoiseParams.unit(1)
        base = score_L(q, fI, fJ, prior, noise, g)
        c = prior.alpha * g.degree[2, 3] + prior.beta / g.n**2
        q2 = q.copy()
        q2.log_v[0, 2, 3] = np.log(2.0 / c)
        q.log_v[0, 2, 3] = np.log(1.5 / c)
        lo = score_L(q, fI, fJ, prior, noise, g)
        hi = score_L(q2, fI, fJ, prior, noise, g)
        assert hi[2, 3] > lo[2, 3]
        mask = np.ones((6, 6), bool)
        mask[2, 3] = False
        np.testing.assert_array_equal(hi[mask], lo[mask])
        np.testing.assert_array_equal(lo[mask], base[mask])

    def test_self_pair_matches_plug_in(self):
        # unit noise held fixed: a learned variance shrinks to the residual level
        # and keeps r^2 / sigma^2 of order one, which the plug-in value omits
        I = generate_pair(SynthSpec(size=32, blob_count=0, deform_amplitude=0.0)).I
        res = score_L_sym(I, I, cfg=RegistrationConfig(learn_noise=False))
        q, prior, noise = res.forward.q, res.forward.prior, res.forward.noise
        g = NeighborGraph(*q.shape)
        analytic = 0.5 * np.sum(np.log(2 * np.pi * noise.var)) + np.sum(
            -q.log_v + (prior.alpha * g.degree + prior.beta / g.n**2) * q.v, axis=0)
        inner = (slice(2, -2),) * 2
        np.testing.assert_allclose(res.L_forward[inner], analytic[inner], rtol=0.05)


class TestScoreLSym:
    def test_self_pair_doubles(self):
        I = generate_pair(SynthSpec(size=32, blob_count=0, deform_amplitude=0.0, seed=3)).I
        res = score_L_sym(I, I)
        inner = (slice(2, -2),) * 2
        np.testing.assert_allclose(res.score[inner], 2 * res.L_forward[inner], rtol=0.10)

    def test_integer_translation_equivariance(self, rng):
        t = (2, 1)
        s_JI, s_IJ = translation_scores(rng, t=t)
        # L_sym(I|J)(y) against L_sym(J|I)(y + t) wherever y + t stays on the grid
        np.testing.assert_array_equal(s_IJ[: -t[1], : -t[0]], s_JI[t[1]:, t[0]:])

    def test_inserted_disk_stands_out(self):
        for seed in range(3):
            p = generate_pair(SynthSpec(size=32, deform_amplitude=2.0, blob_mode="insert", seed=seed))
            s = score_L_sym(p.I, p.J).score
            assert s[p.mask].mean() >= 2 * s[~p.mask].mean() > 0

    def test_reverse_score_grid_and_finiteness(self):
        p = generate_pair(SynthSpec(size=24, deform_amplitude=1.5, seed=5))
        res = score_L_sym(p.I, p.J)
        assert res.score.shape == res.reverse_score.shape == (24, 24)
        assert np.all(np.isfinite(res.score)) and np.all(np.isfinite(res.reverse_score))


class TestOutlierScore:
    def test_degenerate_single_control(self, rng):
        L = rng.random((5, 5))
        np.testing.assert_array_equal(outlier_score([L], [np.zeros((5, 5))], [rng.uniform(-1, 1, (2, 5, 5))]), L)

    def test_pattern_offset_cancels_with_identity_fields(self, rng):
        Ls = list(rng.random((3, 6, 6)))
        inner = list(rng.random((3, 6, 6)))
        fields = [np.zeros((2, 6, 6))] * 3
        P = rng.standard_normal((6, 6))
        a = outlier_score(Ls, inner, fields)
        b = outlier_score([L + P for L in Ls], [m + P for m in inner], fields)
        np.testing.assert_allclose(a, b, atol=1e-12)

    def test_constant_offset_cancels_for_any_fields(self, rng):
        Ls = list(rng.random((3, 6, 6)))
        inner = list(rng.random((3, 6, 6)))
        fields = list(rng.uniform(-2, 2, (3, 2, 6, 6)))
        a = outlier_score(Ls, inner, fields)
        b = outlier_score([L + 4.2 for L in Ls], [m + 4.2 for m in inner], fields)
        np.testing.assert_allclose(a, b, atol=1e-12)

    def test_zero_inner_means_give_mean_lsym(self, fast_cfg):
        pop_spec = SynthSpec(size=24, deform_amplitude=1.5)
        imgs = [generate_pair(SynthSpec(**{**pop_spec.to_dict(), "seed": s})).J for s in range(3)]
        controls = ControlSet.from_images(imgs[:2])
        cache = {i: np.zeros((24, 24)) for i in controls.ids()}
        res = score_Q(imgs[2], controls, cfg=fast_cfg, cache=cache)
        np.testing.assert_allclose(res.Q, res.mean_lsym, atol=1e-12)

    def test_needs_two_controls(self, rng):
        with pytest.raises(ValueError):
            score_Q(rng.random((8, 8)), ControlSet.from_images([rng.random((8, 8))]))

    def test_cache_filled(self, fast_cfg):
        imgs = [generate_pair(SynthSpec(size=16, deform_amplitude=1.0, blob_radius=3.0, seed=s)).J for s in range(3)]
        controls = ControlSet.from_images(imgs[:2])
        cache = {}
        score_Q(imgs[2], controls, cfg=fast_cfg, cache=cache)
        assert set(cache) == set(controls.ids())

    def test_duplicate_ids_rejected(self, rng):
        with pytest.raises(ValueError):
            ControlSet([(rng.random((4, 4)), None, "a"), (rng.random((4, 4)), None, "a")])


class TestAtlasMean:
    def test_identical_controls_flat(self):
        I = generate_pair(SynthSpec(size=32, blob_count=0, deform_amplitude=0.0)).I
        m = atlas_mean(ControlSet.from_images([I, I]), I)
        inner = m[2:-2, 2:-2]
        assert inner.std() / abs(inner.mean()) < 0.5

    def test_region_variability_is_highlighted(self):
        I = generate_pair(SynthSpec(size=32, blob_count=0, deform_amplitude=0.0)).I
        site = _disk((16, 16), 6, 32)
        m = atlas_mean(ControlSet.from_images([I, I + 1.0 * site]), I)
        assert m[site].mean() >= 2 * m[~site].mean() > 0

    def test_output_on_atlas_grid(self, fast_cfg):
        imgs = [generate_pair(SynthSpec(size=16, deform_amplitude=1.0, blob_radius=3.0, seed=s)).J for s in range(2)]
        atlas = generate_pair(SynthSpec(size=20, deform_amplitude=1.0, blob_radius=3.0, seed=9)).I
        assert atlas_mean(ControlSet.from_images(imgs), atlas, cfg=fast_cfg).shape == (20, 20)
