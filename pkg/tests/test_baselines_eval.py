import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from topodetect.baselines import LI_WYATT_DEFAULTS, score_jacdet, score_li_wyatt
from topodetect.evaluation import (
    auc_bruteforce,
    bootstrap_auc,
    compute_roc,
    registration_metrics,
    warp_labels,
)
from topodetect.grid import identity_grid


class TestGradientNormalisedResidual:
    def test_identical_images(self, rng):
        I = rng.random((12, 12))
        np.testing.assert_array_equal(score_li_wyatt(I, I, np.zeros((2, 12, 12))), 0.0)

    def test_flat_residual_one(self):
        I = np.zeros((10, 10))
        np.testing.assert_allclose(score_li_wyatt(I, I + 1.0, np.zeros((2, 10, 10))), 1.0)

    def test_defaults(self):
        assert LI_WYATT_DEFAULTS == {"sigma": 6.0, "K": 2.0}

    def test_gradient_downweights_edges(self):
        xs, _ = identity_grid(32, 32)
        I = (xs > 15).astype(float)
        J = I + 0.1
        s = score_li_wyatt(I, J, np.zeros((2, 32, 32)), sigma=1.0, K=50.0)
        assert s[16, 15] < s[16, 2]

    @pytest.mark.parametrize("sigma", [0.0, -1.0])
    def test_rejects_sigma(self, rng, sigma):
        with pytest.raises(ValueError):
            score_li_wyatt(rng.random((6, 6)), rng.random((6, 6)), np.zeros((2, 6, 6)), sigma=sigma)

    def test_rejects_multichannel(self, rng):
        with pytest.raises(ValueError):
            score_li_wyatt(rng.random((2, 6, 6)), rng.random((2, 6, 6)), np.zeros((2, 6, 6)))


class TestJacDet:
    def test_zero_field(self):
        np.testing.assert_array_equal(score_jacdet(np.zeros((2, 6, 6))), 0.0)

    def test_uniform_scaling(self):
        xs, ys = identity_grid(8, 8)
        s = score_jacdet(np.stack([0.1 * xs, 0.1 * ys]))
        np.testing.assert_allclose(s[1:-1, 1:-1], np.log(1.21) ** 2)
        assert np.log(1.21) ** 2 == pytest.approx(0.0363, abs=1e-4)

    def test_fold_blind_spot(self):
        xs, _ = identity_grid(6, 6)
        s = score_jacdet(np.stack([-2.0 * xs, np.zeros_like(xs)]))
        np.testing.assert_allclose(s[1:-1, 1:-1], 0.0, atol=1e-24)

    def test_floor(self):
        xs, _ = identity_grid(6, 6)
        s = score_jacdet(np.stack([-xs, np.zeros_like(xs)]))  # det = 0
        np.testing.assert_allclose(s[1:-1, 1:-1], np.log(1e-6) ** 2)


class TestRoc:
    def test_hand_example(self):
        assert compute_roc(np.array([0.1, 0.4, 0.35, 0.8]), np.array([0, 0, 1, 1])).auc == 0.75

    def test_perfect(self):
        assert compute_roc(np.array([0.0, 0.1, 0.9, 1.0]), np.array([0, 0, 1, 1])).auc == 1.0

    def test_constant(self):
        assert compute_roc(np.ones(10), np.arange(10) % 3 == 0).auc == 0.5

    def test_needs_both_classes(self):
        with pytest.raises(ValueError):
            compute_roc(np.arange(4.0), np.ones(4, bool))

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            compute_roc([np.zeros((2, 2))], [np.zeros((2, 3), bool)])

    @settings(max_examples=60, deadline=None)
    @given(st.integers(2, 400), st.integers(1, 6), st.integers(0, 2**32 - 1))
    def test_equals_bruteforce(self, n, levels, seed):
        rng = np.random.default_rng(seed)
        s = rng.integers(0, levels + 1, n) * rng.choice([1.0, 0.37])
        y = rng.random(n) < 0.3
        y[0], y[1] = True, False
        curve = compute_roc(s, y)
        assert curve.auc == auc_bruteforce(s, y)
        # curve shape: from (0, 0) to (1, 1), monotone, trapezoid equals the auc
        assert curve.points[0] == (0.0, 0.0) and curve.points[-1] == (1.0, 1.0)
        assert np.all(np.diff(curve.fpr) >= 0) and np.all(np.diff(curve.tpr) >= 0)
        assert np.trapezoid(curve.tpr, curve.fpr) == pytest.approx(curve.auc, abs=1e-12)

    @given(st.integers(0, 2**32 - 1))
    def test_invariant_under_increasing_transform(self, seed):
        rng = np.random.default_rng(seed)
        s = rng.normal(size=300)
        y = rng.random(300) < 0.4
        y[:2] = [True, False]
        assert compute_roc(np.exp(3 * s) + 1, y).auc == compute_roc(s, y).auc

    def test_pools_maps(self, rng):
        s = [rng.random((4, 4)) for _ in range(3)]
        m = [rng.random((4, 4)) < 0.3 for _ in range(3)]
        m[0][0, 0], m[0][0, 1] = True, False
        pooled = compute_roc(s, m).auc
        assert pooled == auc_bruteforce(np.concatenate([a.ravel() for a in s]),
                                        np.concatenate([b.ravel() for b in m]))


class TestBootstrap:
    def test_identical_subjects(self, rng):
        s = rng.random(50)
        m = rng.random(50) < 0.3
        m[:2] = [True, False]
        b = bootstrap_auc([(s, m)] * 5, resamples=50, seed=3)
        assert b.stderr == 0.0
        assert b.mean == pytest.approx(compute_roc(s, m).auc)

    def test_single_resample(self, rng):
        subs = [(rng.random(30), rng.random(30) < 0.5) for _ in range(4)]
        for _, m in subs:
            m[:2] = [True, False]
        b = bootstrap_auc(subs, resamples=1, seed=11)
        assert b.stderr == 0.0 and b.mean == b.values[0]

    def test_seeded_per_resample(self, rng):
        subs = [(rng.random(30), np.arange(30) % 4 == 0) for _ in range(4)]
        a = bootstrap_auc(subs, resamples=8, seed=5)
        b = bootstrap_auc(subs, resamples=8, seed=6)
        np.testing.assert_array_equal(a.values[1:], b.values[:-1])

    def test_redraw_exhaustion(self):
        subs = [(np.arange(4.0), np.zeros(4, bool)), (np.arange(4.0), np.ones(4, bool))]
        b = bootstrap_auc(subs, resamples=20, seed=0)  # one-class draws are redrawn
        assert b.resamples == 20
        with pytest.raises(ValueError):
            bootstrap_auc([(np.arange(4.0), np.zeros(4, bool))] * 2, resamples=1, max_retries=3)

    def test_needs_two_subjects(self):
        with pytest.raises(ValueError):
            bootstrap_auc([(np.arange(4.0), np.arange(4) < 2)], resamples=5)

    def test_mean_converges_to_point_auc(self):
        rng = np.random.default_rng(0)
        subs = []
        for _ in range(10):
            m = np.zeros(200, bool)
            m[:20] = True
            subs.append((rng.normal(size=200) + m * (1.0 + 0.3 * rng.normal()), m))
        point = compute_roc([s for s, _ in subs], [m for _, m in subs]).auc
        b = bootstrap_auc(subs, resamples=10_000, seed=0)
        assert abs(b.mean - point) < 3 * b.stderr / np.sqrt(b.resamples)


class TestRegistrationMetrics:
    def test_identity(self, rng):
        seg = rng.integers(0, 4, (10, 10))
        m = registration_metrics(seg, seg, np.zeros((2, 10, 10)))
        assert m["mean_dice"] == 1.0 and m["accuracy"] == 100.0
        assert m["var_log_jac"] == 0.0 and m["fold_pct"] == 0.0

    def test_disjoint(self):
        a = np.zeros((4, 4), int)
        b = np.zeros((4, 4), int)
        a[:2] = 1
        b[2:] = 1
        assert registration_metrics(a, b, np.zeros((2, 4, 4)))["dice"][1] == 0.0

    def test_fold_percentage(self):
        xs, _ = identity_grid(6, 6)
        m = registration_metrics(np.zeros((6, 6), int), np.zeros((6, 6), int),
                                 np.stack([-2.0 * xs, np.zeros_like(xs)]))
        assert m["fold_pct"] == pytest.approx(100.0)

    def test_warp_labels_nearest(self):
        seg = np.arange(16).reshape(4, 4)
        f = np.stack([np.full((4, 4), 1.2), np.zeros((4, 4))])
        out = warp_labels(seg, f)
        np.testing.assert_array_equal(out[:, :3], seg[:, 1:])
        assert out.dtype == seg.dtype
