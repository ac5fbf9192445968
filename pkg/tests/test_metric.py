import math
import warnings

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

import oracles
from metamoe.errors import ContractError
from metamoe.metric import (
    DomainStats,
    batch_distances,
    batch_distances_backward,
    compute_domain_stats,
    confidence_backward,
    confidence_forward,
    confidence_mcd,
    confidence_negdist,
    confidences_from_stats,
    normalize_alpha,
    point_to_set_distance,
)
from metamoe.numerics import finite_diff_grad, grad_close

vec4 = arrays(np.float64, 4, elements=st.floats(-10, 10))


class TestDomainStats:
    def test_single_encoding(self):
        v = np.array([1.0, -2.0, 3.0])
        st_ = compute_domain_stats([v])
        np.testing.assert_array_equal(st_.mean, v)
        assert st_.support_count == 1

    def test_symmetric_pair(self):
        v = np.array([1.0, -2.0])
        np.testing.assert_array_equal(compute_domain_stats([v, -v]).mean, [0.0, 0.0])

    def test_class_means(self, rng):
        H = rng.normal(size=(4, 3))
        st_ = compute_domain_stats(H, [0, 0, 1, 1])
        np.testing.assert_allclose(st_.class_means[0], (H[0] + H[1]) / 2)
        np.testing.assert_allclose(st_.class_means[1], (H[2] + H[3]) / 2)

    def test_empty(self):
        with pytest.raises(ValueError):
            compute_domain_stats(np.zeros((0, 3)))

    def test_missing_class_warns_and_omits(self, rng):
        with pytest.warns(RuntimeWarning):
            st_ = compute_domain_stats(rng.normal(size=(3, 2)), [0, 0, 0], n_classes=2)
        assert st_.class_means is None
        assert st_.mean.shape == (2,)

    def test_support_count_positive(self):
        with pytest.raises(ValueError):
            DomainStats(np.zeros(2), None, 0)


class TestDistance:
    def test_self_distance(self, rng):
        h = rng.normal(size=4)
        assert point_to_set_distance(h, h, rng.normal(size=(4, 2))) == pytest.approx(1e-6, abs=1e-12)

    def test_identity_is_euclidean(self, rng):
        h, c = rng.normal(size=4), rng.normal(size=4)
        assert point_to_set_distance(h, c, np.eye(4)) == pytest.approx(np.linalg.norm(h - c), rel=1e-12)

    def test_explicit_metric_oracle(self, rng):
        for _ in range(20):
            h, c, U = rng.normal(size=4), rng.normal(size=4), rng.normal(size=(4, 2))
            assert point_to_set_distance(h, c, U) == pytest.approx(oracles.mahalanobis(h, c, U), abs=1e-10)

    def test_dimension_mismatch(self, rng):
        with pytest.raises(ValueError):
            point_to_set_distance(np.zeros(3), np.zeros(4), np.eye(4))
        with pytest.raises(ValueError):
            point_to_set_distance(np.zeros(3), np.zeros(3), np.eye(4))

    @given(vec4, vec4, st.floats(0.1, 10))
    def test_homogeneity(self, h, c, scale):
        base = point_to_set_distance(h, c, np.eye(4))
        scaled = point_to_set_distance(h, c, scale * np.eye(4))
        sq = base**2 - 1e-12
        assert scaled == pytest.approx(math.sqrt(scale**2 * sq + 1e-12), rel=1e-9, abs=1e-12)

    @given(st.integers(0, 2**31 - 1))
    def test_metric_is_psd(self, seed):
        r = np.random.default_rng(seed)
        U, x = r.normal(size=(5, r.integers(1, 6))), r.normal(size=5)
        assert x @ (U @ U.T) @ x >= -1e-12

    def test_batch_matches_scalar(self, rng):
        H, c, U = rng.normal(size=(5, 4)), rng.normal(size=4), rng.normal(size=(4, 3))
        d, _ = batch_distances(H, c, U)
        np.testing.assert_allclose(d, [point_to_set_distance(h, c, U) for h in H], rtol=1e-13)

    def test_batch_backward(self, rng):
        H, c, U, g = rng.normal(size=(3, 4)), rng.normal(size=4), rng.normal(size=(4, 2)), rng.normal(size=3)
        _, cache = batch_distances(H, c, U)
        gH, gc, gU = batch_distances_backward(g, U, cache)
        assert grad_close(gH, finite_diff_grad(lambda t: float(batch_distances(t, c, U)[0] @ g), H))
        assert grad_close(gc, finite_diff_grad(lambda t: float(batch_distances(H, t, U)[0] @ g), c))
        assert grad_close(gU, finite_diff_grad(lambda t: float(batch_distances(H, c, t)[0] @ g), U))


class TestConfidence:
    def test_mcd_on_bisector(self):
        stats = DomainStats(np.zeros(2), np.array([[-1.0, 0.0], [1.0, 0.0]]), 2)
        assert confidence_mcd(np.array([0.0, 3.7]), stats, np.eye(2)) == pytest.approx(0.0, abs=1e-12)

    def test_mcd_at_positive_mean(self, rng):
        mu = rng.normal(size=(2, 3))
        stats = DomainStats(mu.mean(0), mu, 2)
        assert confidence_mcd(mu[1], stats, np.eye(3)) == pytest.approx(np.linalg.norm(mu[1] - mu[0]), abs=1e-6)

    def test_mcd_oracle(self, rng):
        for _ in range(20):
            mu, h, U = rng.normal(size=(2, 4)), rng.normal(size=4), rng.normal(size=(4, 2))
            stats = DomainStats(mu.mean(0), mu, 2)
            expect = abs(oracles.mahalanobis(h, mu[1], U) - oracles.mahalanobis(h, mu[0], U))
            assert confidence_mcd(h, stats, U) == pytest.approx(expect, abs=1e-10)

    def test_mcd_needs_class_means(self):
        with pytest.raises(ContractError):
            confidence_mcd(np.zeros(2), DomainStats(np.zeros(2)), np.eye(2))
        with pytest.raises(ContractError):
            confidences_from_stats(np.zeros((1, 2)), DomainStats(np.zeros(2)), np.eye(2), "mcd")

    def test_negdist_at_mean(self, rng):
        mu = rng.normal(size=3)
        assert confidence_negdist(mu, DomainStats(mu), rng.normal(size=(3, 2))) == pytest.approx(0.0, abs=1e-6)

    def test_negdist_prefers_nearer_domain(self):
        h = np.array([1.0, 0.0])
        near, far = DomainStats(np.array([1.5, 0.0])), DomainStats(np.array([-3.0, 0.0]))
        assert confidence_negdist(h, near, np.eye(2)) > confidence_negdist(h, far, np.eye(2))

    def test_negdist_oracle(self, rng):
        for _ in range(20):
            mu, h, U = rng.normal(size=4), rng.normal(size=4), rng.normal(size=(4, 3))
            assert confidence_negdist(h, DomainStats(mu), U) == pytest.approx(-oracles.mahalanobis(h, mu, U), abs=1e-10)

    @pytest.mark.parametrize("kind", ["mcd", "negdist"])
    def test_vectorised_matches_scalar(self, rng, kind):
        H, mu, U = rng.normal(size=(6, 4)), rng.normal(size=(2, 4)), rng.normal(size=(4, 2))
        stats = DomainStats(mu.mean(0), mu, 10)
        scalar = confidence_mcd if kind == "mcd" else confidence_negdist
        np.testing.assert_allclose(confidences_from_stats(H, stats, U, kind), [scalar(h, stats, U) for h in H], rtol=1e-12)

    def test_unknown_kind(self, rng):
        with pytest.raises(ValueError):
            confidence_forward(rng.normal(size=(2, 3)), rng.normal(size=(2, 3)), np.array([0, 1]), np.eye(3), "gate")

    def test_batch_centres_are_batch_means(self, rng):
        Hq, Hs, U = rng.normal(size=(3, 4)), rng.normal(size=(6, 4)), rng.normal(size=(4, 2))
        ys = np.array([0, 1, 0, 1, 1, 0])
        e, _ = confidence_forward(Hq, Hs, ys, U, "mcd")
        stats = compute_domain_stats(Hs, ys, 2)
        np.testing.assert_allclose(e, confidences_from_stats(Hq, stats, U, "mcd"), rtol=1e-12)

    def test_batch_missing_class_gives_zero(self, rng):
        Hs = rng.normal(size=(3, 4))
        e, cache = confidence_forward(rng.normal(size=(2, 4)), Hs, np.zeros(3, dtype=int), np.eye(4), "mcd")
        np.testing.assert_array_equal(e, 0.0)
        gq, gs, gu = confidence_backward(np.ones(2), np.eye(4), cache, 3)
        assert not (gq.any() or gs.any() or gu.any())

    @pytest.mark.parametrize("kind", ["mcd", "negdist"])
    @pytest.mark.parametrize("stop_grad", [False, True])
    def test_backward_matches_finite_differences(self, rng, kind, stop_grad):
        Hq, Hs, U = rng.normal(size=(3, 4)), rng.normal(size=(5, 4)), rng.normal(size=(4, 2))
        ys, g = np.array([0, 1, 1, 0, 1]), rng.normal(size=3)
        _, cache = confidence_forward(Hq, Hs, ys, U, kind, stop_grad)
        gq, gs, gu = confidence_backward(g, U, cache, len(Hs))

        def f(q=Hq, s=Hs, u=U):
            return float(confidence_forward(q, s, ys, u, kind)[0] @ g)

        assert grad_close(gq, finite_diff_grad(lambda t: f(q=t), Hq))
        assert grad_close(gu, finite_diff_grad(lambda t: f(u=t), U))
        if stop_grad:
            assert not gs.any()
        else:
            assert grad_close(gs, finite_diff_grad(lambda t: f(s=t), Hs))


class TestAlpha:
    def test_equal_confidences(self):
        np.testing.assert_allclose(normalize_alpha([0.3, 0.3, 0.3]), [1 / 3] * 3)

    def test_single_source(self):
        np.testing.assert_array_equal(normalize_alpha([-7.0]), [1.0])

    def test_hand_value(self):
        np.testing.assert_allclose(normalize_alpha([1.0, 0.0]), [0.7311, 0.2689], atol=1e-4)

    def test_empty(self):
        with pytest.raises(ValueError):
            normalize_alpha([])

    def test_non_finite(self):
        with pytest.raises(ValueError):
            normalize_alpha([0.0, float("inf")])

    @given(arrays(np.float64, st.integers(1, 6), elements=st.floats(-30, 30)))
    def test_valid_distribution(self, e):
        a = normalize_alpha(e)
        assert np.all(a >= 0) and np.all(a <= 1)
        assert abs(a.sum() - 1) <= 1e-12

    @given(arrays(np.float64, st.integers(1, 6), elements=st.floats(-30, 30)), st.floats(-100, 100))
    def test_shift_invariance(self, e, c):
        np.testing.assert_allclose(normalize_alpha(e + c), normalize_alpha(e), atol=1e-12)


def test_no_warning_when_all_classes_present(rng):
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        compute_domain_stats(rng.normal(size=(4, 2)), [0, 1, 0, 1], 2)
