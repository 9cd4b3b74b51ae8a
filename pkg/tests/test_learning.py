import numpy as np
import pytest
from scipy.special import logsumexp

from gmddf.errors import EmptyResultError
from gmddf.gaussians import GaussianComponent, GaussianMixture, mixture_moments
from gmddf.learning import (
    _wem_single,
    prune_small_weights,
    runnalls_compress,
    sswem_fit,
    wem_fit,
)
from gmddf.quotient import ExactCommonInfo, QuotientMixand, QuotientPosterior, expand_quotient
from gmddf.sampling import WeightedSampleSet

from conftest import random_mixture, random_spd


def sg(mu, cov):
    return GaussianMixture([GaussianComponent(1.0, mu, cov)])


def make_sample_set(points, weights, numerators=None):
    cache = None
    if numerators is not None:
        cache = np.stack([c.logpdf(points) for c in numerators])
    return WeightedSampleSet(points=points, weights=weights, numerator_logpdfs=cache)


class TestWemFit:
    def test_single_component_recovers_weighted_moments(self, rng):
        points = rng.standard_normal((500, 2)) * [2.0, 0.5] + [1.0, -1.0]
        theta = rng.uniform(0.5, 1.5, size=500)
        sset = make_sample_set(points, theta)
        init = sg([0.0, 0.0], np.eye(2))
        fitted = wem_fit(sset, 1, init=init, max_steps=1)
        tn = theta / theta.sum()
        mu = tn @ points
        centered = points - mu
        cov = (centered.T * tn) @ centered
        np.testing.assert_allclose(fitted.components[0].mean, mu, rtol=1e-10)
        np.testing.assert_allclose(fitted.components[0].cov, cov, rtol=1e-8)

    def test_uniform_weights_match_classical_em(self, rng):
        # Oracle: classical EM implemented inline; with uniform weights the
        # weighted trajectory must coincide step for step.
        gm_true = random_mixture(rng, 2, 2, mean_scale=4.0)
        points = gm_true.sample(800, rng)
        init = random_mixture(np.random.default_rng(5), 2, 2, mean_scale=3.0)
        theta = np.full(800, 1.0 / 800)
        fitted, _, _ = _wem_single(points, theta, init, max_steps=4)

        w = init.weights.copy()
        means = [c.mean.copy() for c in init.components]
        covs = [c.cov.copy() for c in init.components]
        for _ in range(4):
            gm = GaussianMixture.from_arrays(w, means, covs)
            log_resp = gm.component_logpdfs(points) + np.log(gm.weights)[:, None]
            resp = np.exp(log_resp - logsumexp(log_resp, axis=0))
            nbar = resp.sum(axis=1)
            w = nbar / nbar.sum()
            means = [resp[z] @ points / nbar[z] for z in range(2)]
            covs = []
            for z in range(2):
                c = points - means[z]
                covs.append((c.T * resp[z]) @ c / nbar[z])
        np.testing.assert_allclose(fitted.weights, w, rtol=1e-8)
        np.testing.assert_allclose(fitted.means, means, rtol=1e-7)

    def test_two_cluster_recovery_across_seeds(self):
        truth_means = np.array([[-5.0, 0.0], [5.0, 0.0]])
        separation = 10.0
        for seed in range(20):
            rng = np.random.default_rng(seed)
            gm_true = GaussianMixture(
                [
                    GaussianComponent(0.5, truth_means[0], 0.8 * np.eye(2)),
                    GaussianComponent(0.5, truth_means[1], 0.8 * np.eye(2)),
                ]
            )
            points = gm_true.sample(10_000, rng)
            sset = make_sample_set(points, np.ones(10_000))
            fitted = wem_fit(sset, 2, rng=rng)
            got = fitted.means[np.argsort(fitted.means[:, 0])]
            assert np.linalg.norm(got - truth_means, axis=1).max() < 0.02 * separation

    def test_log_likelihood_monotone(self, rng):
        gm_true = random_mixture(rng, 2, 3, mean_scale=4.0)
        points = gm_true.sample(1500, rng)
        theta = rng.uniform(0.2, 1.0, size=1500)
        theta /= theta.sum()
        init = random_mixture(np.random.default_rng(9), 2, 3, mean_scale=4.0)
        _, history, _ = _wem_single(points, theta, init, max_steps=30)
        diffs = np.diff(history)
        assert diffs.min() >= -1e-9

    def test_collapsed_component_dropped(self, rng):
        points = rng.standard_normal((400, 2))
        sset = make_sample_set(points, np.ones(400))
        init = GaussianMixture(
            [
                GaussianComponent(0.49, [0.0, 0.0], np.eye(2)),
                GaussianComponent(0.49, [0.2, 0.1], np.eye(2)),
                GaussianComponent(0.02, [500.0, 500.0], 0.01 * np.eye(2)),
            ]
        )
        fitted, _, flags = _wem_single(points, np.full(400, 1 / 400), init, max_steps=10)
        assert len(fitted) == 2
        assert any("collapsed" in f for f in flags)


class TestSswemFit:
    def test_single_mixand_reduces_to_moment_matching(self, rng):
        num = GaussianComponent(1.0, [0.0, 0.0], np.eye(2))
        common = ExactCommonInfo(sg([0.0, 0.0], 5.0 * np.eye(2)))
        q = QuotientPosterior(
            [QuotientMixand(0, 0, num, 0.0, common)], sg([0, 0], np.eye(2)), sg([0, 0], np.eye(2)), common
        )
        points = rng.standard_normal((1000, 2)) + [0.5, -0.5]
        theta = rng.uniform(0.1, 1.0, size=1000)
        sset = make_sample_set(points, theta, numerators=[num])
        fitted = sswem_fit(sset, q)
        tn = theta / theta.sum()
        mu = tn @ points
        centered = points - mu
        cov = (centered.T * tn) @ centered
        assert len(fitted) == 1
        np.testing.assert_allclose(fitted.components[0].mean, mu, rtol=1e-10)
        np.testing.assert_allclose(fitted.components[0].cov, cov, rtol=1e-8)

    def _three_component_problem(self, n, rng):
        gm_true = GaussianMixture(
            [
                GaussianComponent(0.5, [-6.0, 0.0], 0.7 * np.eye(2)),
                GaussianComponent(0.3, [0.0, 5.0], np.eye(2)),
                GaussianComponent(0.2, [6.0, -2.0], 0.5 * np.eye(2)),
            ]
        )
        wide = sg([0.0, 0.0], 1e6 * np.eye(2))
        q = expand_quotient(gm_true, wide, ExactCommonInfo(sg([0.0, 0.0], 400.0 * np.eye(2))))
        points = gm_true.sample(n, rng)
        sset = WeightedSampleSet(
            points=points,
            weights=np.ones(n),
            numerator_logpdfs=q.numerator_logpdfs(points),
        )
        return gm_true, q, sset

    def test_generative_recovery(self):
        rng = np.random.default_rng(77)
        gm_true, q, sset = self._three_component_problem(50_000, rng)
        fitted = sswem_fit(sset, q)
        order = np.argsort(fitted.means[:, 0])
        got_w = fitted.weights[order]
        got_mu = fitted.means[order]
        true_order = np.argsort(gm_true.means[:, 0])
        spread = np.linalg.norm(gm_true.means.max(axis=0) - gm_true.means.min(axis=0))
        assert np.abs(got_w - gm_true.weights[true_order]).max() < 0.02
        assert np.linalg.norm(got_mu - gm_true.means[true_order], axis=1).max() < 0.02 * spread

    def test_responsibilities_sum_to_theta(self, rng):
        _, q, sset = self._three_component_problem(2000, rng)
        theta = sset.normalized_weights()
        log_num = q.log_pre_weights[:, None] + sset.numerator_logpdfs
        gamma = np.exp(log_num - logsumexp(log_num, axis=0)) * theta
        np.testing.assert_allclose(gamma.sum(axis=0), theta, rtol=1e-12)

    def test_common_info_cancellation_bitwise(self, rng):
        # Identical samples, weights, and numerators under two different
        # denominators must produce bitwise-identical fits.
        num_comps = [
            GaussianComponent(1.0, [-2.0, 0.0], np.eye(2)),
            GaussianComponent(1.0, [2.0, 0.0], 0.5 * np.eye(2)),
        ]
        pre = [np.log(0.6), np.log(0.4)]
        u1 = ExactCommonInfo(sg([0.0, 0.0], 3.0 * np.eye(2)))
        u2 = ExactCommonInfo(random_mixture(np.random.default_rng(3), 2, 3, mean_scale=2.0))
        p_dummy = sg([0.0, 0.0], np.eye(2))
        q1 = QuotientPosterior(
            [QuotientMixand(0, z, c, lw, u1) for z, (c, lw) in enumerate(zip(num_comps, pre))],
            p_dummy, p_dummy, u1,
        )
        q2 = QuotientPosterior(
            [QuotientMixand(0, z, c, lw, u2) for z, (c, lw) in enumerate(zip(num_comps, pre))],
            p_dummy, p_dummy, u2,
        )
        points = rng.standard_normal((500, 2)) * 2.0
        theta = rng.uniform(0.1, 1.0, size=500)
        sset = make_sample_set(points, theta, numerators=num_comps)
        a = sswem_fit(sset, q1)
        b = sswem_fit(sset, q2)
        assert np.array_equal(a.weights, b.weights)
        assert np.array_equal(a.means, b.means)
        assert np.array_equal(a.covs, b.covs)

    def test_missing_cache_rejected(self, rng):
        _, q, sset = self._three_component_problem(100, rng)
        bare = WeightedSampleSet(points=sset.points, weights=sset.weights)
        with pytest.raises(ValueError):
            sswem_fit(bare, q)


class TestRunnallsCompress:
    def test_identity_when_under_cap(self, rng):
        gm = random_mixture(rng, 2, 4)
        assert runnalls_compress(gm, 4) is gm
        assert runnalls_compress(gm, 10) is gm

    def test_identical_pair_merges_cleanly(self, rng):
        cov = random_spd(rng, 2)
        gm = GaussianMixture(
            [GaussianComponent(0.3, [1.0, 2.0], cov), GaussianComponent(0.7, [1.0, 2.0], cov)]
        )
        merged = runnalls_compress(gm, 1)
        assert len(merged) == 1
        assert merged.components[0].weight == pytest.approx(1.0)
        np.testing.assert_allclose(merged.components[0].mean, [1.0, 2.0], rtol=1e-12)
        np.testing.assert_allclose(merged.components[0].cov, cov, rtol=1e-12)

    @pytest.mark.parametrize("seed", range(30))
    def test_moment_preservation(self, seed):
        rng = np.random.default_rng(seed)
        gm = random_mixture(rng, 2, rng.integers(5, 12), mean_scale=5.0)
        out = runnalls_compress(gm, int(rng.integers(1, 4)))
        mean_in, cov_in = mixture_moments(gm)
        mean_out, cov_out = mixture_moments(out)
        assert np.abs(mean_in - mean_out).max() < 1e-10
        assert np.abs(cov_in - cov_out).max() < 1e-10

    def test_close_pair_merges_first(self, rng):
        cov = 0.5 * np.eye(2)
        gm = GaussianMixture(
            [
                GaussianComponent(0.4, [0.0, 0.0], cov),
                GaussianComponent(0.4, [0.05, 0.0], cov),
                GaussianComponent(0.2, [30.0, 0.0], cov),
            ]
        )
        out = runnalls_compress(gm, 2)
        isolated = min(out.components, key=lambda c: abs(c.weight - 0.2))
        np.testing.assert_allclose(isolated.mean, [30.0, 0.0], rtol=1e-12)
        np.testing.assert_allclose(isolated.cov, cov, rtol=1e-12)


class TestPruneSmallWeights:
    def test_zero_eps_identity(self, rng):
        gm = random_mixture(rng, 2, 3)
        assert prune_small_weights(gm, 0.0) is gm

    def test_dominant_component_survives(self):
        gm = GaussianMixture(
            [
                GaussianComponent(0.9, [0.0], [[1.0]]),
                GaussianComponent(0.06, [5.0], [[1.0]]),
                GaussianComponent(0.04, [-5.0], [[1.0]]),
            ]
        )
        out = prune_small_weights(gm, 0.5)
        assert len(out) == 1
        assert out.components[0].weight == pytest.approx(1.0)

    def test_pointwise_change_bounded(self, rng):
        gm = random_mixture(rng, 2, 6, mean_scale=4.0)
        eps = 1e-4
        out = prune_small_weights(gm, eps)
        x = rng.uniform(-6, 6, size=(200, 2))
        peak = max(
            np.exp(-0.5 * c.log_det - np.log(2 * np.pi)) for c in gm.components
        )
        assert np.abs(out.pdf(x) - gm.pdf(x)).max() < eps * len(gm) * peak + 1e-12

    def test_all_pruned_rejected(self, rng):
        gm = random_mixture(rng, 2, 4)
        with pytest.raises(EmptyResultError):
            prune_small_weights(gm, 0.9)

    def test_invalid_eps(self, rng):
        gm = random_mixture(rng, 2, 2)
        with pytest.raises(ValueError):
            prune_small_weights(gm, 1.0)
