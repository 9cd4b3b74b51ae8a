import numpy as np
import pytest

from gmddf.gaussians import (
    GaussianComponent,
    GaussianMixture,
    RandomProblemConfig,
    gaussian_product_log,
    random_gm,
)
from gmddf.quotient import (
    ExactCommonInfo,
    WepCommonInfo,
    expand_quotient,
    foci_fuse,
    gaussian_quotient_log,
    log_weight_upper_bound,
    mixand_eval,
    mmgd_fuse,
    naive_bayes_fuse,
    prune_by_bound,
    weight_upper_bound,
)

from conftest import random_mixture, random_spd


def single_gm(mu, cov):
    return GaussianMixture([GaussianComponent(1.0, mu, cov)])


def small_problem(seed, n_i=3, n_j=3, n_c=4):
    rng = np.random.default_rng(seed)
    p_i = random_mixture(rng, 2, n_i, mean_scale=4.0, cov_scale=0.4)
    p_j = random_mixture(rng, 2, n_j, mean_scale=4.0, cov_scale=0.4)
    p_c = random_mixture(rng, 2, n_c, mean_scale=6.0, cov_scale=0.8)
    return p_i, p_j, p_c, rng


class TestExpandQuotient:
    def test_self_quotient_cancels_one_factor(self, rng):
        mu = np.array([1.0, -0.5])
        cov = random_spd(rng, 2)
        gm = single_gm(mu, cov)
        q = expand_quotient(gm, gm, ExactCommonInfo(gm))
        assert len(q) == 1
        x = rng.uniform(-3, 3, size=(40, 2))
        ratio = q.log_density(x) - gm.logpdf(x)
        np.testing.assert_allclose(ratio, ratio[0], atol=1e-10)

    def test_pairwise_preweights(self, rng):
        p_i = random_mixture(rng, 2, 2)
        p_j = random_mixture(rng, 2, 2)
        q = expand_quotient(p_i, p_j, ExactCommonInfo(random_mixture(rng, 2, 2)))
        assert len(q) == 4
        for m in q.mixands:
            ci, cj = p_i.components[m.v], p_j.components[m.r]
            _, log_zbar = gaussian_product_log(ci, cj)
            expected = np.log(ci.weight) + np.log(cj.weight) + log_zbar
            assert m.log_pre_weight == pytest.approx(expected, rel=1e-12)

    @pytest.mark.parametrize("seed", range(8))
    def test_pointwise_identity_exact(self, seed):
        p_i, p_j, p_c, rng = small_problem(seed)
        q = expand_quotient(p_i, p_j, ExactCommonInfo(p_c))
        x = rng.uniform(-6, 6, size=(50, 2))
        direct = p_i.logpdf(x) + p_j.logpdf(x) - p_c.logpdf(x)
        np.testing.assert_allclose(np.exp(q.log_density(x) - direct), 1.0, rtol=1e-9)

    @pytest.mark.parametrize("seed", range(8))
    def test_pointwise_identity_wep(self, seed):
        p_i, p_j, _, rng = small_problem(seed)
        omega = rng.uniform(0.1, 0.9)
        q = expand_quotient(p_i, p_j, WepCommonInfo(p_i, p_j, omega))
        x = rng.uniform(-6, 6, size=(50, 2))
        direct = omega * p_i.logpdf(x) + (1 - omega) * p_j.logpdf(x)
        np.testing.assert_allclose(np.exp(q.log_density(x) - direct), 1.0, rtol=1e-9)


class TestMixandEval:
    def test_u_equal_to_numerator_gives_constant(self, rng):
        cov = random_spd(rng, 2)
        gm = single_gm([0.5, 0.5], cov)
        q = expand_quotient(gm, gm, ExactCommonInfo(gm))
        m = q.mixands[0]
        x = rng.uniform(-2, 2, size=(30, 2))
        vals = mixand_eval(m, x)
        ratio = vals / vals[0]
        np.testing.assert_allclose(ratio, np.exp(gm.logpdf(x) - gm.logpdf(x[0])), rtol=1e-9)

    def test_wep_omega_one_divides_by_pj(self, rng):
        p_i = random_mixture(rng, 2, 2)
        p_j = random_mixture(rng, 2, 3)
        q = expand_quotient(p_i, p_j, WepCommonInfo(p_i, p_j, 1.0))
        m = q.mixands[0]
        x = rng.uniform(-4, 4, size=(25, 2))
        expected = np.exp(m.numerator.logpdf(x) - p_j.logpdf(x))
        np.testing.assert_allclose(mixand_eval(m, x), expected, rtol=1e-12)

    def test_matches_naive_tabulation(self, rng):
        p_i, p_j, p_c, _ = small_problem(99)
        q = expand_quotient(p_i, p_j, ExactCommonInfo(p_c))
        x = rng.uniform(-5, 5, size=(100, 2))
        for m in q.mixands[:4]:
            naive = m.numerator.pdf(x) / p_c.pdf(x)
            np.testing.assert_allclose(mixand_eval(m, x), naive, rtol=1e-9)


class TestWeightUpperBound:
    def test_analytic_single_component(self):
        # Numerator N(0, I) over a single wider common-info Gaussian N(0, 2I):
        # the quotient Gaussian exists and the bound equals its integral.
        from gmddf.quotient import QuotientMixand

        ci = ExactCommonInfo(single_gm([0.0, 0.0], 2.0 * np.eye(2)))
        m = QuotientMixand(0, 0, GaussianComponent(1.0, [0.0, 0.0], np.eye(2)), 0.0, ci)
        _, log_c = gaussian_quotient_log(m.numerator, ci.gm.components[0])
        # Oracle: numeric integration of the ratio on a wide grid.
        grid = np.linspace(-12, 12, 801)
        xx, yy = np.meshgrid(grid, grid)
        pts = np.column_stack([xx.ravel(), yy.ravel()])
        cell = (grid[1] - grid[0]) ** 2
        ratio = np.exp(m.numerator.logpdf(pts) - ci.gm.logpdf(pts))
        integral = float(ratio.sum() * cell)
        assert weight_upper_bound(m) == pytest.approx(integral, rel=1e-3)
        assert weight_upper_bound(m) == pytest.approx(np.exp(log_c), rel=1e-12)

    def test_identical_numerator_and_common_gives_inf(self, rng):
        cov = random_spd(rng, 2)
        gm = single_gm([0.0, 0.0], cov)
        q = expand_quotient(gm, single_gm([0.0, 0.0], 1e5 * cov), ExactCommonInfo(gm))
        m = q.mixands[0]
        quot = gaussian_quotient_log(m.numerator, gm.components[0])
        if quot is None:
            assert np.isinf(weight_upper_bound(m))

    @pytest.mark.parametrize("seed", range(5))
    def test_bound_dominates_grid_mass(self, seed):
        # Oracle: grid quadrature of each mixand's unnormalized mass.
        p_i, p_j, p_c, _ = small_problem(seed)
        q = expand_quotient(p_i, p_j, ExactCommonInfo(p_c))
        grid = np.linspace(-25, 25, 501)
        xx, yy = np.meshgrid(grid, grid)
        pts = np.column_stack([xx.ravel(), yy.ravel()])
        cell = (grid[1] - grid[0]) ** 2
        for m in q.mixands:
            mass = float(np.exp(m.log_density(pts)).sum() * cell)
            assert weight_upper_bound(m) >= 0.999 * mass


class TestPruneByBound:
    def test_zero_threshold_is_identity(self):
        p_i, p_j, p_c, _ = small_problem(3)
        q = expand_quotient(p_i, p_j, ExactCommonInfo(p_c))
        assert prune_by_bound(q, 0.0) is q

    def test_dominant_mass_mixand_always_survives(self):
        from gmddf.quotient import log_mass_lower_bound

        p_i, p_j, p_c, _ = small_problem(4)
        q = expand_quotient(p_i, p_j, ExactCommonInfo(p_c))
        best = max(range(len(q)), key=lambda i: log_mass_lower_bound(q.mixands[i]))
        target = (q.mixands[best].v, q.mixands[best].r)
        for threshold in (1e-12, 1e-6, 1e-2, 1.0):
            pruned = prune_by_bound(q, threshold)
            assert target in {(m.v, m.r) for m in pruned.mixands}

    def test_threshold_monotone(self):
        p_i, p_j, p_c, _ = small_problem(4)
        q = expand_quotient(p_i, p_j, ExactCommonInfo(p_c))
        sizes = [len(prune_by_bound(q, t)) for t in (0.0, 1e-12, 1e-6, 1e-2)]
        assert sizes == sorted(sizes, reverse=True)

    def test_pruned_mixands_hold_negligible_mass(self):
        # Oracle: grid mass fraction of every pruned mixand stays below the
        # threshold, per the guarantee the pruning rule is built on.
        threshold = 1e-4
        for seed in range(4):
            p_i, p_j, p_c, rng = small_problem(40 + seed)
            q = expand_quotient(p_i, p_j, ExactCommonInfo(p_c))
            kept = {(m.v, m.r) for m in prune_by_bound(q, threshold).mixands}
            grid = np.linspace(-30, 30, 401)
            xx, yy = np.meshgrid(grid, grid)
            pts = np.column_stack([xx.ravel(), yy.ravel()])
            cell = (grid[1] - grid[0]) ** 2
            masses = np.array(
                [m.log_pre_weight + np.log(np.exp(m.log_density(pts)).sum() * cell)
                 for m in q.mixands]
            )
            total = np.logaddexp.reduce(masses)
            for i, m in enumerate(q.mixands):
                if (m.v, m.r) not in kept:
                    assert np.exp(masses[i] - total) < threshold

    def test_survivor_order_preserved(self):
        p_i, p_j, p_c, _ = small_problem(5)
        q = expand_quotient(p_i, p_j, ExactCommonInfo(p_c))
        pruned = prune_by_bound(q, 1e-6)
        pairs = [(m.v, m.r) for m in pruned.mixands]
        original = [(m.v, m.r) for m in q.mixands if (m.v, m.r) in set(pairs)]
        assert pairs == original

    def test_requires_exact_common_info(self):
        p_i, p_j, _, _ = small_problem(6)
        q = expand_quotient(p_i, p_j, WepCommonInfo(p_i, p_j, 0.5))
        with pytest.raises(TypeError):
            prune_by_bound(q, 1e-6)


class TestMmgd:
    def test_gaussian_quotient_identity(self):
        num = GaussianComponent(1.0, [0.0], [[0.5]])
        den = GaussianComponent(1.0, [0.0], [[2.0]])
        comp, log_c = gaussian_quotient_log(num, den)
        assert 1.0 / comp.cov[0, 0] == pytest.approx(2.0 - 0.5, rel=1e-12)
        xs = np.linspace(-3, 3, 41)[:, None]
        lhs = num.logpdf(xs) - den.logpdf(xs)
        rhs = log_c + comp.logpdf(xs)
        np.testing.assert_allclose(np.exp(lhs - rhs), 1.0, rtol=1e-10)

    def test_single_gaussian_denominator_is_exact(self, rng):
        p_i = random_mixture(rng, 2, 3, cov_scale=0.4)
        p_j = random_mixture(rng, 2, 2, cov_scale=0.4)
        p_c = single_gm([0.0, 0.0], 8.0 * np.eye(2))
        fused = mmgd_fuse(p_i, p_j, p_c)
        x = rng.uniform(-4, 4, size=(50, 2))
        direct = p_i.logpdf(x) + p_j.logpdf(x) - p_c.logpdf(x)
        ratio = fused.logpdf(x) - direct
        np.testing.assert_allclose(ratio, ratio[0], atol=1e-9)

    def test_output_normalized(self):
        p_i, p_j, p_c, _ = small_problem(7)
        fused = mmgd_fuse(p_i, p_j, p_c)
        assert fused.is_normalized


class TestFoci:
    def test_single_gaussian_ci(self, rng):
        cov_a, cov_b = random_spd(rng, 2), random_spd(rng, 2)
        mu_a, mu_b = rng.standard_normal(2), rng.standard_normal(2)
        fused = foci_fuse(single_gm(mu_a, cov_a), single_gm(mu_b, cov_b), 0.5)
        prec = 0.5 * np.linalg.inv(cov_a) + 0.5 * np.linalg.inv(cov_b)
        expected_cov = np.linalg.inv(prec)
        expected_mean = expected_cov @ (
            0.5 * np.linalg.solve(cov_a, mu_a) + 0.5 * np.linalg.solve(cov_b, mu_b)
        )
        np.testing.assert_allclose(fused.components[0].cov, expected_cov, rtol=1e-10)
        np.testing.assert_allclose(fused.components[0].mean, expected_mean, rtol=1e-10)

    def test_self_fusion_diagonal_pairs_keep_covariance(self, rng):
        gm = random_mixture(rng, 2, 3)
        fused = foci_fuse(gm, gm, 0.37)
        n = len(gm)
        for q in range(n):
            comp = fused.components[q * n + q]
            np.testing.assert_allclose(comp.cov, gm.components[q].cov, rtol=1e-10)

    def test_omega_one_returns_pi_covariances(self, rng):
        p_i = random_mixture(rng, 2, 3)
        p_j = random_mixture(rng, 2, 2)
        fused = foci_fuse(p_i, p_j, 1.0)
        for m, comp in enumerate(fused.components):
            qi = m // len(p_j)
            np.testing.assert_allclose(comp.cov, p_i.components[qi].cov, rtol=1e-10)

    def test_rejects_bad_omega(self, rng):
        gm = random_mixture(rng, 2, 2)
        with pytest.raises(ValueError):
            foci_fuse(gm, gm, 1.5)


class TestNaiveBayes:
    def test_identical_single_gaussians(self, rng):
        cov = random_spd(rng, 2)
        gm = single_gm([1.0, 2.0], cov)
        fused = naive_bayes_fuse(gm, gm)
        np.testing.assert_allclose(fused.components[0].cov, cov / 2, rtol=1e-10)
        np.testing.assert_allclose(fused.components[0].mean, [1.0, 2.0], rtol=1e-10)

    def test_pointwise_proportional_to_product(self, rng):
        p_i = random_mixture(rng, 2, 3)
        p_j = random_mixture(rng, 2, 4)
        fused = naive_bayes_fuse(p_i, p_j)
        x = rng.uniform(-4, 4, size=(50, 2))
        ratio = fused.logpdf(x) - (p_i.logpdf(x) + p_j.logpdf(x))
        np.testing.assert_allclose(ratio, ratio[0], atol=1e-9)

    def test_output_normalized(self, rng):
        fused = naive_bayes_fuse(random_mixture(rng, 2, 3), random_mixture(rng, 2, 3))
        assert fused.is_normalized
