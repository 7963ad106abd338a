import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from latentfilter.llvm import EmOptions, JointEnsemble, LatentPosterior, LlvmParams, fit_llvm, latent_posteriors
from latentfilter.mixture import (
    FactoredCov,
    GaussianMixture,
    build_joint_mixture,
    condition_mixture,
    count_modes,
    inflate_noise,
    mixture_moments,
    sample_mixture,
)

from oracles import dense_logpdf, gaussian_condition, rel_fro


def random_params(rng, h_q, h_d, m):
    h = h_q + h_d
    return LlvmParams(rng.standard_normal((h, m)), rng.standard_normal(h),
                      rng.uniform(0.2, 2.0, h), "fa", h_q, h_d)


def random_mixture(rng, k, dim, m=2):
    w = rng.dirichlet(np.ones(k))
    covs = [FactoredCov(rng.standard_normal((dim, m)), np.diag(rng.uniform(0.2, 1, m)),
                        rng.uniform(0.1, 1, dim)) for _ in range(k)]
    return GaussianMixture(w, 3 * rng.standard_normal((k, dim)), covs)


class TestFactoredCov:
    def test_logpdf_matches_dense(self):
        rng = np.random.default_rng(0)
        c = FactoredCov(rng.standard_normal((6, 2)), [[1.0, 0.3], [0.3, 0.5]], rng.uniform(0.5, 1, 6))
        means = rng.standard_normal((3, 6))
        x = rng.standard_normal(6)
        ref = [dense_logpdf(x, mu, c.dense()) for mu in means]
        assert np.allclose(c.logpdf(x, means), ref, atol=1e-10, rtol=0)

    def test_rejects_bad_shapes(self):
        with pytest.raises(ValueError):
            FactoredCov(np.zeros((3, 2)), np.eye(3), np.ones(3))


class TestGaussianMixture:
    def test_weights_must_sum_to_one(self):
        c = FactoredCov(np.zeros((1, 1)), np.eye(1), np.ones(1))
        with pytest.raises(ValueError):
            GaussianMixture([0.5, 0.6], [[0.0], [1.0]], [c])

    def test_single_covariance_broadcast(self):
        c = FactoredCov(np.zeros((1, 1)), np.eye(1), np.ones(1))
        gm = GaussianMixture([0.5, 0.5], [[0.0], [1.0]], [c])
        assert len(gm.covs) == 2 and gm.covs[0] is gm.covs[1]

    def test_effective_components_range(self):
        gm = random_mixture(np.random.default_rng(1), 5, 2)
        assert 1.0 <= gm.effective_components() <= 5.0
        c = FactoredCov(np.zeros((1, 1)), np.eye(1), np.ones(1))
        assert GaussianMixture([1.0, 0.0], [[0.0], [1.0]], [c]).effective_components() == pytest.approx(1.0)

    def test_marginal_pdf_integrates_to_one(self):
        gm = random_mixture(np.random.default_rng(2), 4, 3)
        x = np.linspace(-40, 40, 20001)
        f = gm.marginal_pdf(1, x)
        assert np.trapezoid(f, x) == pytest.approx(1.0, abs=1e-8)


class TestMoments:
    def test_single_component(self):
        c = FactoredCov(np.array([[1.0], [2.0]]), [[0.5]], [0.1, 0.2])
        mean, cov = mixture_moments(GaussianMixture([1.0], [[1.0, -1.0]], [c]))
        assert np.array_equal(mean, [1.0, -1.0])
        assert np.allclose(cov, c.dense(), atol=1e-15)

    def test_two_unit_components(self):
        c = FactoredCov(np.zeros((1, 1)), np.eye(1), np.ones(1))
        mean, cov = mixture_moments(GaussianMixture([0.5, 0.5], [[-1.0], [1.0]], [c]))
        assert mean[0] == pytest.approx(0.0, abs=1e-15)
        assert cov[0, 0] == pytest.approx(2.0, abs=1e-15)

    def test_monte_carlo_moments(self):
        rng = np.random.default_rng(3)
        gm = random_mixture(rng, 3, 2)
        mean, cov = mixture_moments(gm)
        draws = sample_mixture(gm, 10**6, np.random.default_rng(4))
        n = len(draws)
        se_mean = np.sqrt(np.diag(cov) / n)
        assert np.all(np.abs(draws.mean(axis=0) - mean) < 3 * se_mean)
        # SE of a sample covariance entry from the 4th central moments of the draws
        c = draws - mean
        for i in range(2):
            for j in range(2):
                prod = c[:, i] * c[:, j]
                se = prod.std() / np.sqrt(n)
                assert abs(prod.mean() - cov[i, j]) < 3 * se


class TestJointMixture:
    def test_single_member_at_mean(self):
        psi = np.array([0.5, 2.0, 1.0])
        p = LlvmParams(np.zeros((3, 1)), [1.0, 2.0, 3.0], psi, "fa", 2, 1)
        gm = build_joint_mixture(p, JointEnsemble(np.array([[1.0, 2.0, 3.0]]), 2, 1))
        assert gm.k == 1
        assert np.array_equal(gm.means[0], p.mu)
        assert np.allclose(gm.covs[0].dense(), np.diag(psi))

    def test_uniform_weights_shared_cov(self):
        rng = np.random.default_rng(5)
        Y = rng.standard_normal((12, 5))
        en = JointEnsemble(Y, 3, 2)
        gm = build_joint_mixture(fit_llvm(en, 2, seed=0), en)
        assert np.allclose(gm.weights, 1 / 12)
        assert len({id(c) for c in gm.covs}) == 1

    def test_block_mismatch(self):
        rng = np.random.default_rng(6)
        en = JointEnsemble(rng.standard_normal((8, 4)), 2, 2)
        with pytest.raises(ValueError):
            build_joint_mixture(fit_llvm(en, 1, seed=0), JointEnsemble(en.samples, 3, 1))

    def test_bimodal_ensemble_gives_bimodal_marginal(self):
        rng = np.random.default_rng(7)
        Y = np.vstack([rng.normal([-4, 0], 0.5, (40, 2)), rng.normal([4, 1], 0.5, (40, 2))])
        en = JointEnsemble(Y, 1, 1)
        p = fit_llvm(en, 1, "ppca", seed=0)
        gm = build_joint_mixture(p, en)
        x = np.linspace(-10, 10, 4001)
        assert count_modes(gm.marginal_pdf(0, x)) >= 2
        var = p.implied_cov()[0, 0]
        single = np.exp(-0.5 * (x - p.mu[0]) ** 2 / var)
        assert count_modes(single) == 1


class TestInflation:
    def test_zero_residual(self):
        p = random_params(np.random.default_rng(0), 2, 3, 1)
        r = inflate_noise(p, p.mu_d)
        assert r.alpha_raw == 0.0 and r.alpha == 1.0

    def test_scaling_by_noise(self):
        p = random_params(np.random.default_rng(1), 2, 3, 1)
        d = p.mu_d + np.array([1.0, -2.0, 0.5])
        p2 = LlvmParams(p.W, p.mu, np.r_[p.psi_q, 4.0 * p.psi_d], "fa", 2, 3)
        assert inflate_noise(p2, d).alpha_raw == pytest.approx(inflate_noise(p, d).alpha_raw / 4, rel=1e-14)

    def test_rejects_wrong_length(self):
        p = random_params(np.random.default_rng(2), 2, 3, 1)
        with pytest.raises(ValueError):
            inflate_noise(p, np.zeros(2))


def _prior_latents(p, n=1):
    cov = np.eye(p.m)
    return [LatentPosterior(np.zeros(p.m), cov) for _ in range(n)]


class TestCondition:
    def test_full_rank_model_matches_gaussian_conditioning(self):
        # M = H with tiny psi: each component reduces to conditioning N(mu, W W^T + Psi)
        rng = np.random.default_rng(3)
        for _ in range(20):
            h_q, h_d = rng.integers(1, 5, 2)
            h = h_q + h_d
            W = rng.standard_normal((h, h)) + 2 * np.eye(h)
            p = LlvmParams(W, rng.standard_normal(h), np.full(h, 1e-9), "ppca", h_q, h_d)
            d = rng.standard_normal(h_d)
            gm = condition_mixture(p, _prior_latents(p), d, 1.0)
            m_ref, c_ref = gaussian_condition(p.mu, p.implied_cov(), h_q, d)
            assert np.allclose(gm.means[0], m_ref, atol=1e-6, rtol=0)
            assert np.allclose(gm.covs[0].dense(), c_ref, atol=1e-6, rtol=0)

    def test_weights_are_observable_likelihoods(self):
        rng = np.random.default_rng(4)
        p = random_params(rng, 3, 3, 2)
        Y = rng.standard_normal((4, 6))
        lps = latent_posteriors(p, Y)
        d = rng.standard_normal(3)
        alpha = 1.7
        gm = condition_mixture(p, lps, d, alpha)
        Wd = p.W_d
        logw = [dense_logpdf(d, Wd @ lp.mean + p.mu_d, Wd @ lp.cov @ Wd.T + alpha * np.diag(p.psi_d))
                for lp in lps]
        ref = np.exp(logw - np.max(logw))
        assert np.allclose(gm.weights, ref / ref.sum(), atol=1e-12)

    def test_symmetric_members_equal_weights(self):
        rng = np.random.default_rng(5)
        p = random_params(rng, 2, 3, 2)
        off = rng.standard_normal(5)
        lps = latent_posteriors(p, np.vstack([p.mu + off, p.mu - off]))
        gm = condition_mixture(p, lps, p.mu_d, 1.0)
        assert np.allclose(gm.weights, 0.5, atol=1e-12)

    def test_weight_invariance_to_common_shift(self):
        # scaling every likelihood by the same constant: shift all latent means
        # along a direction invisible to the observables
        rng = np.random.default_rng(6)
        W = rng.standard_normal((5, 2))
        W[2:, 1] = 0.0
        p = LlvmParams(W, rng.standard_normal(5), rng.uniform(0.5, 1, 5), "fa", 2, 3)
        lps = latent_posteriors(p, rng.standard_normal((6, 5)))
        shifted = [LatentPosterior(lp.mean + np.array([0.0, 3.0]), lp.cov) for lp in lps]
        d = rng.standard_normal(3)
        assert np.allclose(condition_mixture(p, lps, d).weights, condition_mixture(p, shifted, d).weights,
                           atol=1e-12)

    def test_underflow_falls_back_to_uniform(self):
        rng = np.random.default_rng(7)
        p = LlvmParams(rng.standard_normal((4, 1)), np.zeros(4), np.full(4, 1e-300), "ppca", 2, 2)
        lps = latent_posteriors(p, rng.standard_normal((3, 4)))
        gm = condition_mixture(p, lps, np.array([1e10, -1e10]), 1.0)
        assert gm.diverged
        assert np.allclose(gm.weights, 1 / 3)

    def test_rejects_deflation(self):
        p = random_params(np.random.default_rng(8), 2, 2, 1)
        with pytest.raises(ValueError):
            condition_mixture(p, _prior_latents(p), np.zeros(2), 0.5)

    @settings(max_examples=40, deadline=None)
    @given(seed=st.integers(0, 2**32 - 1), n=st.integers(1, 12), alpha=st.floats(1.0, 50.0))
    def test_weights_normalised(self, seed, n, alpha):
        rng = np.random.default_rng(seed)
        p = random_params(rng, 3, 4, 2)
        lps = latent_posteriors(p, 5 * rng.standard_normal((n, 7)))
        gm = condition_mixture(p, lps, 5 * rng.standard_normal(4), alpha)
        assert abs(gm.weights.sum() - 1.0) < 1e-12
        assert np.all(gm.weights >= 0)
        assert gm.means.shape == (n, 3)


class TestSampling:
    def test_standard_normal(self):
        c = FactoredCov(np.zeros((3, 1)), np.eye(1), np.ones(3))
        x = sample_mixture(GaussianMixture([1.0], np.zeros((1, 3)), [c]), 10**5, np.random.default_rng(0))
        n = len(x)
        assert np.all(np.abs(x.mean(axis=0)) < 3 / np.sqrt(n))
        cov = np.cov(x, rowvar=False)
        se = np.sqrt((1 + np.eye(3)) / n)
        assert np.all(np.abs(cov - np.eye(3)) < 3 * se)

    def test_point_mass(self):
        c = FactoredCov(np.zeros((2, 1)), np.eye(1), np.full(2, 1e-24))
        x = sample_mixture(GaussianMixture([1.0], [[3.0, -1.0]], [c]), 50, np.random.default_rng(1))
        assert np.allclose(x, [3.0, -1.0], atol=1e-9)

    def test_deterministic(self):
        gm = random_mixture(np.random.default_rng(2), 4, 3)
        a = sample_mixture(gm, 100, np.random.default_rng(9))
        b = sample_mixture(gm, 100, np.random.default_rng(9))
        assert np.array_equal(a, b)

    def test_rejects_empty(self):
        gm = random_mixture(np.random.default_rng(3), 2, 2)
        with pytest.raises(ValueError):
            sample_mixture(gm, 0, np.random.default_rng(0))

    def test_rescaled_matches_scaled_moments(self):
        gm = random_mixture(np.random.default_rng(4), 3, 3)
        s = np.array([2.0, 0.5, 3.0])
        m0, c0 = mixture_moments(gm)
        m1, c1 = mixture_moments(gm.rescaled(s))
        assert np.allclose(m1, s * m0)
        assert rel_fro(c1, c0 * np.outer(s, s)) < 1e-12


def test_lemma_small_fit():
    rng = np.random.default_rng(11)
    Y = rng.standard_normal((60, 2)) @ rng.standard_normal((2, 6)) + 0.5 * rng.standard_normal((60, 6))
    en = JointEnsemble(Y, 4, 2)
    p = fit_llvm(en, 2, "ppca", EmOptions(tol=1e-12, param_tol=1e-10, max_iter=20000), seed=0)
    mean, cov = mixture_moments(build_joint_mixture(p, en))
    assert np.abs(mean - p.mu).max() < 1e-10
    assert rel_fro(cov, p.implied_cov()) < 1e-5
