import json
import math

import numpy as np
import pytest
from scipy import stats
from scipy.integrate import quad

from mixedabc.dataset import InvalidConfig
from mixedabc.distfit import (
    FAMILIES,
    ChainDiverged,
    ChainSummary,
    DegenerateSample,
    FittedPrior,
    McmcConfig,
    NoValidCandidate,
    SupportViolation,
    TooSmallSample,
    fit_family,
    get_family,
    mcmc_posterior,
    model_probs,
    sample_prior,
    select_model,
)


def _logistic_draws(rng, mu, s, n):
    u = rng.uniform(size=n)
    return mu + s * (np.log(u) - np.log1p(-u))


class TestFamilyDensities:
    def test_continuous_integrate_to_one(self):
        cases = [
            ("normal", (3.0, 2.0)),
            ("logistic", (1763.0, 214.22)),
            ("cauchy", (578.56, 30.15)),
        ]
        for tag, theta in cases:
            fam = get_family(tag)
            val, _ = quad(
                lambda v: math.exp(fam.logpdf(theta, np.array([v]))[0]),
                -np.inf,
                np.inf,
            )
            assert val == pytest.approx(1.0, abs=1e-6)

    def test_discrete_sum_to_one(self):
        fam = get_family("negative_binomial")
        r, p = 2.322, 0.009
        sd = math.sqrt(r * (1 - p)) / p
        ks = np.arange(0, int(r * (1 - p) / p + 60 * sd), dtype=float)
        assert np.exp(fam.logpdf((r, p), ks)).sum() == pytest.approx(1.0, abs=1e-6)
        fam = get_family("binomial")
        assert np.exp(fam.logpdf((0.75,), np.array([0.0, 1.0]))).sum() == pytest.approx(1.0, abs=1e-12)
        fam = get_family("discrete_uniform")
        grid = np.arange(7, 43, dtype=float)
        assert np.exp(fam.logpdf((7.0, 42.0), grid)).sum() == pytest.approx(1.0, abs=1e-12)

    def test_logpdf_against_scipy(self):
        x = np.array([-3.0, -0.5, 0.0, 1.7, 9.0])
        np.testing.assert_allclose(
            get_family("normal").logpdf((1.0, 2.5), x),
            stats.norm.logpdf(x, 1.0, 2.5),
            rtol=1e-12,
        )
        np.testing.assert_allclose(
            get_family("logistic").logpdf((1.0, 2.5), x),
            stats.logistic.logpdf(x, 1.0, 2.5),
            rtol=1e-12,
        )
        np.testing.assert_allclose(
            get_family("cauchy").logpdf((1.0, 2.5), x),
            stats.cauchy.logpdf(x, 1.0, 2.5),
            rtol=1e-12,
        )
        k = np.array([0.0, 1.0, 5.0, 40.0])
        np.testing.assert_allclose(
            get_family("negative_binomial").logpdf((2.322, 0.4), k),
            stats.nbinom.logpmf(k, 2.322, 0.4),
            rtol=1e-12,
        )
        b = np.array([0.0, 1.0])
        np.testing.assert_allclose(
            get_family("binomial").logpdf((0.3,), b),
            stats.bernoulli.logpmf(b, 0.3),
            rtol=1e-12,
        )
        g = np.array([6.0, 7.0, 20.0, 42.0, 43.0])
        np.testing.assert_allclose(
            get_family("discrete_uniform").logpdf((7.0, 42.0), g),
            stats.randint.logpmf(g, 7, 43),
            rtol=1e-12,
        )


class TestMaximumLikelihood:
    def test_normal_closed_form(self):
        x = np.array([1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0])
        (mu, sigma), ll = fit_family("normal", x)
        assert mu == pytest.approx(4.5, abs=0)
        assert sigma == pytest.approx(float(np.std(x)), abs=0)
        assert ll == pytest.approx(float(stats.norm.logpdf(x, mu, sigma).sum()), rel=1e-12)

    def test_discrete_uniform_min_max(self):
        rng = np.random.default_rng(0)
        x = np.floor(rng.uniform(7, 43, 500))
        (a, b), ll = fit_family("discrete_uniform", x)
        assert (a, b) == (7.0, 42.0)
        assert ll == pytest.approx(-500 * math.log(36), rel=1e-12)

    def test_bit_mean_closed_form(self):
        # closed form on the bare family, then through the size-gated entry point
        theta, _ = FAMILIES["binomial"].fit(np.array([1.0, 1.0, 0.0, 1.0]))
        assert theta == (0.75,)
        (p,), _ = fit_family("binomial", np.array([1.0, 1.0, 0.0, 1.0] * 2))
        assert p == 0.75

    def test_logistic_consistency_within_one_percent(self):
        rng = np.random.default_rng(7)
        x = _logistic_draws(rng, 1763.00, 214.22, 100_000)
        (mu, s), _ = fit_family("logistic", x)
        assert abs(mu - 1763.00) / 1763.00 < 0.01
        assert abs(s - 214.22) / 214.22 < 0.01

    def test_cauchy_consistency(self):
        rng = np.random.default_rng(8)
        x = 578.56 + 30.15 * np.tan(math.pi * (rng.uniform(size=100_000) - 0.5))
        (x0, gamma), _ = fit_family("cauchy", x)
        assert abs(x0 - 578.56) / 578.56 < 0.02
        assert abs(gamma - 30.15) / 30.15 < 0.02

    def test_negative_binomial_consistency(self):
        rng = np.random.default_rng(9)
        r, p = 2.322, 0.009
        x = rng.poisson(rng.gamma(r, (1 - p) / p, 100_000)).astype(float)
        (rh, ph), _ = fit_family("negative_binomial", x)
        assert abs(rh - r) / r < 0.03
        assert abs(ph - p) / p < 0.03

    def test_negative_binomial_gradient_at_optimum(self):
        # finite differences resolve the gradient only away from the p->0
        # boundary, so the FD check runs at moderate p
        rng = np.random.default_rng(10)
        x = rng.poisson(rng.gamma(2.0, (1 - 0.3) / 0.3, 1000)).astype(float)
        fam = get_family("negative_binomial")
        (rh, ph), _ = fit_family(fam, x)
        hr = 1e-5 * max(1.0, rh)
        hp = 1e-6 * ph
        gr = (fam.loglik((rh + hr, ph), x) - fam.loglik((rh - hr, ph), x)) / (2 * hr)
        gp = (fam.loglik((rh, ph + hp), x) - fam.loglik((rh, ph - hp), x)) / (2 * hp)
        assert abs(gr) <= 1e-6
        assert abs(gp) <= 1e-6

    def test_negative_binomial_gradient_identity_tiny_p(self):
        # at production-like p the p-score n*r/p - sum(x)/(1-p) vanishes
        # exactly because p is profiled out in closed form
        rng = np.random.default_rng(11)
        x = rng.poisson(rng.gamma(2.322, (1 - 0.009) / 0.009, 1000)).astype(float)
        (rh, ph), _ = fit_family("negative_binomial", x)
        n = len(x)
        score_p = n * rh / ph - x.sum() / (1 - ph)
        assert abs(score_p) <= 1e-6 * n * rh / ph

    def test_support_violations(self):
        with pytest.raises(SupportViolation):
            fit_family("negative_binomial", np.array([1.0, 2.5, 3.0] * 4))
        with pytest.raises(SupportViolation):
            fit_family("negative_binomial", np.array([-1.0, 2.0, 3.0] * 4))
        with pytest.raises(SupportViolation):
            fit_family("binomial", np.array([0.0, 1.0, 2.0] * 4))
        with pytest.raises(SupportViolation):
            fit_family("discrete_uniform", np.array([7.2, 8.0, 9.0] * 4))

    def test_degenerate_and_too_small(self):
        const = np.full(20, 3.3)
        for tag in ("normal", "logistic", "cauchy"):
            with pytest.raises(DegenerateSample):
                fit_family(tag, const)
        # constant integers are a legal width-1 interval
        (a, b), ll = fit_family("discrete_uniform", np.full(20, 5.0))
        assert (a, b) == (5.0, 5.0) and ll == 0.0
        with pytest.raises(TooSmallSample):
            fit_family("normal", np.arange(5.0))


class TestModelSelection:
    def test_equal_aic_splits_evenly(self):
        np.testing.assert_allclose(model_probs([10.0, 10.0]), [0.5, 0.5], atol=1e-15)

    def test_delta_two_gives_exp_minus_one(self):
        p = model_probs([0.0, 2.0])
        assert p[1] / p[0] == pytest.approx(math.exp(-1.0), abs=1e-12)

    def test_shift_invariance(self):
        a = np.array([100.0, 103.5, 99.2])
        np.testing.assert_allclose(model_probs(a), model_probs(a + 777.7), atol=1e-12)

    def test_normal_data_selects_normal(self):
        wins = 0
        for seed in range(20):
            rng = np.random.default_rng(seed)
            x = rng.normal(size=5000)
            ranked = select_model(x, ["normal", "logistic", "cauchy"])
            wins += ranked[0].family.tag == "normal"
        assert wins >= 18

    def test_sorted_probs_and_aic_identity(self):
        rng = np.random.default_rng(21)
        x = rng.normal(5.0, 2.0, 3000)
        ranked = select_model(x, ["normal", "logistic", "cauchy"])
        aics = [fp.aic for fp in ranked]
        assert aics == sorted(aics)
        assert sum(fp.model_prob for fp in ranked) == pytest.approx(1.0, abs=1e-12)
        for fp in ranked:
            assert fp.aic == -2.0 * fp.loglik + 2.0 * fp.family.k

    def test_incompatible_candidates_skipped(self):
        rng = np.random.default_rng(22)
        x = rng.normal(size=500)  # continuous: no discrete family applies
        tags = {fp.family.tag for fp in select_model(x)}
        assert tags == {"normal", "logistic", "cauchy"}

    def test_bits_prefer_bernoulli(self):
        rng = np.random.default_rng(23)
        bits = (rng.uniform(size=2000) < 0.3).astype(float)
        ranked = select_model(bits)
        assert ranked[0].family.tag == "binomial"

    def test_majority_atom_blocks_cauchy(self):
        # 70% of the mass on one value makes the cauchy likelihood unbounded
        x = np.concatenate([np.zeros(70), np.linspace(1, 2, 30)])
        with pytest.raises(DegenerateSample):
            fit_family("cauchy", x)

    def test_uniform_ints_prefer_discrete_uniform(self):
        rng = np.random.default_rng(24)
        x = np.floor(rng.uniform(7, 43, 4000))
        ranked = select_model(x)
        assert ranked[0].family.tag == "discrete_uniform"

    def test_overdispersed_counts_prefer_negative_binomial(self):
        rng = np.random.default_rng(25)
        x = rng.poisson(rng.gamma(2.322, (1 - 0.009) / 0.009, 3000)).astype(float)
        ranked = select_model(x)
        assert ranked[0].family.tag == "negative_binomial"

    def test_no_valid_candidate(self):
        with pytest.raises(NoValidCandidate):
            select_model(np.array([np.nan] * 10))
        with pytest.raises(NoValidCandidate):
            select_model(np.full(20, 1.5), ["normal", "logistic"])  # constant


class TestMcmc:
    def test_acceptance_band_all_families(self):
        rng = np.random.default_rng(1)
        data = {
            "normal": rng.normal(5, 2, 1000),
            "logistic": _logistic_draws(rng, 1763.0, 214.22, 1000),
            "cauchy": 578.56 + 30.15 * np.tan(math.pi * (rng.uniform(size=1000) - 0.5)),
            "negative_binomial": rng.poisson(rng.gamma(2.322, (1 - 0.009) / 0.009, 1000)).astype(float),
            "binomial": (rng.uniform(size=1000) < 0.75).astype(float),
            "discrete_uniform": np.floor(rng.uniform(7, 43, 1000)),
        }
        cfg = McmcConfig(n_iter=4000, burn_in=1000, seed=3)
        for tag, x in data.items():
            cs = mcmc_posterior(tag, x, cfg)
            assert 0.1 <= cs.acceptance_rate <= 0.6, (tag, cs.acceptance_rate)

    def test_conjugate_normal_mean(self):
        rng = np.random.default_rng(2)
        x = rng.normal(3.0, 1.5, 5000)
        cs = mcmc_posterior("normal", x, McmcConfig(n_iter=20000, burn_in=5000, seed=0))
        # flat prior: posterior for mu is N(xbar, sigma^2/n)
        assert abs(cs.mean[0] - x.mean()) <= 3.0 * cs.sd[0]
        assert cs.sd[0] == pytest.approx(x.std() / math.sqrt(len(x)), rel=0.3)
        assert cs.n_kept == 15000

    def test_deterministic_in_seed(self):
        rng = np.random.default_rng(3)
        x = rng.normal(size=500)
        a = mcmc_posterior("normal", x, McmcConfig(n_iter=2000, burn_in=500, seed=9))
        b = mcmc_posterior("normal", x, McmcConfig(n_iter=2000, burn_in=500, seed=9))
        np.testing.assert_array_equal(a.draws, b.draws)
        c = mcmc_posterior("normal", x, McmcConfig(n_iter=2000, burn_in=500, seed=10))
        assert not np.array_equal(a.draws, c.draws)

    def test_tiny_scale_accepts_everything(self):
        rng = np.random.default_rng(4)
        x = rng.normal(size=500)
        cs = mcmc_posterior(
            "normal", x, McmcConfig(n_iter=2000, burn_in=500, scales=(1e-9, 1e-9), seed=2)
        )
        assert cs.acceptance_rate == 1.0
        assert cs.mean[0] == pytest.approx(float(x.mean()), abs=1e-5)

    def test_chain_diverged(self):
        rng = np.random.default_rng(5)
        x = rng.normal(size=500)
        with pytest.raises(ChainDiverged):
            mcmc_posterior(
                "normal", x, McmcConfig(n_iter=2000, burn_in=500, scales=(1e8, 1e8), seed=4)
            )

    def test_integer_walk_stays_on_lattice(self):
        rng = np.random.default_rng(6)
        x = np.floor(rng.uniform(7, 43, 1000))
        cs = mcmc_posterior("discrete_uniform", x, McmcConfig(n_iter=3000, burn_in=1000, seed=1))
        assert np.all(cs.draws == np.floor(cs.draws))
        assert np.all(cs.draws[:, 0] <= 7.0)
        assert np.all(cs.draws[:, 1] >= 42.0)

    def test_config_validation(self):
        with pytest.raises(InvalidConfig):
            McmcConfig(n_iter=100, burn_in=100)
        with pytest.raises(InvalidConfig):
            McmcConfig(scales=(0.0, 1.0))
        rng = np.random.default_rng(7)
        with pytest.raises(InvalidConfig):
            mcmc_posterior(
                "normal",
                rng.normal(size=100),
                McmcConfig(n_iter=100, burn_in=10, scales=(1.0,)),
            )

    def test_summary_serialization(self):
        cs = ChainSummary(("mu", "sigma"), (1.0, 2.0), (0.1, 0.2), 0.34, 1500)
        back = ChainSummary.from_dict(json.loads(json.dumps(cs.to_dict())))
        assert back == cs


class TestSamplePrior:
    def _fp(self, tag, theta):
        fam = get_family(tag)
        return FittedPrior(family=fam, theta_hat=theta, loglik=0.0, aic=0.0)

    def test_discrete_uniform_support(self):
        fp = self._fp("discrete_uniform", (7.0, 42.0))
        x = sample_prior(fp, 5000, seed=0)
        assert np.all(x == np.floor(x))
        assert x.min() == 7.0 and x.max() == 42.0

    def test_bernoulli_boundaries(self):
        assert np.all(sample_prior(self._fp("binomial", (0.0,)), 100, seed=0) == 0.0)
        assert np.all(sample_prior(self._fp("binomial", (1.0,)), 100, seed=0) == 1.0)

    def test_logistic_clt(self):
        mu, s = 1763.0, 214.22
        x = sample_prior(self._fp("logistic", (mu, s)), 1_000_000, seed=1)
        se = s * math.pi / math.sqrt(3.0) / 1000.0
        assert abs(x.mean() - mu) <= 3.0 * se

    def test_negative_binomial_mean(self):
        r, p = 2.322, 0.009
        x = sample_prior(self._fp("negative_binomial", (r, p)), 200_000, seed=2)
        mean = r * (1 - p) / p
        se = math.sqrt(r * (1 - p)) / p / math.sqrt(200_000)
        assert abs(x.mean() - mean) <= 3.0 * se
        assert np.all(x == np.floor(x)) and np.all(x >= 0)

    def test_deterministic_and_generator_passthrough(self):
        fp = self._fp("normal", (0.0, 1.0))
        np.testing.assert_array_equal(sample_prior(fp, 50, seed=3), sample_prior(fp, 50, seed=3))
        g1 = np.random.default_rng(4)
        g2 = np.random.default_rng(4)
        np.testing.assert_array_equal(sample_prior(fp, 50, g1), sample_prior(fp, 50, g2))

    def test_prefers_chain_mean(self):
        fp = self._fp("binomial", (0.2,))
        fp.chain = ChainSummary(("p",), (1.0,), (0.0,), 0.5, 10)
        assert np.all(sample_prior(fp, 64, seed=5) == 1.0)

    def test_fitted_prior_round_trip(self):
        fp = self._fp("logistic", (1.2, 3.4))
        fp.model_prob = 0.25
        fp.chain = ChainSummary(("mu", "s"), (1.21, 3.39), (0.02, 0.03), 0.4, 100)
        back = FittedPrior.from_dict(json.loads(json.dumps(fp.to_dict())))
        assert back.family.tag == "logistic"
        assert back.theta_hat == fp.theta_hat
        assert back.chain == ChainSummary.from_dict(fp.chain.to_dict())
        with pytest.raises(InvalidConfig):
            sample_prior(fp, 0, seed=0)
