import math

import numpy as np
import pytest
from scipy.stats import binom, halfnorm, invgamma, multivariate_normal, norm
from scipy.stats import gamma as gamma_dist

from tnma.data import build_dataset
from tnma.kernels import KernelParams, build_covariance, mvn_logpdf
from tnma.model import (
    ModelKind,
    ModelSpec,
    ParamState,
    consistency_mean,
    contrast_offsets,
    delta_logprior,
    log_likelihood,
    log_posterior,
    log_prior,
    logit_prob,
    mean_time,
)

from conftest import make_records


def random_state(data, spec, rng, scale=0.5):
    """A random in-support parameter point for the given model."""
    n_contrasts = int(contrast_offsets(data)[-1])
    state = ParamState(
        mu=scale * rng.standard_normal(data.I),
        delta=scale * rng.standard_normal(n_contrasts),
        d_basic=scale * rng.standard_normal(data.K),
        sigma2=rng.uniform(0.05, 1.0),
        m_mu=scale * rng.standard_normal(),
        sigma2_mu=rng.uniform(0.2, 2.0),
        m_d=scale * rng.standard_normal(),
        sigma2_d=rng.uniform(0.2, 2.0),
    )
    state.d_basic[spec.baseline] = 0.0
    if spec.kind is ModelKind.META:
        state.beta = {k: scale * rng.standard_normal() for k in spec.time_varying}
    if spec.kind is ModelKind.TBNMA:
        for k in sorted(spec.time_varying):
            state.kernel[k] = KernelParams(
                psi=rng.uniform(0.05, 0.5),
                s_b=rng.uniform(0.0, 0.5),
                s_l=rng.uniform(0.0, 0.5),
                phi=rng.uniform(0.05, 0.5),
                rho=rng.uniform(0.5, 5.0),
            )
            n_k = len(data.studies_of(k))
            state.d_latent[k] = state.d_basic[k] + scale * rng.standard_normal(n_k)
    return state


@pytest.fixture
def bnma_spec(small_dataset):
    return ModelSpec(kind=ModelKind.BNMA, baseline=small_dataset.index_of("VAN"))


@pytest.fixture
def tbnma_spec(small_dataset):
    return ModelSpec(
        kind=ModelKind.TBNMA,
        baseline=small_dataset.index_of("LIN"),
        time_varying=frozenset({small_dataset.index_of("VAN")}),
    )


class TestModelSpec:
    def test_baseline_cannot_vary_in_time(self):
        with pytest.raises(ValueError):
            ModelSpec(kind=ModelKind.TBNMA, baseline=0, time_varying=frozenset({0}))

    def test_bnma_rejects_time_varying(self):
        with pytest.raises(ValueError):
            ModelSpec(kind=ModelKind.BNMA, baseline=0, time_varying=frozenset({1}))

    def test_constant_set_is_complement(self):
        spec = ModelSpec(kind=ModelKind.TBNMA, baseline=0, time_varying=frozenset({2}))
        assert spec.constant_set(4) == frozenset({0, 1, 3})


class TestLogitProb:
    def test_symmetry_at_zero(self):
        assert logit_prob(0.0, 0.0) == 0.5

    def test_contrast_shifts_odds(self):
        assert abs(logit_prob(0.0, math.log(3.0)) - 0.75) < 1e-12

    def test_baseline_arm_ignores_contrast(self):
        assert abs(logit_prob(math.log(3.0), 123.0, baseline_arm=True) - 0.75) < 1e-12


class TestLogLikelihood:
    def test_matches_scipy_binomial(self, small_dataset, bnma_spec):
        rng = np.random.default_rng(0)
        state = random_state(small_dataset, bnma_spec, rng)
        expected = 0.0
        pos = 0
        for s in small_dataset.studies:
            for a in s.arms:
                if a.treatment == s.baseline:
                    p = logit_prob(state.mu[s.id], 0.0, baseline_arm=True)
                else:
                    p = logit_prob(state.mu[s.id], state.delta[pos])
                    pos += 1
                expected += binom.logpmf(a.successes, a.size, p)
        assert abs(log_likelihood(small_dataset, state) - expected) < 1e-9

    def test_half_probability_value(self):
        # frozen from the exact pmf: log C(10,5) - 10 log 2
        data = build_dataset(make_records([("A", "B")], n=10, seed=5))
        s = data.studies[0]
        state = ParamState(
            mu=np.zeros(1),
            delta=np.zeros(1),
            d_basic=np.zeros(2),
            sigma2=1.0,
            m_mu=0.0,
            sigma2_mu=1.0,
            m_d=0.0,
            sigma2_d=1.0,
        )
        expected = sum(binom.logpmf(a.successes, a.size, 0.5) for a in s.arms)
        assert abs(log_likelihood(data, state) - expected) < 1e-10
        assert abs(binom.logpmf(5, 10, 0.5) - (-1.4020427180880297)) < 1e-12

    def test_saturated_limit_approaches_zero(self):
        from tnma.data import ArmRecord
        import datetime as dt

        records = [
            ArmRecord("S0", dt.date(2005, 1, 1), "A", 20, 20),
            ArmRecord("S0", dt.date(2005, 1, 1), "B", 20, 20),
        ]
        data = build_dataset(records)
        state = ParamState(
            mu=np.array([30.0]),  # p -> 1 on both arms, all successes
            delta=np.zeros(1),
            d_basic=np.zeros(2),
            sigma2=1.0,
            m_mu=0.0,
            sigma2_mu=1.0,
            m_d=0.0,
            sigma2_d=1.0,
        )
        value = log_likelihood(data, state)
        assert -1e-8 < value <= 0.0

    def test_additive_over_arms(self, small_dataset, bnma_spec):
        rng = np.random.default_rng(2)
        state = random_state(small_dataset, bnma_spec, rng)
        total = log_likelihood(small_dataset, state)
        per_arm = 0.0
        offsets = contrast_offsets(small_dataset)
        for s in small_dataset.studies:
            pos = offsets[s.id]
            for a in s.arms:
                if a.treatment == s.baseline:
                    p = logit_prob(state.mu[s.id], 0.0, baseline_arm=True)
                else:
                    p = logit_prob(state.mu[s.id], state.delta[pos])
                    pos += 1
                per_arm += binom.logpmf(a.successes, a.size, p)
        assert abs(total - per_arm) < 1e-9


class TestConsistencyMean:
    def test_baseline_arm_is_zero(self, small_dataset, bnma_spec):
        rng = np.random.default_rng(3)
        state = random_state(small_dataset, bnma_spec, rng)
        s = small_dataset.studies[0]
        assert consistency_mean(small_dataset, state, bnma_spec, s, s.baseline) == 0.0

    def test_bnma_is_difference_of_basics(self, small_dataset, bnma_spec):
        state = random_state(small_dataset, bnma_spec, np.random.default_rng(4))
        s = small_dataset.studies[0]
        k = next(a.treatment for a in s.arms if a.treatment != s.baseline)
        state.d_basic[k] = 0.4
        state.d_basic[s.baseline] = 0.1
        got = consistency_mean(small_dataset, state, bnma_spec, s, k)
        assert abs(got - 0.3) < 1e-15

    def test_tbnma_substitutes_latent_value(self, small_dataset, tbnma_spec):
        data = small_dataset.with_baseline(tbnma_spec.baseline)
        state = random_state(data, tbnma_spec, np.random.default_rng(5))
        van = data.index_of("VAN")
        hits = 0
        for s in data.studies:
            if van in s.treatments and s.baseline != van:
                pos = data.latent_pos(van, s.id)
                expected = state.d_latent[van][pos] - state.d_basic[s.baseline]
                got = consistency_mean(data, state, tbnma_spec, s, van)
                assert abs(got - expected) < 1e-15
                hits += 1
        assert hits > 0

    def test_meta_adds_centered_drift(self, small_dataset):
        van = small_dataset.index_of("VAN")
        spec = ModelSpec(
            kind=ModelKind.META,
            baseline=small_dataset.index_of("LIN"),
            time_varying=frozenset({van}),
        )
        state = random_state(small_dataset, spec, np.random.default_rng(6))
        tbar = mean_time(small_dataset)
        for s in small_dataset.studies:
            if van in s.treatments and s.baseline != van:
                expected = (
                    state.d_basic[van]
                    + state.beta[van] * (s.timepoint - tbar)
                    - state.d_basic[s.baseline]
                )
                got = consistency_mean(small_dataset, state, spec, s, van)
                assert abs(got - expected) < 1e-12
                break


class TestDeltaLogprior:
    def test_two_arm_study_is_single_normal(self, small_dataset, bnma_spec):
        rng = np.random.default_rng(7)
        state = random_state(small_dataset, bnma_spec, rng)
        offsets = contrast_offsets(small_dataset)
        for s in small_dataset.studies:
            if len(s.arms) == 2:
                k = s.nonbaseline_arms[0].treatment
                dcons = consistency_mean(small_dataset, state, bnma_spec, s, k)
                x = state.delta[offsets[s.id]]
                expected = norm.logpdf(x, dcons, math.sqrt(state.sigma2))
                got = delta_logprior(small_dataset, state, bnma_spec, s)
                assert abs(got - expected) < 1e-10
                return
        pytest.fail("no 2-arm study")

    def test_multi_arm_matches_joint_mvn(self, small_dataset, bnma_spec):
        # the joint law has sigma2 on the diagonal, sigma2/2 off it
        rng = np.random.default_rng(8)
        offsets = contrast_offsets(small_dataset)
        for trial in range(200):
            state = random_state(small_dataset, bnma_spec, rng)
            for s in small_dataset.studies:
                m1 = len(s.arms) - 1
                if m1 < 2:
                    continue
                mean = np.array(
                    [
                        consistency_mean(small_dataset, state, bnma_spec, s, a.treatment)
                        for a in s.nonbaseline_arms
                    ]
                )
                cov = state.sigma2 * 0.5 * (np.eye(m1) + np.ones((m1, m1)))
                x = state.delta[offsets[s.id] : offsets[s.id + 1]]
                expected = multivariate_normal(mean, cov).logpdf(x)
                got = delta_logprior(small_dataset, state, bnma_spec, s)
                assert abs(got - expected) < 1e-8

    def test_vanishing_quadratic_at_consistency_means(self, small_dataset, bnma_spec):
        rng = np.random.default_rng(9)
        state = random_state(small_dataset, bnma_spec, rng)
        offsets = contrast_offsets(small_dataset)
        s = small_dataset.studies[4]  # the 3-arm study
        m1 = len(s.arms) - 1
        assert m1 == 2
        means = np.array(
            [
                consistency_mean(small_dataset, state, bnma_spec, s, a.treatment)
                for a in s.nonbaseline_arms
            ]
        )
        state.delta[offsets[s.id] : offsets[s.id + 1]] = means
        got = delta_logprior(small_dataset, state, bnma_spec, s)
        # only normalizing constants remain
        expected = sum(
            -0.5 * math.log(2 * math.pi * (j + 1) / (2 * j) * state.sigma2)
            for j in range(1, m1 + 1)
        )
        assert abs(got - expected) < 1e-10


class TestLogPrior:
    def test_out_of_support_is_minus_inf(self, small_dataset, bnma_spec):
        state = random_state(small_dataset, bnma_spec, np.random.default_rng(10))
        state.sigma2 = -1.0
        assert log_prior(state, bnma_spec, small_dataset) == -math.inf

    def test_bnma_term_by_term_oracle(self, small_dataset, bnma_spec):
        rng = np.random.default_rng(11)
        state = random_state(small_dataset, bnma_spec, rng)
        pri = bnma_spec.priors
        expected = 0.0
        expected += norm.logpdf(
            state.mu, state.m_mu, math.sqrt(state.sigma2_mu)
        ).sum()
        for k in range(small_dataset.K):
            if k != bnma_spec.baseline:
                expected += norm.logpdf(
                    state.d_basic[k], state.m_d, math.sqrt(state.sigma2_d)
                )
        expected += norm.logpdf(state.m_mu, 0, math.sqrt(pri.mean_variance))
        expected += norm.logpdf(state.m_d, 0, math.sqrt(pri.mean_variance))
        for v in (state.sigma2, state.sigma2_mu, state.sigma2_d):
            expected += invgamma.logpdf(v, pri.ig_shape, scale=pri.ig_scale)
        assert abs(log_prior(state, bnma_spec, small_dataset) - expected) < 1e-9

    def test_tbnma_adds_gp_and_hyperprior_terms(self, small_dataset, tbnma_spec):
        rng = np.random.default_rng(12)
        state = random_state(small_dataset, tbnma_spec, rng)
        van = small_dataset.index_of("VAN")
        pri = tbnma_spec.priors

        bnma_like = ModelSpec(kind=ModelKind.BNMA, baseline=tbnma_spec.baseline)
        base_terms = log_prior(state, bnma_like, small_dataset)

        p = state.kernel[van]
        cov = build_covariance(p, small_dataset.times_of(van))
        gp = mvn_logpdf(
            state.d_latent[van],
            np.full(cov.n, state.d_basic[van]),
            cov,
        )
        hyper = sum(
            halfnorm.logpdf(x, scale=math.sqrt(pri.amplitude_variance))
            for x in (p.psi, p.s_b, p.s_l)
        )
        hyper += invgamma.logpdf(p.phi**2, pri.ig_shape, scale=pri.ig_scale)
        hyper += math.log(2 * p.phi)
        hyper += gamma_dist.logpdf(p.rho, pri.rho_shape, scale=1 / pri.rho_rate)

        got = log_prior(state, tbnma_spec, small_dataset)
        assert abs(got - (base_terms + gp + hyper)) < 1e-8

    def test_tbnma_with_empty_set_equals_bnma(self, small_dataset):
        spec_t = ModelSpec(kind=ModelKind.TBNMA, baseline=0)
        spec_b = ModelSpec(kind=ModelKind.BNMA, baseline=0)
        state = random_state(small_dataset, spec_b, np.random.default_rng(13))
        assert log_prior(state, spec_t, small_dataset) == log_prior(
            state, spec_b, small_dataset
        )


class TestLogPosterior:
    def test_support_violation_propagates(self, small_dataset, bnma_spec):
        state = random_state(small_dataset, bnma_spec, np.random.default_rng(14))
        state.sigma2_d = 0.0
        assert log_posterior(small_dataset, state, bnma_spec) == -math.inf

    def test_model_nesting(self, small_dataset):
        # tBNMA(T1 = {}) == Meta(T1 = {}) == BNMA on shared parameters
        state = random_state(
            small_dataset,
            ModelSpec(kind=ModelKind.BNMA, baseline=0),
            np.random.default_rng(15),
        )
        values = [
            log_posterior(small_dataset, state, ModelSpec(kind=kind, baseline=0))
            for kind in (ModelKind.BNMA, ModelKind.META, ModelKind.TBNMA)
        ]
        assert values[0] == values[1] == values[2]

    def test_component_sum_oracle(self, small_dataset, tbnma_spec):
        rng = np.random.default_rng(16)
        state = random_state(small_dataset, tbnma_spec, rng)
        expected = log_prior(state, tbnma_spec, small_dataset)
        expected += log_likelihood(small_dataset, state)
        for s in small_dataset.studies:
            expected += delta_logprior(small_dataset, state, tbnma_spec, s)
        got = log_posterior(small_dataset, state, tbnma_spec)
        assert abs(got - expected) < 1e-10


class TestBaselineGauge:
    def test_validate_rejects_perturbed_baseline(self, small_dataset, bnma_spec):
        state = random_state(small_dataset, bnma_spec, np.random.default_rng(17))
        state.validate(small_dataset, bnma_spec)
        state.d_basic[bnma_spec.baseline] = 0.01
        with pytest.raises(ValueError, match="pinned"):
            state.validate(small_dataset, bnma_spec)

    def test_validate_checks_latent_shapes(self, small_dataset, tbnma_spec):
        state = random_state(small_dataset, tbnma_spec, np.random.default_rng(18))
        state.validate(small_dataset, tbnma_spec)
        van = small_dataset.index_of("VAN")
        state.d_latent[van] = state.d_latent[van][:-1]
        with pytest.raises(ValueError, match="d_latent"):
            state.validate(small_dataset, tbnma_spec)
