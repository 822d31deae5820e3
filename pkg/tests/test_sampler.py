import math

import numpy as np
import pytest

from tnma.model import (
    ModelKind,
    ModelSpec,
    delta_logprior,
    log_likelihood,
    log_posterior,
)
from tnma.sampler import (
    BlockSampler,
    DegenerateChainError,
    SamplerConfig,
    ScalarRandomWalkBlock,
    _build_blocks,
    _build_monitors,
    _Workspace,
    ess,
    initial_state,
    run,
    split_rhat,
)

FAST = SamplerConfig(n_chains=2, n_iter=1200, burn_in=600, thin=3, seed=11)


def tbnma_setup(small_dataset):
    baseline = small_dataset.index_of("LIN")
    data = small_dataset.with_baseline(baseline)
    spec = ModelSpec(
        kind=ModelKind.TBNMA,
        baseline=baseline,
        time_varying=frozenset({data.index_of("VAN")}),
    )
    return data, spec


class TestSamplerConfig:
    def test_invariants(self):
        with pytest.raises(ValueError):
            SamplerConfig(burn_in=100, n_iter=100)
        with pytest.raises(ValueError):
            SamplerConfig(thin=0)
        with pytest.raises(ValueError):
            SamplerConfig(n_chains=0)

    def test_retained_count(self):
        cfg = SamplerConfig(n_chains=3, n_iter=2000, burn_in=1000, thin=10)
        assert cfg.n_kept == 100


class TestInitialState:
    def test_finite_log_posterior(self, small_dataset):
        data, spec = tbnma_setup(small_dataset)
        state = initial_state(data, spec, np.random.default_rng(0))
        state.validate(data, spec)
        assert math.isfinite(log_posterior(data, state, spec))

    def test_baseline_pinned(self, small_dataset):
        data, spec = tbnma_setup(small_dataset)
        state = initial_state(data, spec, np.random.default_rng(1))
        assert state.d_basic[spec.baseline] == 0.0

    def test_chains_overdispersed(self, small_dataset):
        data, spec = tbnma_setup(small_dataset)
        s0 = initial_state(data, spec, np.random.default_rng(0))
        s1 = initial_state(data, spec, np.random.default_rng(1))
        assert not np.allclose(s0.mu, s1.mu)


class TestToyCalibration:
    """Known-variance normal mean routed through the block machinery."""

    def test_posterior_mean_and_sd(self):
        rng = np.random.default_rng(99)
        y = rng.normal(1.5, 2.0, size=40)
        prior_var, like_var = 100.0, 4.0
        post_var = 1.0 / (1.0 / prior_var + len(y) / like_var)
        post_mean = post_var * y.sum() / like_var

        state = {"theta": 0.0}

        def logpost():
            t = state["theta"]
            return -0.5 * t * t / prior_var - 0.5 * np.sum((y - t) ** 2) / like_var

        block = ScalarRandomWalkBlock(
            "theta",
            logpost,
            lambda: state["theta"],
            lambda v: state.__setitem__("theta", v),
        )
        cfg = SamplerConfig(n_chains=1, n_iter=6000, burn_in=1000, thin=1, seed=3)
        draws, acc, _ = BlockSampler([block], cfg).run_chain(
            np.random.default_rng(3), {"theta": lambda: state["theta"]}
        )
        sample = draws["theta"]
        n_eff = ess(np.stack([sample[: len(sample) // 2], sample[len(sample) // 2 :]]))
        mc_se = math.sqrt(post_var / n_eff)
        assert abs(sample.mean() - post_mean) < 3 * mc_se
        assert abs(sample.std() - math.sqrt(post_var)) < 0.15 * math.sqrt(post_var)
        assert 0.2 < acc["theta"] < 0.7


class TestTwoParameterToy:
    """Detailed-balance smoke test on a 2-parameter analytic posterior."""

    def test_marginal_cdfs_match_analytic(self):
        from scipy.stats import kstest, norm

        rng = np.random.default_rng(77)
        x = np.linspace(-1, 1, 50)
        truth = 0.5 + 1.2 * x
        y = truth + rng.standard_normal(50)

        # flat-ish Gaussian priors, known unit noise: posterior is MVN
        prior_var = 100.0
        X = np.column_stack([np.ones_like(x), x])
        prec = X.T @ X + np.eye(2) / prior_var
        cov = np.linalg.inv(prec)
        mean = cov @ (X.T @ y)

        state = {"a": 0.0, "b": 0.0}

        def logpost():
            resid = y - state["a"] - state["b"] * x
            return (
                -0.5 * np.sum(resid**2)
                - 0.5 * (state["a"] ** 2 + state["b"] ** 2) / prior_var
            )

        blocks = [
            ScalarRandomWalkBlock(
                name,
                logpost,
                lambda key=name: state[key],
                lambda v, key=name: state.__setitem__(key, v),
            )
            for name in ("a", "b")
        ]
        cfg = SamplerConfig(n_chains=1, n_iter=22_000, burn_in=2_000, thin=4, seed=78)
        draws, _, _ = BlockSampler(blocks, cfg).run_chain(
            np.random.default_rng(78),
            {"a": lambda: state["a"], "b": lambda: state["b"]},
        )
        assert len(draws["a"]) == 5000
        for i, name in enumerate(("a", "b")):
            ks = kstest(draws[name], norm(mean[i], math.sqrt(cov[i, i])).cdf)
            assert ks.statistic < 0.05, f"{name}: KS {ks.statistic:.3f}"


class TestRunDeterminism:
    def test_same_seed_bit_identical(self, small_dataset):
        data, spec = tbnma_setup(small_dataset)
        a = run(data, spec, FAST)
        b = run(data, spec, FAST)
        for name in a.draws:
            np.testing.assert_array_equal(a.draws[name], b.draws[name])

    def test_worker_count_does_not_change_results(self, small_dataset, monkeypatch):
        data, spec = tbnma_setup(small_dataset)
        monkeypatch.setenv("TNMA_THREADS", "1")
        a = run(data, spec, FAST)
        monkeypatch.setenv("TNMA_THREADS", "2")
        b = run(data, spec, FAST)
        for name in a.draws:
            np.testing.assert_array_equal(a.draws[name], b.draws[name])

    def test_different_seeds_differ(self, small_dataset):
        data, spec = tbnma_setup(small_dataset)
        a = run(data, spec, FAST)
        b = run(data, spec, SamplerConfig(**{**FAST.__dict__, "seed": 12}))
        assert not np.array_equal(a.draws["d"], b.draws["d"])


class TestRunContracts:
    def test_shapes_and_acceptance(self, small_dataset):
        data, spec = tbnma_setup(small_dataset)
        samples = run(data, spec, FAST)
        assert samples.draws["mu"].shape == (2, FAST.n_kept, data.I)
        assert samples.draws["d"].shape == (2, FAST.n_kept, data.K)
        assert samples.draws["sigma2"].shape == (2, FAST.n_kept)
        for rates in samples.acceptance.values():
            assert np.all(rates >= 0.0) and np.all(rates <= 1.0)

    def test_progress_callback(self, small_dataset):
        data, spec = tbnma_setup(small_dataset)
        seen = []
        run(data, spec, FAST, progress=lambda c, it: seen.append((c, it)))
        assert (0, 1000) in seen and (1, 1000) in seen

    def test_scalar_name_resolution(self, small_dataset):
        data, spec = tbnma_setup(small_dataset)
        samples = run(data, spec, FAST)
        assert samples.scalar("d[VAN]").shape == (2, FAST.n_kept)
        assert samples.scalar("mu[3]").shape == (2, FAST.n_kept)
        assert samples.scalar("psi[VAN]").shape == (2, FAST.n_kept)
        assert samples.scalar("d_latent[VAN][2]").shape == (2, FAST.n_kept)
        with pytest.raises(KeyError):
            samples.scalar("nonsense")

    def test_state_roundtrip_evaluates(self, small_dataset):
        data, spec = tbnma_setup(small_dataset)
        samples = run(data, spec, FAST)
        state = samples.state_at(0, 5, data)
        state.validate(data, spec)
        assert math.isfinite(log_posterior(data, state, spec))


class TestWorkspaceConsistency:
    """The incremental caches must agree with the reference implementation."""

    @pytest.mark.parametrize("kind", [ModelKind.BNMA, ModelKind.META, ModelKind.TBNMA])
    def test_caches_match_reference_after_sampling(self, small_dataset, kind):
        baseline = small_dataset.index_of("LIN")
        data = small_dataset.with_baseline(baseline)
        tv = frozenset() if kind is ModelKind.BNMA else {data.index_of("VAN")}
        spec = ModelSpec(kind=kind, baseline=baseline, time_varying=frozenset(tv))
        rng = np.random.default_rng(21)
        ws = _Workspace(data, spec, initial_state(data, spec, rng))
        cfg = SamplerConfig(n_chains=1, n_iter=500, burn_in=250, thin=5, seed=2)
        BlockSampler(_build_blocks(ws, cfg), cfg).run_chain(rng, _build_monitors(ws))

        state = ws.to_state()
        assert abs(float(np.sum(ws.ll_study)) - log_likelihood(data, state)) < 1e-8

        dlp_ref = sum(delta_logprior(data, state, spec, s) for s in data.studies)
        assert abs(ws._dlp_total(ws._ss()) - dlp_ref) < 1e-8

        dcons_ref = ws._compute_dcons()
        np.testing.assert_allclose(ws.dcons, dcons_ref, atol=1e-12)
        assert math.isfinite(log_posterior(data, state, spec))


class TestAdaptationFreeze:
    def test_scales_constant_after_burn_in(self, small_dataset):
        data, spec = tbnma_setup(small_dataset)
        short = SamplerConfig(n_chains=1, n_iter=601, burn_in=600, thin=1, seed=5)
        long = SamplerConfig(n_chains=1, n_iter=1800, burn_in=600, thin=1, seed=5)
        s_short = run(data, spec, short)
        s_long = run(data, spec, long)
        for name in s_short.scales:
            np.testing.assert_array_equal(s_short.scales[name], s_long.scales[name])

    def test_adapted_scalar_rates_reasonable(self, small_dataset):
        data, spec = tbnma_setup(small_dataset)
        cfg = SamplerConfig(n_chains=2, n_iter=3000, burn_in=1500, thin=5, seed=6)
        samples = run(data, spec, cfg)
        for name in ("mu", "d", "sigma2"):
            rate = float(np.mean(samples.acceptance[name]))
            assert 0.2 <= rate <= 0.7, f"{name} acceptance {rate}"


class TestSplitRhat:
    def test_iid_chains_near_one(self):
        rng = np.random.default_rng(42)
        chains = rng.standard_normal((4, 1000))
        assert 0.99 <= split_rhat(chains) <= 1.02

    def test_constant_chains_flagged(self):
        with pytest.raises(DegenerateChainError):
            split_rhat(np.ones((4, 100)))

    def test_shifted_chain_detected(self):
        rng = np.random.default_rng(43)
        chains = rng.standard_normal((4, 1000))
        chains[0] += 5.0
        assert split_rhat(chains) > 1.5

    def test_within_chain_drift_detected(self):
        # split halves expose a trend even in a single run
        rng = np.random.default_rng(44)
        chains = rng.standard_normal((4, 1000)) + np.linspace(0, 4, 1000)
        assert split_rhat(chains) > 1.2

    def test_too_few_chains_rejected(self):
        with pytest.raises(ValueError):
            split_rhat(np.random.default_rng(0).standard_normal((1, 100)))


class TestEss:
    def test_iid_close_to_sample_size(self):
        rng = np.random.default_rng(45)
        chains = rng.standard_normal((4, 2500))
        total = 4 * 2500
        assert abs(ess(chains) - total) < 0.2 * total

    def test_ar1_matches_closed_form(self):
        rng = np.random.default_rng(46)
        phi = 0.9
        n = 20_000
        chains = np.empty((2, n))
        for c in range(2):
            x = rng.standard_normal() / math.sqrt(1 - phi**2)
            noise = rng.standard_normal(n)
            for i in range(n):
                x = phi * x + noise[i]
                chains[c, i] = x
        expected = 2 * n * (1 - phi) / (1 + phi)
        assert abs(ess(chains) - expected) < 0.5 * expected

    def test_constant_chains_flagged(self):
        with pytest.raises(DegenerateChainError):
            ess(np.zeros((4, 100)))


class TestDiagnosticsCollection:
    def test_monitored_scalars_and_report(self, small_dataset):
        data, spec = tbnma_setup(small_dataset)
        samples = run(data, spec, FAST)
        names = samples.monitored_scalars()
        assert "sigma2" in names
        assert "d[VAN]" in names
        assert "psi[VAN]" in names
        assert f"d[{data.label_of(spec.baseline)}]" not in names
        report = samples.diagnostics()
        assert set(report) == set(names)
        # the pinned-gauge entry never appears, so none should be degenerate
        for name, entry in report.items():
            if not entry["degenerate"]:
                assert entry["rhat"] > 0
                assert entry["ess"] > 0
