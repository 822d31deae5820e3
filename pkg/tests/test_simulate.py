import math

import numpy as np
import pytest
from scipy.stats import binom

from tnma.simulate import Scenario, Shape, default_scenarios, generate


def null_scenario(target, **overrides):
    base = dict(
        shape=Shape.CONSTANT,
        target=target,
        coef={"level": 0.0},
        sigma2=0.0,
        m_mu=0.0,
        sigma2_mu=0.0,
        nontarget_variance=0.0,
        seed=4,
    )
    base.update(overrides)
    return Scenario(**base)


class TestScenario:
    def test_missing_coefficients_rejected(self):
        with pytest.raises(ValueError, match="missing"):
            Scenario(shape=Shape.SIGMOID, target=0, coef={"a": 0.0})

    def test_nonfinite_coefficients_rejected(self):
        with pytest.raises(ValueError, match="finite"):
            Scenario(shape=Shape.CONSTANT, target=0, coef={"level": math.inf})

    def test_tiny_arm_size_rejected(self):
        with pytest.raises(ValueError, match="arm_size"):
            Scenario(
                shape=Shape.CONSTANT, target=0, coef={"level": 0.0}, arm_size=5
            )

    def test_curve_shapes(self):
        quad = Scenario(
            shape=Shape.QUADRATIC, target=0, coef={"a": 0.1, "b": 2.0, "t0": 0.5}
        )
        assert abs(quad.curve(0.5) - 0.1) < 1e-15
        assert abs(quad.curve(1.0) - (0.1 + 2.0 * 0.25)) < 1e-15
        sig = Scenario(
            shape=Shape.SIGMOID,
            target=0,
            coef={"a": -0.4, "h": 1.2, "r": 12.0, "t_mid": 0.5},
        )
        assert abs(sig.curve(0.5) - 0.2) < 1e-15


class TestDefaultScenarios:
    def test_three_distinct_shapes(self):
        scenarios = default_scenarios(target=0)
        assert len(scenarios) == 3
        assert {s.shape for s in scenarios} == set(Shape)

    def test_documented_midpoint_values(self):
        scenarios = {s.shape: s for s in default_scenarios(target=0)}
        # sigmoid default at its midpoint: a + h/2 = 0.2
        assert abs(scenarios[Shape.SIGMOID].curve(0.5) - 0.2) < 1e-15
        # quadratic default at its vertex: a = 0
        assert abs(scenarios[Shape.QUADRATIC].curve(0.5) - 0.0) < 1e-15

    def test_distinct_seeds(self):
        seeds = [s.seed for s in default_scenarios(target=0, seed=7)]
        assert len(set(seeds)) == 3


class TestGenerate:
    def test_deterministic(self, skeleton_dataset):
        scenario = default_scenarios(target=0, seed=9)[2]
        a, truth_a = generate(skeleton_dataset, scenario)
        b, truth_b = generate(skeleton_dataset, scenario)
        assert a == b
        np.testing.assert_array_equal(truth_a.mu, truth_b.mu)
        np.testing.assert_array_equal(truth_a.delta, truth_b.delta)

    def test_skeleton_structure_preserved(self, skeleton_dataset):
        scenario = default_scenarios(target=0, seed=10)[0]
        data, _ = generate(skeleton_dataset, scenario)
        assert data.I == skeleton_dataset.I
        assert data.K == skeleton_dataset.K
        assert [s.key for s in data.studies] == [s.key for s in skeleton_dataset.studies]
        np.testing.assert_allclose(data.times, skeleton_dataset.times)
        assert [s.baseline for s in data.studies] == [
            s.baseline for s in skeleton_dataset.studies
        ]
        # outcome counts replaced, sizes kept
        for g, s in zip(data.studies, skeleton_dataset.studies):
            assert [a.size for a in g.arms] == [a.size for a in s.arms]

    def test_null_effect_gives_half_probability(self, skeleton_dataset):
        scenario = null_scenario(target=0)
        data, truth = generate(skeleton_dataset, scenario)
        np.testing.assert_array_equal(truth.mu, 0.0)
        np.testing.assert_array_equal(truth.delta, 0.0)
        np.testing.assert_array_equal(truth.dcons, 0.0)
        # success probability is exactly one half on every arm
        total = sum(a.size for s in data.studies for a in s.arms)
        events = sum(a.successes for s in data.studies for a in s.arms)
        assert abs(events / total - 0.5) < 0.02

    def test_sigmoid_with_zero_height_reduces_to_constant(self, skeleton_dataset):
        level = 0.3
        sig = Scenario(
            shape=Shape.SIGMOID,
            target=0,
            coef={"a": level, "h": 0.0, "r": 12.0, "t_mid": 0.5},
            seed=11,
        )
        const = Scenario(
            shape=Shape.CONSTANT, target=0, coef={"level": level}, seed=11
        )
        data_sig, _ = generate(skeleton_dataset, sig)
        data_const, _ = generate(skeleton_dataset, const)
        assert data_sig == data_const

    def test_ground_truth_consistency(self, skeleton_dataset):
        scenario = default_scenarios(target=0, seed=12)[2]
        data, truth = generate(skeleton_dataset, scenario)
        recomputed = []
        for s in data.studies:
            for a in s.nonbaseline_arms:
                recomputed.append(
                    float(truth.true_contrast(a.treatment, s.baseline, s.timepoint))
                )
        np.testing.assert_array_equal(np.array(recomputed), truth.dcons)

    def test_empirical_contrasts_converge_with_sample_size(self, skeleton_dataset):
        def mad(arm_size, seed):
            scenario = null_scenario(
                target=0,
                coef={"level": 0.5},
                nontarget_variance=0.09,
                arm_size=arm_size,
                seed=seed,
            )
            data, truth = generate(skeleton_dataset, scenario)
            devs = []
            i = 0
            for s in data.studies:
                base = s.baseline_arm
                lb = math.log((base.successes + 0.5) / (base.size - base.successes + 0.5))
                for a in s.nonbaseline_arms:
                    la = math.log((a.successes + 0.5) / (a.size - a.successes + 0.5))
                    devs.append(abs((la - lb) - truth.dcons[i]))
                    i += 1
            return float(np.mean(devs))

        big = np.mean([mad(10_000, s) for s in range(3)])
        small = np.mean([mad(100, s) for s in range(3)])
        assert big < small / 3  # error shrinks like 1/sqrt(n)

    def test_binomial_draws_calibrated(self, skeleton_dataset):
        # predictive-interval coverage over repeated generation
        scenario_base = default_scenarios(target=0, seed=100)[0]
        from scipy.special import expit

        hits = 0
        total = 0
        for rep in range(200):
            scenario = Scenario(
                shape=scenario_base.shape,
                target=scenario_base.target,
                coef=scenario_base.coef,
                sigma2=scenario_base.sigma2,
                m_mu=scenario_base.m_mu,
                sigma2_mu=scenario_base.sigma2_mu,
                seed=1000 + rep,
            )
            data, truth = generate(skeleton_dataset, scenario)
            i = 0
            for s in data.studies:
                for a in s.arms:
                    if a.treatment == s.baseline:
                        p = expit(truth.mu[s.id])
                    else:
                        p = expit(truth.mu[s.id] + truth.delta[i])
                        i += 1
                    lo, hi = binom.interval(0.95, a.size, p)
                    hits += lo <= a.successes <= hi
                    total += 1
        coverage = hits / total
        assert 0.92 <= coverage <= 0.98

    def test_unknown_target_rejected(self, skeleton_dataset):
        with pytest.raises(ValueError, match="target"):
            generate(skeleton_dataset, null_scenario(target=skeleton_dataset.K))
