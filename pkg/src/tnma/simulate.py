"""Synthetic datasets with injected time-varying effects on one treatment.

A generated dataset reuses a skeleton's studies, arms, timepoints, and
per-study baselines; only the outcome counts are replaced.  The target
treatment's true effect follows one of three curve shapes (constant,
quadratic, sigmoidal) over normalized time; every other treatment gets a
true constant.  Only contrasts between these absolute effect levels enter
the data, so the recorded truth can be scored against any analysis baseline.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, replace
from typing import Mapping, Optional

import numpy as np
from scipy.special import expit

from .data import ArmRecord, Dataset, build_dataset

__all__ = ["GroundTruth", "Scenario", "Shape", "default_scenarios", "generate"]


class Shape(str, enum.Enum):
    CONSTANT = "constant"
    QUADRATIC = "quadratic"
    SIGMOID = "sigmoid"


_REQUIRED_COEF = {
    Shape.CONSTANT: ("level",),
    Shape.QUADRATIC: ("a", "b", "t0"),
    Shape.SIGMOID: ("a", "h", "r", "t_mid"),
}


@dataclass(frozen=True)
class Scenario:
    """One simulation setting: curve shape, coefficients, and noise levels."""

    shape: Shape
    target: int
    coef: Mapping[str, float]
    sigma2: float = 0.02
    m_mu: float = -0.3
    sigma2_mu: float = 0.09
    arm_size: Optional[int] = None  # None: reuse the skeleton's arm sizes
    nontarget_variance: float = 0.25
    seed: int = 0

    def __post_init__(self) -> None:
        object.__setattr__(self, "shape", Shape(self.shape))
        object.__setattr__(self, "coef", dict(self.coef))
        missing = [c for c in _REQUIRED_COEF[self.shape] if c not in self.coef]
        if missing:
            raise ValueError(f"{self.shape.value} scenario missing {missing}")
        if self.arm_size is not None and self.arm_size < 10:
            raise ValueError("arm_size must be >= 10")
        for value in self.coef.values():
            if not np.isfinite(value):
                raise ValueError("shape coefficients must be finite")

    def curve(self, t: np.ndarray | float) -> np.ndarray | float:
        """True effect of the target treatment at normalized time ``t``."""
        t = np.asarray(t, dtype=float)
        c = self.coef
        if self.shape is Shape.CONSTANT:
            return np.broadcast_to(c["level"], t.shape).copy() if t.shape else c["level"]
        if self.shape is Shape.QUADRATIC:
            return c["a"] + c["b"] * (t - c["t0"]) ** 2
        return c["a"] + c["h"] / (1.0 + np.exp(-c["r"] * (t - c["t_mid"])))


@dataclass(frozen=True)
class GroundTruth:
    """The effects and realized random draws behind a generated dataset."""

    scenario: Scenario
    constants: np.ndarray  # true constant effect per treatment (target unused)
    mu: np.ndarray
    delta: np.ndarray
    dcons: np.ndarray  # consistency means used to draw the contrasts

    def true_effect(self, k: int, t: np.ndarray | float) -> np.ndarray | float:
        if k == self.scenario.target:
            return self.scenario.curve(t)
        return np.broadcast_to(
            self.constants[k], np.asarray(t, dtype=float).shape
        ).astype(float)

    def true_contrast(self, k: int, baseline: int, t: np.ndarray | float):
        """True effect of ``k`` minus ``baseline`` at time ``t``."""
        return np.asarray(self.true_effect(k, t)) - np.asarray(
            self.true_effect(baseline, t)
        )


def _equicorrelated_chol(m: int) -> np.ndarray:
    """Cholesky factor of the unit contrast covariance (1 diag, 1/2 off)."""
    cov = 0.5 * (np.eye(m) + np.ones((m, m)))
    return np.linalg.cholesky(cov)


def generate(skeleton: Dataset, scenario: Scenario) -> tuple[Dataset, GroundTruth]:
    """Draw a synthetic dataset on the skeleton's network.

    Per study: a study effect from the true random-effect law, contrast
    means from the true effect curves at the study's time, contrasts from
    the equicorrelated law, and binomial outcomes through the logit link.
    Deterministic given the scenario seed.
    """
    if not 0 <= scenario.target < skeleton.K:
        raise ValueError(f"target treatment {scenario.target} not in skeleton")
    rng = np.random.default_rng(np.random.SeedSequence(scenario.seed))

    constants = np.sqrt(scenario.nontarget_variance) * rng.standard_normal(skeleton.K)
    constants[scenario.target] = 0.0  # target follows the curve instead

    def true_eff(k: int, t: float) -> float:
        if k == scenario.target:
            return float(scenario.curve(t))
        return float(constants[k])

    mu = scenario.m_mu + np.sqrt(scenario.sigma2_mu) * rng.standard_normal(skeleton.I)
    sd = np.sqrt(scenario.sigma2)

    records: list[ArmRecord] = []
    dcons_all: list[float] = []
    delta_all: list[float] = []
    for s in skeleton.studies:
        nonbase = s.nonbaseline_arms
        dcons = np.array(
            [
                true_eff(a.treatment, s.timepoint) - true_eff(s.baseline, s.timepoint)
                for a in nonbase
            ]
        )
        m = len(nonbase)
        if m == 1:
            delta = dcons + sd * rng.standard_normal(1)
        else:
            delta = dcons + sd * (_equicorrelated_chol(m) @ rng.standard_normal(m))
        dcons_all.extend(dcons)
        delta_all.extend(delta)

        pos = 0
        for a in s.arms:
            if a.treatment == s.baseline:
                p = expit(mu[s.id])
            else:
                p = expit(mu[s.id] + delta[pos])
                pos += 1
            n = scenario.arm_size if scenario.arm_size is not None else a.size
            y = int(rng.binomial(n, p))
            records.append(
                ArmRecord(
                    study=s.key,
                    date=s.date,
                    treatment=skeleton.label_of(a.treatment),
                    events=y,
                    total=n,
                )
            )

    generated = build_dataset(records)
    # Arm order matches the skeleton, so treatment indices coincide; carry
    # the skeleton's per-study baseline assignment over.
    generated = Dataset(
        studies=tuple(
            replace(g, baseline=s.baseline)
            for g, s in zip(generated.studies, skeleton.studies)
        ),
        treatments=generated.treatments,
        time_origin=generated.time_origin,
        time_scale=generated.time_scale,
    )
    truth = GroundTruth(
        scenario=scenario,
        constants=constants,
        mu=mu,
        delta=np.array(delta_all),
        dcons=np.array(dcons_all),
    )
    return generated, truth


def default_scenarios(target: int, seed: int = 2026) -> list[Scenario]:
    """The three standard scenarios with documented default coefficients.

    The swing sizes are engineering defaults chosen to be detectable at
    typical arm sizes while staying in a plausible logit range.
    """
    return [
        Scenario(
            shape=Shape.CONSTANT,
            target=target,
            coef={"level": 0.4},
            seed=seed,
        ),
        Scenario(
            shape=Shape.QUADRATIC,
            target=target,
            coef={"a": 0.0, "b": 1.6, "t0": 0.5},
            seed=seed + 1,
        ),
        Scenario(
            shape=Shape.SIGMOID,
            target=target,
            coef={"a": -0.4, "h": 1.2, "r": 12.0, "t_mid": 0.5},
            seed=seed + 2,
        ),
    ]
