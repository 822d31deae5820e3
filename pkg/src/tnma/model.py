"""Log-posterior assembly for the three network meta-analysis variants.

All variants share an arm-level binomial likelihood with a logit link,
random study effects, and per-study contrasts whose joint law over a
multi-arm trial is equicorrelated normal (variance ``sigma2``, covariance
``sigma2 / 2``), evaluated as a product of conditionals.  They differ in how
the basic parameters enter the consistency equation:

- ``bnma``   constant effects, ``d[k] - d[b]``;
- ``meta``   linear drift in time for the time-varying set;
- ``tbnma``  a latent per-study-time series under a GP prior for the
             time-varying set.

The effect of the global baseline treatment is pinned to zero and excluded
from the prior sum, which fixes the additive gauge of the basic parameters.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit, gammaln

from .data import Dataset, Study
from .kernels import KernelParams, build_covariance, mvn_logpdf

__all__ = [
    "ModelKind",
    "ModelSpec",
    "ParamState",
    "PriorConfig",
    "consistency_mean",
    "contrast_offsets",
    "delta_logprior",
    "log_likelihood",
    "log_posterior",
    "log_prior",
    "logit_prob",
    "mean_time",
]


class ModelKind(str, enum.Enum):
    BNMA = "bnma"
    META = "meta"
    TBNMA = "tbnma"


@dataclass(frozen=True)
class PriorConfig:
    """Hyperparameters of the vague priors.

    Variance-scale parameters (``sigma2``, ``sigma2_mu``, ``sigma2_d`` and the
    squared Matern amplitude) get inverse-gamma priors; the Matern inverse
    length-scale gets a gamma prior; remaining amplitudes get half-normals.
    """

    mean_variance: float = 10_000.0  # N(0, v) on m_mu and m_d
    amplitude_variance: float = 10_000.0  # half-normal on psi, s_b, s_l
    ig_shape: float = 1.0
    ig_scale: float = 1.0
    rho_shape: float = 1.0
    rho_rate: float = 1.0
    slope_variance: float = 100.0  # N(0, v) on meta-regression slopes


@dataclass(frozen=True)
class ModelSpec:
    """Which model to fit, its baseline gauge, and its time-varying set."""

    kind: ModelKind
    baseline: int
    time_varying: frozenset[int] = frozenset()
    priors: PriorConfig = PriorConfig()

    def __post_init__(self) -> None:
        object.__setattr__(self, "time_varying", frozenset(self.time_varying))
        object.__setattr__(self, "kind", ModelKind(self.kind))
        if self.baseline in self.time_varying:
            raise ValueError("the baseline treatment cannot be time-varying")
        if self.kind is ModelKind.BNMA and self.time_varying:
            raise ValueError("bnma has no time-varying treatments")

    def constant_set(self, n_treatments: int) -> frozenset[int]:
        return frozenset(range(n_treatments)) - self.time_varying


@dataclass
class ParamState:
    """One point in parameter space.

    ``delta`` is the concatenation of per-study contrast vectors, studies in
    id order and non-baseline arms in within-study order (see
    :func:`contrast_offsets` for the segmentation).  ``d_latent`` holds, for
    each time-varying treatment, its latent effect at each of that
    treatment's study times (occurrence order).
    """

    mu: np.ndarray
    delta: np.ndarray
    d_basic: np.ndarray
    sigma2: float
    m_mu: float
    sigma2_mu: float
    m_d: float
    sigma2_d: float
    d_latent: dict[int, np.ndarray] = field(default_factory=dict)
    beta: dict[int, float] = field(default_factory=dict)
    kernel: dict[int, KernelParams] = field(default_factory=dict)

    def copy(self) -> "ParamState":
        return ParamState(
            mu=self.mu.copy(),
            delta=self.delta.copy(),
            d_basic=self.d_basic.copy(),
            sigma2=self.sigma2,
            m_mu=self.m_mu,
            sigma2_mu=self.sigma2_mu,
            m_d=self.m_d,
            sigma2_d=self.sigma2_d,
            d_latent={k: v.copy() for k, v in self.d_latent.items()},
            beta=dict(self.beta),
            kernel=dict(self.kernel),
        )

    def validate(self, data: Dataset, spec: ModelSpec) -> None:
        """Check shapes, positivity, and the baseline gauge."""
        if self.mu.shape != (data.I,):
            raise ValueError(f"mu has shape {self.mu.shape}, expected ({data.I},)")
        n_contrasts = int(contrast_offsets(data)[-1])
        if self.delta.shape != (n_contrasts,):
            raise ValueError(
                f"delta has shape {self.delta.shape}, expected ({n_contrasts},)"
            )
        if self.d_basic.shape != (data.K,):
            raise ValueError(
                f"d_basic has shape {self.d_basic.shape}, expected ({data.K},)"
            )
        if self.d_basic[spec.baseline] != 0.0:
            raise ValueError("basic parameter at the baseline must be pinned to 0")
        if min(self.sigma2, self.sigma2_mu, self.sigma2_d) <= 0:
            raise ValueError("variance parameters must be positive")
        if spec.kind is ModelKind.TBNMA:
            for k in spec.time_varying:
                expected = len(data.studies_of(k))
                if self.d_latent.get(k) is None or self.d_latent[k].shape != (expected,):
                    raise ValueError(f"d_latent[{k}] must have length {expected}")
                if k not in self.kernel:
                    raise ValueError(f"kernel parameters missing for treatment {k}")
        if spec.kind is ModelKind.META:
            for k in spec.time_varying:
                if k not in self.beta:
                    raise ValueError(f"slope missing for treatment {k}")


def contrast_offsets(data: Dataset) -> np.ndarray:
    """Start offset of each study's contrast segment in the flat layout."""
    sizes = [len(s.arms) - 1 for s in data.studies]
    return np.concatenate([[0], np.cumsum(sizes)])


def mean_time(data: Dataset) -> float:
    """Mean normalized study time, the centering point of the meta trend."""
    return float(np.mean(data.times))


def logit_prob(mu_i: float, delta_ik: float, baseline_arm: bool = False) -> float:
    """Success probability of an arm; the contrast is dropped on baselines."""
    theta = mu_i if baseline_arm else mu_i + delta_ik
    return float(expit(theta))


def _binom_logpmf(y: float, n: float, theta: float) -> float:
    # theta is the logit of the success probability
    coeff = gammaln(n + 1) - gammaln(y + 1) - gammaln(n - y + 1)
    return float(coeff + y * theta - n * np.logaddexp(0.0, theta))


def log_likelihood(data: Dataset, state: ParamState) -> float:
    """Arm-level binomial log-likelihood, binomial coefficients included."""
    total = 0.0
    pos = 0
    for s in data.studies:
        for a in s.arms:
            if a.treatment == s.baseline:
                theta = state.mu[s.id]
            else:
                theta = state.mu[s.id] + state.delta[pos]
                pos += 1
            total += _binom_logpmf(a.successes, a.size, theta)
    return total


def _effect_in_study(
    data: Dataset, state: ParamState, spec: ModelSpec, k: int, study: Study
) -> float:
    if k in spec.time_varying:
        if spec.kind is ModelKind.TBNMA:
            return float(state.d_latent[k][data.latent_pos(k, study.id)])
        if spec.kind is ModelKind.META:
            drift = state.beta[k] * (study.timepoint - mean_time(data))
            return float(state.d_basic[k] + drift)
    return float(state.d_basic[k])


def consistency_mean(
    data: Dataset, state: ParamState, spec: ModelSpec, study: Study, k: int
) -> float:
    """Contrast mean of arm ``k`` versus the study baseline at the study time."""
    if k == study.baseline:
        return 0.0
    return _effect_in_study(data, state, spec, k, study) - _effect_in_study(
        data, state, spec, study.baseline, study
    )


def delta_logprior(
    data: Dataset, state: ParamState, spec: ModelSpec, study: Study
) -> float:
    """Log-density of the study's contrasts as a product of conditionals.

    For the j-th non-baseline arm (1-based), the conditional given the
    earlier arms is normal with mean ``dcons_j + mean(residuals so far)`` and
    variance ``(j + 1) / (2 j) * sigma2``, which reproduces the joint
    equicorrelated law exactly.
    """
    start = int(contrast_offsets(data)[study.id])
    resid_sum = 0.0
    total = 0.0
    for j, arm in enumerate(study.nonbaseline_arms, start=1):
        dcons = consistency_mean(data, state, spec, study, arm.treatment)
        mean = dcons + resid_sum / j if j > 1 else dcons
        var = (j + 1) / (2 * j) * state.sigma2
        x = float(state.delta[start + j - 1])
        total += _normal_logpdf(x, mean, var)
        resid_sum += x - dcons
    return total


def _normal_logpdf(x, mean, var):
    return -0.5 * (np.log(2.0 * np.pi * var) + (x - mean) ** 2 / var)


def _invgamma_logpdf(x: float, shape: float, scale: float) -> float:
    if x <= 0:
        return -math.inf
    return float(
        shape * math.log(scale)
        - gammaln(shape)
        - (shape + 1) * math.log(x)
        - scale / x
    )


def _gamma_logpdf(x: float, shape: float, rate: float) -> float:
    if x <= 0:
        return -math.inf
    return float(
        shape * math.log(rate) - gammaln(shape) + (shape - 1) * math.log(x) - rate * x
    )


def _halfnormal_logpdf(x: float, variance: float) -> float:
    if x < 0:
        return -math.inf
    return float(math.log(2.0) + _normal_logpdf(x, 0.0, variance))


def _kernel_logprior(params: KernelParams, priors: PriorConfig) -> float:
    """Hyperparameter prior; the IG on the squared Matern amplitude is
    re-expressed as a density on the amplitude itself."""
    if params.phi <= 0:
        return -math.inf
    total = 0.0
    for amp in (params.psi, params.s_b, params.s_l):
        total += _halfnormal_logpdf(amp, priors.amplitude_variance)
    total += _invgamma_logpdf(params.phi**2, priors.ig_shape, priors.ig_scale)
    total += math.log(2.0 * params.phi)
    total += _gamma_logpdf(params.rho, priors.rho_shape, priors.rho_rate)
    return total


def log_prior(state: ParamState, spec: ModelSpec, data: Dataset) -> float:
    """Joint log-prior; returns ``-inf`` for out-of-support parameters."""
    pri = spec.priors
    if min(state.sigma2, state.sigma2_mu, state.sigma2_d) <= 0:
        return -math.inf

    total = float(np.sum(_normal_logpdf(state.mu, state.m_mu, state.sigma2_mu)))
    for k in range(data.K):
        if k == spec.baseline:
            continue
        total += _normal_logpdf(state.d_basic[k], state.m_d, state.sigma2_d)
    total += _normal_logpdf(state.m_mu, 0.0, pri.mean_variance)
    total += _normal_logpdf(state.m_d, 0.0, pri.mean_variance)
    for v in (state.sigma2, state.sigma2_mu, state.sigma2_d):
        total += _invgamma_logpdf(v, pri.ig_shape, pri.ig_scale)

    if spec.kind is ModelKind.TBNMA:
        for k in sorted(spec.time_varying):
            params = state.kernel[k]
            hyper = _kernel_logprior(params, pri)
            if not math.isfinite(hyper):
                return -math.inf
            cov = build_covariance(params, data.times_of(k))
            mean = np.full(cov.n, state.d_basic[k])
            total += mvn_logpdf(state.d_latent[k], mean, cov) + hyper
    elif spec.kind is ModelKind.META:
        for k in sorted(spec.time_varying):
            total += _normal_logpdf(state.beta[k], 0.0, pri.slope_variance)
    return float(total)


def log_posterior(data: Dataset, state: ParamState, spec: ModelSpec) -> float:
    """Likelihood + contrast priors + parameter priors; propagates ``-inf``."""
    lp = log_prior(state, spec, data)
    if not math.isfinite(lp):
        return -math.inf
    for s in data.studies:
        lp += delta_logprior(data, state, spec, s)
    return lp + log_likelihood(data, state)
