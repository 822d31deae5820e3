"""Bayesian network meta-analysis with time-varying treatment effects.

Three model variants over arm-level binomial trial data: constant effects
(``bnma``), a linear meta-regression in publication time (``meta``), and a
latent Gaussian-process time series on selected treatments (``tbnma``), all
fit by a native adaptive Metropolis-within-Gibbs sampler.
"""

from .data import (
    ArmRecord,
    Dataset,
    DatasetError,
    NetworkSummary,
    Study,
    StudyArm,
    Treatment,
    build_dataset,
    impute_date,
    network_summary,
    select_baseline,
)
from .kernels import (
    CovarianceMatrix,
    KernelParams,
    NumericalError,
    build_covariance,
    gp_condition,
    k_linear,
    k_matern12,
    k_white,
    mvn_logpdf,
    mvn_sample,
)
from .model import (
    ModelKind,
    ModelSpec,
    ParamState,
    PriorConfig,
    consistency_mean,
    delta_logprior,
    log_likelihood,
    log_posterior,
    log_prior,
    logit_prob,
)
from .posterior import (
    EffectCurve,
    EndOfPeriodEffect,
    compare_models,
    effect_at_time,
    effect_curve,
    end_of_period_effect,
    inferiority_probability,
)
from .sampler import (
    DegenerateChainError,
    PosteriorSamples,
    SamplerConfig,
    ess,
    run,
    split_rhat,
)
from .simulate import GroundTruth, Scenario, Shape, default_scenarios, generate

__version__ = "0.1.0"
