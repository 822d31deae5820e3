"""Posterior summarization: effect curves, end-of-period effects, probabilities.

Sign convention, fixed here and nowhere else: a basic parameter is the
logit-scale effect of a treatment minus the baseline, so positive values mean
the treatment is *more* effective (success = cure).  "Inferiority" therefore
refers to the event that the effect is negative.

For the GP model, predictions at query times are full posterior predictive
draws: each retained draw conditions its own latent series and kernel
hyperparameters and then samples the conditional law over the whole grid.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .data import Dataset
from .kernels import CovarianceMatrix, KernelParams, gp_condition
from .model import ModelKind, ModelSpec, mean_time
from .sampler import PosteriorSamples

__all__ = [
    "EffectCurve",
    "EndOfPeriodEffect",
    "compare_models",
    "default_grid",
    "effect_at_time",
    "effect_curve",
    "effect_draws",
    "end_of_period_effect",
    "inferiority_probability",
]

END_OF_PERIOD = 1.0  # normalized time of the last observed study


@dataclass(frozen=True)
class EffectCurve:
    """Pointwise posterior summary of one treatment's effect over time."""

    treatment: int
    label: str
    grid: np.ndarray  # normalized times
    years: np.ndarray  # the same grid in calendar units
    mean: np.ndarray
    q025: np.ndarray
    q50: np.ndarray
    q975: np.ndarray

    def __post_init__(self) -> None:
        if len(self.grid) == 0 or np.any(np.diff(self.grid) <= 0):
            raise ValueError("grid must be nonempty and strictly increasing")
        if np.any(self.q025 > self.q50) or np.any(self.q50 > self.q975):
            raise ValueError("quantiles out of order")

    @property
    def width(self) -> np.ndarray:
        return self.q975 - self.q025


@dataclass(frozen=True)
class EndOfPeriodEffect:
    """Posterior summary of one treatment's effect at the end of the period."""

    treatment: int
    label: str
    mean: float
    q025: float
    q975: float
    prob_below: float  # P(effect < 0): treatment less effective than baseline
    prob_above: float  # P(effect > 0)


def default_grid(n: int = 101) -> np.ndarray:
    """Equally spaced normalized query times over the observed range."""
    if n < 2:
        raise ValueError("grid needs at least 2 points")
    return np.linspace(0.0, 1.0, n)


def _predictive_rng(samples: PosteriorSamples, k: int) -> np.random.Generator:
    # Deterministic per (run seed, treatment): predictive draws never depend
    # on evaluation order.
    return np.random.default_rng(
        np.random.SeedSequence(samples.config.seed, spawn_key=(7781, k))
    )


def effect_draws(
    samples: PosteriorSamples,
    spec: ModelSpec,
    data: Dataset,
    k: int,
    grid: np.ndarray,
    rng: Optional[np.random.Generator] = None,
) -> np.ndarray:
    """Per-draw effect of treatment ``k`` at each grid time.

    Returns an array of shape ``(n_draws, len(grid))``.  Constant treatments
    tile their basic-parameter draws; the meta model adds its linear drift;
    the GP model conditions each draw's latent series on its own
    hyperparameters and samples the joint conditional over the grid.
    """
    grid = np.atleast_1d(np.asarray(grid, dtype=float))
    if np.any(grid < -1e-9) or np.any(grid > 1.0 + 1e-9):
        raise ValueError("query times must lie within the normalized range [0, 1]")
    if not 0 <= k < data.K:
        raise ValueError(f"unknown treatment index {k}")

    n_draws = samples.n_draws
    if k == spec.baseline:
        return np.zeros((n_draws, len(grid)))

    d = samples.draws["d"][:, :, k].reshape(-1)
    if k not in spec.time_varying or spec.kind is ModelKind.BNMA:
        return np.tile(d[:, None], (1, len(grid)))

    if spec.kind is ModelKind.META:
        beta = samples.flat(f"beta[{data.label_of(k)}]")
        return d[:, None] + beta[:, None] * (grid[None, :] - mean_time(data))

    # GP posterior predictive, one joint conditional draw per retained draw
    label = data.label_of(k)
    lat = samples.draws[f"d_latent[{label}]"].reshape(n_draws, -1)
    kern = samples.draws[f"kernel[{label}]"].reshape(n_draws, 5)
    train_times = data.times_of(k)
    rng = _predictive_rng(samples, k) if rng is None else rng

    out = np.empty((n_draws, len(grid)))
    for i in range(n_draws):
        params = KernelParams.from_array(kern[i])
        pred_mean, pred_cov = gp_condition(
            train_times, lat[i], float(d[i]), params, grid
        )
        cov = CovarianceMatrix(0.5 * (pred_cov + pred_cov.T))
        out[i] = pred_mean + cov.cholesky @ rng.standard_normal(len(grid))
    return out


def _summarize(draws_1d: np.ndarray) -> tuple[float, float, float, float]:
    q025, q50, q975 = np.quantile(draws_1d, [0.025, 0.5, 0.975])
    return float(np.mean(draws_1d)), float(q025), float(q50), float(q975)


def effect_at_time(
    samples: PosteriorSamples,
    spec: ModelSpec,
    data: Dataset,
    k: int,
    t: float,
    rng: Optional[np.random.Generator] = None,
) -> dict:
    """Distribution summary of the effect of ``k`` versus baseline at time ``t``."""
    draws = effect_draws(samples, spec, data, k, np.array([t]), rng=rng)[:, 0]
    mean, q025, q50, q975 = _summarize(draws)
    return {
        "treatment": k,
        "label": data.label_of(k),
        "time": float(t),
        "years": float(data.to_years(t)),
        "mean": mean,
        "q025": q025,
        "q50": q50,
        "q975": q975,
        "prob_below": float(np.mean(draws < 0)),
        "prob_above": float(np.mean(draws > 0)),
    }


def end_of_period_effect(
    samples: PosteriorSamples,
    spec: ModelSpec,
    data: Dataset,
    k: int,
    rng: Optional[np.random.Generator] = None,
) -> EndOfPeriodEffect:
    """Effect summary at the latest observed timepoint."""
    s = effect_at_time(samples, spec, data, k, END_OF_PERIOD, rng=rng)
    return EndOfPeriodEffect(
        treatment=k,
        label=s["label"],
        mean=s["mean"],
        q025=s["q025"],
        q975=s["q975"],
        prob_below=s["prob_below"],
        prob_above=s["prob_above"],
    )


def effect_curve(
    samples: PosteriorSamples,
    spec: ModelSpec,
    data: Dataset,
    k: int,
    grid: Optional[np.ndarray] = None,
    rng: Optional[np.random.Generator] = None,
) -> EffectCurve:
    """Pointwise mean and credible band over a grid of query times."""
    grid = default_grid() if grid is None else np.asarray(grid, dtype=float)
    draws = effect_draws(samples, spec, data, k, grid, rng=rng)
    q = np.quantile(draws, [0.025, 0.5, 0.975], axis=0)
    return EffectCurve(
        treatment=k,
        label=data.label_of(k),
        grid=grid,
        years=np.asarray(data.to_years(grid), dtype=float),
        mean=draws.mean(axis=0),
        q025=q[0],
        q50=q[1],
        q975=q[2],
    )


def inferiority_probability(
    samples: PosteriorSamples,
    spec: ModelSpec,
    data: Dataset,
    k: int,
    t: float,
    rng: Optional[np.random.Generator] = None,
) -> float:
    """Posterior probability that ``k`` is less effective than the baseline
    at time ``t`` (the fraction of draws with a negative effect)."""
    draws = effect_draws(samples, spec, data, k, np.array([t]), rng=rng)[:, 0]
    return float(np.mean(draws < 0))


def compare_models(
    runs: Sequence[tuple[PosteriorSamples, ModelSpec]] | Sequence[PosteriorSamples],
    data: Dataset,
) -> list[dict]:
    """End-of-period effect table across model runs on one dataset.

    Rows are sorted by (treatment index, model kind), so the table is
    invariant to the order in which runs are supplied.  All runs must share
    the baseline treatment.
    """
    normalized: list[PosteriorSamples] = [
        r[0] if isinstance(r, tuple) else r for r in runs
    ]
    baselines = {s.spec.baseline for s in normalized}
    if len(baselines) > 1:
        raise ValueError(f"runs have mismatched baselines: {sorted(baselines)}")

    rows = []
    for s in normalized:
        for k in range(data.K):
            if k == s.spec.baseline:
                continue
            eff = end_of_period_effect(s, s.spec, data, k)
            rows.append(
                {
                    "model": s.spec.kind.value,
                    "treatment": k,
                    "label": eff.label,
                    "mean": eff.mean,
                    "q025": eff.q025,
                    "q975": eff.q975,
                    "width": eff.q975 - eff.q025,
                }
            )
    rows.sort(key=lambda r: (r["treatment"], r["model"]))
    return rows
