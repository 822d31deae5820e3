"""Native MCMC engine: adaptive Metropolis-within-Gibbs over parameter blocks.

The driver (:class:`BlockSampler`) owns the iteration/burn-in/thinning
schedule and the diminishing-adaptation bookkeeping; model structure lives in
block objects.  Study effects and contrasts are updated in vectorized sweeps
(their full conditionals factor by study), basic parameters and variance
parameters as scalar random walks (positive parameters on log scale with the
Jacobian), latent effect series jointly per treatment with proposals
preconditioned by their prior Cholesky factor, and the four
normal/inverse-gamma hyperparameters by conjugate Gibbs draws.

Chains are independent: chain ``c`` draws from a generator seeded by
``SeedSequence(seed, spawn_key=(c,))``, so results depend only on
(data, spec, config) and never on scheduling.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.linalg.lapack import dpotrf, dtrtrs
from scipy.special import gammaln

from .data import Dataset
from .kernels import KernelParams, NumericalError
from .model import (
    ModelKind,
    ModelSpec,
    ParamState,
    _gamma_logpdf,
    _halfnormal_logpdf,
    _invgamma_logpdf,
    contrast_offsets,
    log_posterior,
    mean_time,
)

__all__ = [
    "Block",
    "BlockSampler",
    "DegenerateChainError",
    "PosteriorSamples",
    "SamplerConfig",
    "ScalarRandomWalkBlock",
    "ess",
    "initial_state",
    "run",
    "split_rhat",
    "thread_cap",
]

LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class SamplerConfig:
    """Chain-length, seeding, and adaptation settings."""

    n_chains: int = 4
    n_iter: int = 20_000
    burn_in: int = 10_000
    thin: int = 10
    seed: int = 0
    adapt_window: int = 50
    target_accept_scalar: float = 0.44
    target_accept_vector: float = 0.23

    def __post_init__(self) -> None:
        if self.n_chains < 1:
            raise ValueError("n_chains must be >= 1")
        if not 0 <= self.burn_in < self.n_iter:
            raise ValueError("burn_in must satisfy 0 <= burn_in < n_iter")
        if self.thin < 1:
            raise ValueError("thin must be >= 1")
        if self.adapt_window < 1:
            raise ValueError("adapt_window must be >= 1")

    @property
    def n_kept(self) -> int:
        return (self.n_iter - self.burn_in) // self.thin


class DegenerateChainError(RuntimeError):
    """A monitored quantity has zero within-chain variance."""


def thread_cap() -> int:
    """Worker-count cap from ``TNMA_THREADS``, else the CPU count."""
    env = os.environ.get("TNMA_THREADS")
    if env:
        return max(1, int(env))
    return os.cpu_count() or 1


def _tri_solve(L: np.ndarray, b: np.ndarray) -> np.ndarray:
    x, info = dtrtrs(L, b, lower=1)
    if info != 0:
        raise NumericalError(f"triangular solve failed (info={info})")
    return x


def _chol_lower(a: np.ndarray) -> np.ndarray:
    c, info = dpotrf(a, lower=1)
    if info != 0:
        raise np.linalg.LinAlgError(f"dpotrf failed (info={info})")
    return c


# ---------------------------------------------------------------------------
# Generic block machinery
# ---------------------------------------------------------------------------


class Block:
    """A parameter block with adaptive proposal scales.

    Subclasses implement :meth:`step` and report each sweep's acceptances
    through :meth:`_tally`.  Scales adapt toward ``target`` acceptance in
    windows during burn-in and are frozen afterwards; acceptance rates are
    reported over the post-freeze phase only.
    """

    def __init__(self, name: str, scale, target) -> None:
        self.name = name
        self.scales = np.atleast_1d(np.asarray(scale, dtype=float)).copy()
        self.target = np.broadcast_to(
            np.asarray(target, dtype=float), self.scales.shape
        ).copy()
        self._win_accepts = np.zeros_like(self.scales)
        self._win_proposals = 0
        self._rounds = 0
        self._frozen = False
        self._post_accepts = 0.0
        self._post_proposals = 0.0

    def step(self, rng: np.random.Generator) -> None:
        raise NotImplementedError

    def _tally(self, accepted) -> None:
        self._win_accepts += accepted
        self._win_proposals += 1
        if self._frozen:
            self._post_accepts += float(np.sum(accepted))
            self._post_proposals += self.scales.size

    def adapt(self) -> None:
        if self._frozen or self._win_proposals == 0:
            return
        self._rounds += 1
        rate = self._win_accepts / self._win_proposals
        step = min(0.5, 2.0 / math.sqrt(self._rounds))
        self.scales *= np.exp(step * (rate - self.target))
        self._win_accepts[:] = 0.0
        self._win_proposals = 0

    def freeze(self) -> None:
        self._frozen = True
        self._post_accepts = 0.0
        self._post_proposals = 0.0

    @property
    def acceptance_rate(self) -> float:
        if self._post_proposals == 0:
            return math.nan
        return self._post_accepts / self._post_proposals


class ScalarRandomWalkBlock(Block):
    """Generic scalar random-walk block over an arbitrary log-density.

    ``get``/``set`` read and write the scalar in some external state and
    ``logpost`` evaluates the target at the current state.  Used directly in
    calibration tests; the NMA blocks share the same adaptation and accept
    rule but evaluate their conditionals incrementally.
    """

    def __init__(
        self,
        name: str,
        logpost: Callable[[], float],
        get: Callable[[], float],
        set: Callable[[float], None],
        scale: float = 1.0,
        target: float = 0.44,
    ) -> None:
        super().__init__(name, scale, target)
        self._logpost = logpost
        self._get = get
        self._set = set

    def step(self, rng: np.random.Generator) -> None:
        old = self._get()
        lp_old = self._logpost()
        self._set(old + self.scales[0] * rng.standard_normal())
        lp_new = self._logpost()
        if math.log(rng.random()) < lp_new - lp_old:
            self._tally(1.0)
        else:
            self._set(old)
            self._tally(0.0)


class BlockSampler:
    """Runs one chain: sweeps blocks, adapts during burn-in, thins draws."""

    def __init__(self, blocks: Sequence[Block], config: SamplerConfig) -> None:
        self.blocks = list(blocks)
        self.config = config

    def run_chain(
        self,
        rng: np.random.Generator,
        monitors: dict[str, Callable[[], float | np.ndarray]],
        progress: Optional[Callable[[int], None]] = None,
    ) -> tuple[dict[str, np.ndarray], dict[str, float], dict[str, np.ndarray]]:
        cfg = self.config
        storage: dict[str, np.ndarray] = {}
        for name, getter in monitors.items():
            probe = np.asarray(getter(), dtype=float)
            storage[name] = np.empty((cfg.n_kept,) + probe.shape)

        kept = 0
        if cfg.burn_in == 0:
            for block in self.blocks:
                block.freeze()
        for it in range(cfg.n_iter):
            for block in self.blocks:
                block.step(rng)
            if it < cfg.burn_in and (it + 1) % cfg.adapt_window == 0:
                for block in self.blocks:
                    block.adapt()
            if it + 1 == cfg.burn_in:
                for block in self.blocks:
                    block.freeze()
            if it >= cfg.burn_in and (it - cfg.burn_in) % cfg.thin == cfg.thin - 1:
                if kept < cfg.n_kept:
                    for name, getter in monitors.items():
                        storage[name][kept] = getter()
                    kept += 1
            if progress is not None and (it + 1) % 1000 == 0:
                progress(it + 1)

        acceptance = {b.name: b.acceptance_rate for b in self.blocks}
        scales = {b.name: b.scales.copy() for b in self.blocks}
        return storage, acceptance, scales


# ---------------------------------------------------------------------------
# The NMA workspace: flat arrays and cached pieces of the log-posterior
# ---------------------------------------------------------------------------


class _Workspace:
    """Mutable sampling state over precomputed index arrays.

    Contrast arms are laid out flat (study order, within-study order), and
    per-(treatment, study) effect values live in one occurrence table so the
    consistency means are two gathers and a subtraction.  The contrast prior
    is tracked through the deviation vector of its conditional-product form;
    all blocks except the variance update only need that vector's weighted
    sum of squares because the normalizing terms cancel.
    """

    def __init__(self, data: Dataset, spec: ModelSpec, state: ParamState) -> None:
        self.data = data
        self.spec = spec
        self.kind = spec.kind
        self.tv = sorted(spec.time_varying)
        self.I = data.I
        self.K = data.K
        self.times = data.times
        self.tbar = mean_time(data)

        arm_y, arm_n, arm_study, arm_treat, arm_pos = [], [], [], [], []
        base_y, base_n, base_treat = [], [], []
        for s in data.studies:
            base = s.baseline_arm
            base_y.append(base.successes)
            base_n.append(base.size)
            base_treat.append(base.treatment)
            for j, a in enumerate(s.nonbaseline_arms, start=1):
                arm_y.append(a.successes)
                arm_n.append(a.size)
                arm_study.append(s.id)
                arm_treat.append(a.treatment)
                arm_pos.append(j)
        self.A = len(arm_y)
        self.arm_y = np.array(arm_y, dtype=float)
        self.arm_n = np.array(arm_n, dtype=float)
        self.arm_study = np.array(arm_study)
        self.arm_treat = np.array(arm_treat)
        pos = np.array(arm_pos, dtype=float)
        self.inv_pos = 1.0 / pos
        self.fac = (pos + 1.0) / (2.0 * pos)
        self.inv_fac = 1.0 / self.fac
        self.log_fac_sum = float(np.sum(np.log(self.fac)))
        self.dlp_const = -0.5 * (self.A * LOG_2PI + self.log_fac_sum)
        self.base_y = np.array(base_y, dtype=float)
        self.base_n = np.array(base_n, dtype=float)
        self.base_treat = np.array(base_treat)
        self.arm_logc = (
            gammaln(self.arm_n + 1)
            - gammaln(self.arm_y + 1)
            - gammaln(self.arm_n - self.arm_y + 1)
        )
        self.base_logc = (
            gammaln(self.base_n + 1)
            - gammaln(self.base_y + 1)
            - gammaln(self.base_n - self.base_y + 1)
        )
        self.offsets = contrast_offsets(data).astype(int)
        self._arange_a = np.arange(self.A)
        self._seg_start = self.offsets[self.arm_study]

        # occurrence table: one entry per (treatment, study) pair
        occ_offset = [0]
        occ_study: list[int] = []
        for k in range(self.K):
            occ_study.extend(data.studies_of(k))
            occ_offset.append(len(occ_study))
        self.occ_offset = np.array(occ_offset)
        self.occ_study = np.array(occ_study)
        self.occ_time = self.times[self.occ_study]
        pos_lookup = {}
        for k in range(self.K):
            for j, sid in enumerate(data.studies_of(k)):
                pos_lookup[(k, sid)] = self.occ_offset[k] + j
        self.arm_occ = np.array(
            [pos_lookup[(k, s)] for k, s in zip(self.arm_treat, self.arm_study)]
        )
        self.base_occ = np.array(
            [pos_lookup[(self.base_treat[s], s)] for s in self.arm_study]
        )

        self.nonbaseline = [k for k in range(self.K) if k != spec.baseline]

        # mutable parameters
        self.mu = state.mu.copy()
        self.delta = state.delta.copy()
        self.d = state.d_basic.copy()
        self.sigma2 = state.sigma2
        self.m_mu = state.m_mu
        self.s2_mu = state.sigma2_mu
        self.m_d = state.m_d
        self.s2_d = state.sigma2_d
        self.beta = dict(state.beta)
        self.lat = {k: v.copy() for k, v in state.d_latent.items()}
        self.kern = {k: state.kernel[k].as_array() for k in state.kernel}

        # per-treatment kernel geometry (time-varying treatments only)
        self.gp: dict[int, dict] = {}
        for k in self.tv:
            t = data.times_of(k)
            self.gp[k] = {
                "times": t,
                "lag": np.abs(t[:, None] - t[None, :]),
                "tt": np.outer(t, t),
                "eye": np.eye(len(t)),
            }
            if self.kind is ModelKind.TBNMA:
                self._gp_refresh(k)

        # caches
        self.eff = np.zeros(self.occ_offset[-1])
        for k in range(self.K):
            self._set_eff(k)
        self.dcons = self._compute_dcons()
        self.ll_base = self._binom(self.base_y, self.base_n, self.mu, self.base_logc)
        self.ll_arm = self._arm_loglik(self.delta)
        self.ll_study = np.bincount(self.arm_study, self.ll_arm, self.I) + self.ll_base

    # -- elementary pieces ---------------------------------------------------

    @staticmethod
    def _binom(y, n, theta, logc):
        return logc + y * theta - n * np.logaddexp(0.0, theta)

    def _arm_loglik(self, delta):
        theta = self.mu[self.arm_study] + delta
        return self._binom(self.arm_y, self.arm_n, theta, self.arm_logc)

    def _eff_values(self, k: int) -> np.ndarray:
        n_k = self.occ_offset[k + 1] - self.occ_offset[k]
        if k in self.spec.time_varying:
            if self.kind is ModelKind.TBNMA:
                return self.lat[k]
            if self.kind is ModelKind.META:
                t = self.occ_time[self.occ_offset[k] : self.occ_offset[k + 1]]
                return self.d[k] + self.beta[k] * (t - self.tbar)
        return np.full(n_k, self.d[k])

    def _set_eff(self, k: int) -> None:
        self.eff[self.occ_offset[k] : self.occ_offset[k + 1]] = self._eff_values(k)

    def _compute_dcons(self) -> np.ndarray:
        return self.eff[self.arm_occ] - self.eff[self.base_occ]

    def _dev(self, dcons, delta):
        """Deviation of each contrast from its conditional mean."""
        resid = delta - dcons
        c = np.concatenate(([0.0], np.cumsum(resid)))
        prefix = c[self._arange_a] - c[self._seg_start]
        return resid - prefix * self.inv_pos

    def _ss(self, dcons=None, delta=None) -> float:
        """Variance-weighted sum of squared deviations of the contrasts."""
        dcons = self.dcons if dcons is None else dcons
        delta = self.delta if delta is None else delta
        dev = self._dev(dcons, delta)
        return float(np.dot(dev * dev, self.inv_fac))

    def _dlp_total(self, ss: float, sigma2: Optional[float] = None) -> float:
        sigma2 = self.sigma2 if sigma2 is None else sigma2
        return self.dlp_const - 0.5 * self.A * math.log(sigma2) - 0.5 * ss / sigma2

    # -- GP caches ------------------------------------------------------------

    def _gp_cov(self, k: int, params: np.ndarray, matern: Optional[np.ndarray] = None):
        g = self.gp[k]
        psi, s_b, s_l, phi, rho = params
        m = np.exp(-rho * g["lag"]) if matern is None else matern
        cov = psi * psi * g["eye"] + (s_b * s_b + s_l * s_l * g["tt"]) + phi * phi * m
        return cov, m

    def _gp_set(self, k: int, L: np.ndarray, matern: np.ndarray) -> None:
        g = self.gp[k]
        g["matern"] = matern
        g["L"] = L
        g["hld"] = float(np.sum(np.log(np.diag(L))))
        g["u1"] = _tri_solve(L, np.ones(L.shape[0]))
        g["a"] = float(g["u1"] @ g["u1"])
        self._gp_refresh_latent(k)

    def _gp_refresh(self, k: int) -> None:
        cov, m = self._gp_cov(k, self.kern[k])
        L = _chol_with_ladder(cov)
        self._gp_set(k, L, m)

    def _gp_refresh_latent(self, k: int) -> None:
        g = self.gp[k]
        w = _tri_solve(g["L"], self.lat[k])
        g["w"] = w
        g["b"] = float(g["u1"] @ w)
        g["q0"] = float(w @ w)

    def _gp_quad(self, k: int, d: float) -> float:
        """Quadratic form (lat - d 1)' K^-1 (lat - d 1) from cached solves."""
        g = self.gp[k]
        return g["q0"] - 2.0 * d * g["b"] + d * d * g["a"]

    def _gp_logpdf(self, k: int) -> float:
        g = self.gp[k]
        n = len(self.lat[k])
        return -0.5 * n * LOG_2PI - g["hld"] - 0.5 * self._gp_quad(k, self.d[k])

    # -- export ----------------------------------------------------------------

    def to_state(self) -> ParamState:
        return ParamState(
            mu=self.mu.copy(),
            delta=self.delta.copy(),
            d_basic=self.d.copy(),
            sigma2=self.sigma2,
            m_mu=self.m_mu,
            sigma2_mu=self.s2_mu,
            m_d=self.m_d,
            sigma2_d=self.s2_d,
            d_latent={k: v.copy() for k, v in self.lat.items()},
            beta=dict(self.beta),
            kernel={k: KernelParams.from_array(v) for k, v in self.kern.items()},
        )


def _chol_with_ladder(cov: np.ndarray) -> np.ndarray:
    for jitter in (0.0, 1e-10, 1e-9, 1e-8, 1e-7, 1e-6):
        try:
            return _chol_lower(cov + jitter * np.eye(len(cov)) if jitter else cov)
        except np.linalg.LinAlgError:
            continue
    raise NumericalError("kernel covariance not factorizable at maximum jitter")


# ---------------------------------------------------------------------------
# NMA blocks
# ---------------------------------------------------------------------------


class _MuBlock(Block):
    def __init__(self, ws: _Workspace, cfg: SamplerConfig) -> None:
        super().__init__("mu", np.full(ws.I, 0.5), cfg.target_accept_scalar)
        self.ws = ws

    def step(self, rng: np.random.Generator) -> None:
        ws = self.ws
        prop = ws.mu + self.scales * rng.standard_normal(ws.I)
        ll_base_new = ws._binom(ws.base_y, ws.base_n, prop, ws.base_logc)
        theta_new = prop[ws.arm_study] + ws.delta
        ll_arm_new = ws._binom(ws.arm_y, ws.arm_n, theta_new, ws.arm_logc)
        ll_study_new = np.bincount(ws.arm_study, ll_arm_new, ws.I) + ll_base_new
        dprior = -0.5 * ((prop - ws.m_mu) ** 2 - (ws.mu - ws.m_mu) ** 2) / ws.s2_mu
        log_acc = ll_study_new - ws.ll_study + dprior
        accept = np.log(rng.random(ws.I)) < log_acc
        if np.any(accept):
            ws.mu = np.where(accept, prop, ws.mu)
            ws.ll_base = np.where(accept, ll_base_new, ws.ll_base)
            ws.ll_study = np.where(accept, ll_study_new, ws.ll_study)
            arm_acc = accept[ws.arm_study]
            ws.ll_arm = np.where(arm_acc, ll_arm_new, ws.ll_arm)
        self._tally(accept.astype(float))


class _DeltaBlock(Block):
    """Per-study contrast updates; multi-arm studies move as one vector."""

    def __init__(self, ws: _Workspace, cfg: SamplerConfig) -> None:
        m1 = np.diff(ws.offsets)
        target = np.where(m1 > 1, cfg.target_accept_vector, cfg.target_accept_scalar)
        super().__init__("delta", np.full(ws.I, 0.3), target)
        self.ws = ws

    def step(self, rng: np.random.Generator) -> None:
        ws = self.ws
        prop = ws.delta + self.scales[ws.arm_study] * rng.standard_normal(ws.A)
        ll_arm_new = ws._arm_loglik(prop)
        dev_old = ws._dev(ws.dcons, ws.delta)
        dev_new = ws._dev(ws.dcons, prop)
        gain = (
            ll_arm_new
            - ws.ll_arm
            - 0.5 * (dev_new * dev_new - dev_old * dev_old) * ws.inv_fac / ws.sigma2
        )
        log_acc = np.bincount(ws.arm_study, gain, ws.I)
        accept = np.log(rng.random(ws.I)) < log_acc
        if np.any(accept):
            arm_acc = accept[ws.arm_study]
            ws.delta = np.where(arm_acc, prop, ws.delta)
            ws.ll_arm = np.where(arm_acc, ll_arm_new, ws.ll_arm)
            ws.ll_study = np.bincount(ws.arm_study, ws.ll_arm, ws.I) + ws.ll_base
        self._tally(accept.astype(float))


class _BasicEffectBlock(Block):
    """Scalar random walks on the basic parameters of non-baseline treatments."""

    def __init__(self, ws: _Workspace, cfg: SamplerConfig) -> None:
        super().__init__(
            "d", np.full(len(ws.nonbaseline), 0.3), cfg.target_accept_scalar
        )
        self.ws = ws

    def step(self, rng: np.random.Generator) -> None:
        ws = self.ws
        accepted = np.zeros(len(ws.nonbaseline))
        ss_cur = ws._ss()
        inv_2sigma = 0.5 / ws.sigma2
        for idx, k in enumerate(ws.nonbaseline):
            prop = ws.d[k] + self.scales[idx] * rng.standard_normal()
            dprior = (
                -0.5 * ((prop - ws.m_d) ** 2 - (ws.d[k] - ws.m_d) ** 2) / ws.s2_d
            )
            if ws.kind is ModelKind.TBNMA and k in ws.spec.time_varying:
                # d_k enters only as the latent series' mean level
                dgp = -0.5 * (ws._gp_quad(k, prop) - ws._gp_quad(k, ws.d[k]))
                if math.log(rng.random()) < dgp + dprior:
                    ws.d[k] = prop
                    accepted[idx] = 1.0
            else:
                sl = slice(ws.occ_offset[k], ws.occ_offset[k + 1])
                old_vals = ws.eff[sl].copy()
                ws.eff[sl] = old_vals + (prop - ws.d[k])
                dcons_new = ws._compute_dcons()
                ss_new = ws._ss(dcons=dcons_new)
                if math.log(rng.random()) < -(ss_new - ss_cur) * inv_2sigma + dprior:
                    ws.d[k] = prop
                    ws.dcons = dcons_new
                    ss_cur = ss_new
                    accepted[idx] = 1.0
                else:
                    ws.eff[sl] = old_vals
        self._tally(accepted)


class _SlopeBlock(Block):
    """Meta-regression slopes for the time-varying treatments."""

    def __init__(self, ws: _Workspace, cfg: SamplerConfig) -> None:
        super().__init__("beta", np.full(len(ws.tv), 0.3), cfg.target_accept_scalar)
        self.ws = ws

    def step(self, rng: np.random.Generator) -> None:
        ws = self.ws
        v = ws.spec.priors.slope_variance
        accepted = np.zeros(len(ws.tv))
        ss_cur = ws._ss()
        inv_2sigma = 0.5 / ws.sigma2
        for idx, k in enumerate(ws.tv):
            prop = ws.beta[k] + self.scales[idx] * rng.standard_normal()
            sl = slice(ws.occ_offset[k], ws.occ_offset[k + 1])
            t = ws.occ_time[sl]
            old_vals = ws.eff[sl].copy()
            ws.eff[sl] = ws.d[k] + prop * (t - ws.tbar)
            dcons_new = ws._compute_dcons()
            ss_new = ws._ss(dcons=dcons_new)
            dprior = -0.5 * (prop * prop - ws.beta[k] ** 2) / v
            if math.log(rng.random()) < -(ss_new - ss_cur) * inv_2sigma + dprior:
                ws.beta[k] = prop
                ws.dcons = dcons_new
                ss_cur = ss_new
                accepted[idx] = 1.0
            else:
                ws.eff[sl] = old_vals
        self._tally(accepted)


class _LatentBlock(Block):
    """Joint update of one treatment's latent series, prior-preconditioned."""

    def __init__(self, ws: _Workspace, cfg: SamplerConfig, k: int) -> None:
        label = ws.data.label_of(k)
        super().__init__(f"d_latent[{label}]", 0.3, cfg.target_accept_vector)
        self.ws = ws
        self.k = k

    def step(self, rng: np.random.Generator) -> None:
        ws, k = self.ws, self.k
        g = ws.gp[k]
        nk = len(ws.lat[k])
        prop = ws.lat[k] + self.scales[0] * (g["L"] @ rng.standard_normal(nk))
        sl = slice(ws.occ_offset[k], ws.occ_offset[k + 1])
        old_vals = ws.eff[sl].copy()
        ws.eff[sl] = prop
        dcons_new = ws._compute_dcons()
        ss_new = ws._ss(dcons=dcons_new)
        ss_cur = ws._ss()
        w_new = _tri_solve(g["L"], prop)
        d_k = ws.d[k]
        quad_new = w_new @ w_new - 2.0 * d_k * (g["u1"] @ w_new) + d_k * d_k * g["a"]
        dgp = -0.5 * (quad_new - ws._gp_quad(k, d_k))
        if math.log(rng.random()) < -(ss_new - ss_cur) * 0.5 / ws.sigma2 + dgp:
            ws.lat[k] = prop
            ws.dcons = dcons_new
            g["w"] = w_new
            g["b"] = float(g["u1"] @ w_new)
            g["q0"] = float(w_new @ w_new)
            self._tally(1.0)
        else:
            ws.eff[sl] = old_vals
            self._tally(0.0)


class _LatentLevelBlock(Block):
    """Joint translation of a latent series and its mean level.

    Shifting ``d_k`` and every latent value by the same amount leaves the GP
    residual untouched, so the level gets direct data feedback instead of
    waiting for the series to drift.
    """

    def __init__(self, ws: _Workspace, cfg: SamplerConfig, k: int) -> None:
        label = ws.data.label_of(k)
        super().__init__(f"level[{label}]", 0.3, cfg.target_accept_scalar)
        self.ws = ws
        self.k = k

    def step(self, rng: np.random.Generator) -> None:
        ws, k = self.ws, self.k
        g = ws.gp[k]
        shift = self.scales[0] * rng.standard_normal()
        prop_d = ws.d[k] + shift
        prop_lat = ws.lat[k] + shift
        sl = slice(ws.occ_offset[k], ws.occ_offset[k + 1])
        old_vals = ws.eff[sl].copy()
        ws.eff[sl] = prop_lat
        dcons_new = ws._compute_dcons()
        ss_new = ws._ss(dcons=dcons_new)
        ss_cur = ws._ss()
        dprior = -0.5 * ((prop_d - ws.m_d) ** 2 - (ws.d[k] - ws.m_d) ** 2) / ws.s2_d
        if math.log(rng.random()) < -(ss_new - ss_cur) * 0.5 / ws.sigma2 + dprior:
            ws.d[k] = prop_d
            ws.lat[k] = prop_lat
            ws.dcons = dcons_new
            g["w"] = g["w"] + shift * g["u1"]
            g["b"] = float(g["u1"] @ g["w"])
            g["q0"] = float(g["w"] @ g["w"])
            self._tally(1.0)
        else:
            ws.eff[sl] = old_vals
            self._tally(0.0)


class _KernelBlock(Block):
    """Log-scale scalar walks on one treatment's kernel hyperparameters.

    ``centered=True`` holds the latent values fixed (the usual conditional
    update); ``centered=False`` holds the whitened residuals fixed instead,
    carrying the latent series along with the proposal.  Interweaving the two
    breaks the mutual pinning of small amplitudes and smooth series.
    """

    PARAMS = ("psi", "s_b", "s_l", "phi", "rho")

    def __init__(
        self, ws: _Workspace, cfg: SamplerConfig, k: int, centered: bool = True
    ) -> None:
        label = ws.data.label_of(k)
        name = f"kernel[{label}]" if centered else f"kernel_nc[{label}]"
        # five scalar walks plus a ridge move along the weakly identified
        # (phi, rho) direction: phi^2 * rho is what the data pin down
        super().__init__(name, np.full(6, 0.4), cfg.target_accept_scalar)
        self.ws = ws
        self.k = k
        self.centered = centered
        self._ones_lat = None

    def _proposal(
        self, idx: int, params: np.ndarray, rng: np.random.Generator
    ) -> tuple[np.ndarray, float, float, bool]:
        """New parameter vector, prior delta, log-space correction, and
        whether the Matern matrix must be rebuilt."""
        new = params.copy()
        z = self.scales[idx] * rng.standard_normal()
        if idx < 5:
            new[idx] = params[idx] * math.exp(z)
            dprior = self._prior_term(idx, new[idx]) - self._prior_term(
                idx, params[idx]
            )
            return new, dprior, z, idx >= 3
        new[3] = params[3] * math.exp(0.5 * z)
        new[4] = params[4] * math.exp(-z)
        dprior = (
            self._prior_term(3, new[3])
            - self._prior_term(3, params[3])
            + self._prior_term(4, new[4])
            - self._prior_term(4, params[4])
        )
        return new, dprior, -0.5 * z, True

    def _prior_term(self, idx: int, value: float) -> float:
        pri = self.ws.spec.priors
        if idx < 3:
            return _halfnormal_logpdf(value, pri.amplitude_variance)
        if idx == 3:
            if value <= 0:
                return -math.inf
            return _invgamma_logpdf(value**2, pri.ig_shape, pri.ig_scale) + math.log(
                2.0 * value
            )
        return _gamma_logpdf(value, pri.rho_shape, pri.rho_rate)

    def step(self, rng: np.random.Generator) -> None:
        if self.centered:
            self._step_centered(rng)
        else:
            self._step_noncentered(rng)

    def _step_centered(self, rng: np.random.Generator) -> None:
        ws, k = self.ws, self.k
        g = ws.gp[k]
        lat = ws.lat[k]
        d_k = ws.d[k]
        if self._ones_lat is None or self._ones_lat.shape[0] != len(lat):
            self._ones_lat = np.empty((len(lat), 2))
            self._ones_lat[:, 0] = 1.0
        self._ones_lat[:, 1] = lat
        accepted = np.zeros(6)
        for idx in range(6):
            params, dprior, logjac, rebuild = self._proposal(idx, ws.kern[k], rng)
            matern = None if rebuild else g["matern"]
            cov, m_new = ws._gp_cov(k, params, matern=matern)
            try:
                L_new = _chol_with_ladder(cov)
            except NumericalError:
                continue  # reject: pathological proposal
            hld_new = float(np.sum(np.log(np.diag(L_new))))
            sol = _tri_solve(L_new, self._ones_lat)
            u1_new, w_new = sol[:, 0], sol[:, 1]
            a_new = float(u1_new @ u1_new)
            b_new = float(u1_new @ w_new)
            q0_new = float(w_new @ w_new)
            quad_new = q0_new - 2.0 * d_k * b_new + d_k * d_k * a_new
            gp_new = -hld_new - 0.5 * quad_new
            gp_old = -g["hld"] - 0.5 * ws._gp_quad(k, d_k)
            log_acc = gp_new - gp_old + dprior + logjac
            if math.isfinite(log_acc) and math.log(rng.random()) < log_acc:
                ws.kern[k] = params
                g["matern"] = m_new
                g["L"] = L_new
                g["hld"] = hld_new
                g["u1"] = u1_new
                g["w"] = w_new
                g["a"] = a_new
                g["b"] = b_new
                g["q0"] = q0_new
                accepted[idx] = 1.0
        self._tally(accepted)

    def _step_noncentered(self, rng: np.random.Generator) -> None:
        ws, k = self.ws, self.k
        g = ws.gp[k]
        d_k = ws.d[k]
        sl = slice(ws.occ_offset[k], ws.occ_offset[k + 1])
        accepted = np.zeros(6)
        ss_cur = ws._ss()
        for idx in range(6):
            # whitened residuals are standard normal under every kernel,
            # so only the contrast terms and hyperpriors enter the ratio
            eta = g["w"] - d_k * g["u1"]
            params, dprior, logjac, rebuild = self._proposal(idx, ws.kern[k], rng)
            matern = None if rebuild else g["matern"]
            cov, m_new = ws._gp_cov(k, params, matern=matern)
            try:
                L_new = _chol_with_ladder(cov)
            except NumericalError:
                continue
            lat_new = d_k + L_new @ eta
            old_vals = ws.eff[sl].copy()
            ws.eff[sl] = lat_new
            dcons_new = ws._compute_dcons()
            ss_new = ws._ss(dcons=dcons_new)
            log_acc = -(ss_new - ss_cur) * 0.5 / ws.sigma2 + dprior + logjac
            if math.isfinite(log_acc) and math.log(rng.random()) < log_acc:
                ws.kern[k] = params
                ws.lat[k] = lat_new
                ws.dcons = dcons_new
                ss_cur = ss_new
                hld_new = float(np.sum(np.log(np.diag(L_new))))
                u1_new = _tri_solve(L_new, np.ones(len(lat_new)))
                w_new = eta + d_k * u1_new
                g["matern"] = m_new
                g["L"] = L_new
                g["hld"] = hld_new
                g["u1"] = u1_new
                g["w"] = w_new
                g["a"] = float(u1_new @ u1_new)
                g["b"] = float(u1_new @ w_new)
                g["q0"] = float(w_new @ w_new)
                accepted[idx] = 1.0
            else:
                ws.eff[sl] = old_vals
        self._tally(accepted)


class _VarianceBlock(Block):
    """Log-scale random walk on the contrast variance."""

    def __init__(self, ws: _Workspace, cfg: SamplerConfig) -> None:
        super().__init__("sigma2", 0.5, cfg.target_accept_scalar)
        self.ws = ws

    def step(self, rng: np.random.Generator) -> None:
        ws = self.ws
        pri = ws.spec.priors
        ss = ws._ss()
        cur = ws.sigma2
        prop = cur * math.exp(self.scales[0] * rng.standard_normal())
        log_acc = (
            ws._dlp_total(ss, prop)
            - ws._dlp_total(ss, cur)
            + _invgamma_logpdf(prop, pri.ig_shape, pri.ig_scale)
            - _invgamma_logpdf(cur, pri.ig_shape, pri.ig_scale)
            + math.log(prop)
            - math.log(cur)
        )
        if math.log(rng.random()) < log_acc:
            ws.sigma2 = prop
            self._tally(1.0)
        else:
            self._tally(0.0)


class _ConjugateBlock(Block):
    """Gibbs draws for the normal/inverse-gamma hyperparameters."""

    def __init__(self, ws: _Workspace, cfg: SamplerConfig) -> None:
        super().__init__("hyper", 1.0, 1.0)
        self.ws = ws

    def adapt(self) -> None:  # exact draws; nothing to tune
        self._win_accepts[:] = 0.0
        self._win_proposals = 0

    def step(self, rng: np.random.Generator) -> None:
        ws = self.ws
        pri = ws.spec.priors
        v0 = pri.mean_variance
        a0, b0 = pri.ig_shape, pri.ig_scale

        prec = 1.0 / v0 + ws.I / ws.s2_mu
        mean = (np.sum(ws.mu) / ws.s2_mu) / prec
        ws.m_mu = mean + math.sqrt(1.0 / prec) * rng.standard_normal()

        resid = ws.mu - ws.m_mu
        ws.s2_mu = (b0 + 0.5 * float(resid @ resid)) / rng.gamma(a0 + 0.5 * ws.I)

        d_free = ws.d[ws.nonbaseline]
        n_free = len(d_free)
        prec = 1.0 / v0 + n_free / ws.s2_d
        mean = (np.sum(d_free) / ws.s2_d) / prec
        ws.m_d = mean + math.sqrt(1.0 / prec) * rng.standard_normal()

        resid = d_free - ws.m_d
        ws.s2_d = (b0 + 0.5 * float(resid @ resid)) / rng.gamma(a0 + 0.5 * n_free)

        # the contrast variance is conjugate too: the conditional-product
        # deviations are N(0, fac * sigma2), so IG(a0 + A/2, b0 + ss/2)
        ws.sigma2 = (b0 + 0.5 * ws._ss()) / rng.gamma(a0 + 0.5 * ws.A)
        self._tally(1.0)


def _build_blocks(ws: _Workspace, cfg: SamplerConfig) -> list[Block]:
    blocks: list[Block] = [
        _MuBlock(ws, cfg),
        _DeltaBlock(ws, cfg),
        _BasicEffectBlock(ws, cfg),
    ]
    if ws.kind is ModelKind.META and ws.tv:
        blocks.append(_SlopeBlock(ws, cfg))
    if ws.kind is ModelKind.TBNMA:
        for k in ws.tv:
            blocks.append(_LatentBlock(ws, cfg, k))
            blocks.append(_LatentLevelBlock(ws, cfg, k))
            blocks.append(_KernelBlock(ws, cfg, k, centered=True))
            blocks.append(_KernelBlock(ws, cfg, k, centered=False))
    blocks.append(_VarianceBlock(ws, cfg))
    blocks.append(_ConjugateBlock(ws, cfg))
    return blocks


def _build_monitors(ws: _Workspace) -> dict[str, Callable[[], float | np.ndarray]]:
    monitors: dict[str, Callable[[], float | np.ndarray]] = {
        "mu": lambda: ws.mu,
        "delta": lambda: ws.delta,
        "d": lambda: ws.d,
        "sigma2": lambda: ws.sigma2,
        "m_mu": lambda: ws.m_mu,
        "sigma2_mu": lambda: ws.s2_mu,
        "m_d": lambda: ws.m_d,
        "sigma2_d": lambda: ws.s2_d,
    }
    for k in ws.tv:
        label = ws.data.label_of(k)
        if ws.kind is ModelKind.TBNMA:
            monitors[f"d_latent[{label}]"] = lambda k=k: ws.lat[k]
            monitors[f"kernel[{label}]"] = lambda k=k: ws.kern[k]
        elif ws.kind is ModelKind.META:
            monitors[f"beta[{label}]"] = lambda k=k: ws.beta[k]
    return monitors


# ---------------------------------------------------------------------------
# Initialization, chains, and the public entry point
# ---------------------------------------------------------------------------


def initial_state(
    data: Dataset, spec: ModelSpec, rng: np.random.Generator, max_tries: int = 100
) -> ParamState:
    """Starting point near the prior bulk with chain-specific dispersion.

    Study effects start at the empirical logits of the baseline arms, basic
    parameters near zero, variances near one, kernel amplitudes near 0.1 and
    the inverse length-scale near 1; each quantity gets a modest random
    offset so parallel chains are overdispersed.
    """
    base_logit = np.array(
        [
            math.log(
                (s.baseline_arm.successes + 0.5)
                / (s.baseline_arm.size - s.baseline_arm.successes + 0.5)
            )
            for s in data.studies
        ]
    )
    n_contrasts = int(contrast_offsets(data)[-1])
    for _ in range(max_tries):
        state = ParamState(
            mu=base_logit + 0.3 * rng.standard_normal(data.I),
            delta=0.2 * rng.standard_normal(n_contrasts),
            d_basic=0.2 * rng.standard_normal(data.K),
            sigma2=math.exp(0.3 * rng.standard_normal()),
            m_mu=float(np.mean(base_logit)) + 0.2 * rng.standard_normal(),
            sigma2_mu=math.exp(0.3 * rng.standard_normal()),
            m_d=0.2 * rng.standard_normal(),
            sigma2_d=math.exp(0.3 * rng.standard_normal()),
        )
        state.d_basic[spec.baseline] = 0.0
        if spec.kind is ModelKind.META:
            state.beta = {k: 0.2 * rng.standard_normal() for k in spec.time_varying}
        if spec.kind is ModelKind.TBNMA:
            for k in sorted(spec.time_varying):
                state.kernel[k] = KernelParams(
                    psi=0.1 * math.exp(0.3 * rng.standard_normal()),
                    s_b=0.1 * math.exp(0.3 * rng.standard_normal()),
                    s_l=0.1 * math.exp(0.3 * rng.standard_normal()),
                    phi=0.1 * math.exp(0.3 * rng.standard_normal()),
                    rho=math.exp(0.3 * rng.standard_normal()),
                )
                n_k = len(data.studies_of(k))
                state.d_latent[k] = state.d_basic[k] + 0.1 * rng.standard_normal(n_k)
        if math.isfinite(log_posterior(data, state, spec)):
            return state
    raise NumericalError(
        f"no finite log-posterior found in {max_tries} initialization attempts"
    )


@dataclass
class PosteriorSamples:
    """Retained draws across chains plus run metadata.

    ``draws`` maps monitor names to arrays of shape ``(n_chains, n_kept)``
    for scalars and ``(n_chains, n_kept, dim)`` for vectors.
    """

    draws: dict[str, np.ndarray]
    acceptance: dict[str, np.ndarray]
    config: SamplerConfig
    spec: ModelSpec
    labels: tuple[str, ...]
    scales: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def n_chains(self) -> int:
        return self.config.n_chains

    @property
    def n_kept(self) -> int:
        return self.config.n_kept

    @property
    def n_draws(self) -> int:
        return self.n_chains * self.n_kept

    def scalar(self, name: str) -> np.ndarray:
        """Chains of one monitored scalar as an (n_chains, n_kept) array.

        Vector components use ``base[index]`` (e.g. ``mu[3]``); basic
        parameters, latent values, slopes, and kernel parameters also
        resolve by treatment label (``d[VAN]``, ``psi[VAN]``,
        ``d_latent[VAN][2]``).
        """
        if name in self.draws and self.draws[name].ndim == 2:
            return self.draws[name]
        if name.endswith("]"):
            base, _, rest = name.partition("[")
            parts = [p.rstrip("]") for p in rest.split("[")]
            if base == "d" and not parts[0].isdigit():
                idx = self.labels.index(parts[0])
                return self.draws["d"][:, :, idx]
            if base in _KERNEL_FIELDS:
                arr = self.draws[f"kernel[{parts[0]}]"]
                return arr[:, :, _KERNEL_FIELDS.index(base)]
            if base == "d_latent":
                return self.draws[f"d_latent[{parts[0]}]"][:, :, int(parts[1])]
            if base == "beta" and not parts[0].isdigit():
                return self.draws[f"beta[{parts[0]}]"]
            return self.draws[base][:, :, int(parts[0])]
        raise KeyError(name)

    def flat(self, name: str) -> np.ndarray:
        """All chains of a monitored scalar concatenated."""
        return self.scalar(name).reshape(-1)

    def monitored_scalars(self) -> list[str]:
        """Names of the convergence-gated scalars: basic effects, the
        contrast variance, and the time-variation hyperparameters."""
        names = [
            f"d[{lab}]" for i, lab in enumerate(self.labels) if i != self.spec.baseline
        ]
        names.append("sigma2")
        for k in sorted(self.spec.time_varying):
            lab = self.labels[k]
            if self.spec.kind is ModelKind.TBNMA:
                names.extend(f"{p}[{lab}]" for p in _KERNEL_FIELDS)
            elif self.spec.kind is ModelKind.META:
                names.append(f"beta[{lab}]")
        return names

    def diagnostics(self, names: Optional[Sequence[str]] = None) -> dict[str, dict]:
        """Split R-hat and ESS per monitored scalar; degenerate chains are
        flagged rather than reported as numbers."""
        out: dict[str, dict] = {}
        for name in names if names is not None else self.monitored_scalars():
            chains = self.scalar(name)
            try:
                out[name] = {
                    "rhat": split_rhat(chains),
                    "ess": ess(chains),
                    "degenerate": False,
                }
            except DegenerateChainError:
                out[name] = {"rhat": None, "ess": None, "degenerate": True}
        return out

    def state_at(self, chain: int, draw: int, data: Dataset) -> ParamState:
        """Reconstruct one retained draw as a :class:`ParamState`."""
        d = self.draws
        state = ParamState(
            mu=d["mu"][chain, draw].copy(),
            delta=d["delta"][chain, draw].copy(),
            d_basic=d["d"][chain, draw].copy(),
            sigma2=float(d["sigma2"][chain, draw]),
            m_mu=float(d["m_mu"][chain, draw]),
            sigma2_mu=float(d["sigma2_mu"][chain, draw]),
            m_d=float(d["m_d"][chain, draw]),
            sigma2_d=float(d["sigma2_d"][chain, draw]),
        )
        for k in sorted(self.spec.time_varying):
            lab = self.labels[k]
            if self.spec.kind is ModelKind.TBNMA:
                state.d_latent[k] = d[f"d_latent[{lab}]"][chain, draw].copy()
                state.kernel[k] = KernelParams.from_array(
                    d[f"kernel[{lab}]"][chain, draw]
                )
            elif self.spec.kind is ModelKind.META:
                state.beta[k] = float(d[f"beta[{lab}]"][chain, draw])
        return state


_KERNEL_FIELDS = ("psi", "s_b", "s_l", "phi", "rho")


def _run_nma_chain(args) -> tuple[dict, dict, dict]:
    data, spec, config, chain_index, progress = args
    rng = np.random.default_rng(
        np.random.SeedSequence(config.seed, spawn_key=(chain_index,))
    )
    state0 = initial_state(data, spec, rng)
    ws = _Workspace(data, spec, state0)
    sampler = BlockSampler(_build_blocks(ws, config), config)
    return sampler.run_chain(rng, _build_monitors(ws), progress=progress)


def run(
    data: Dataset,
    spec: ModelSpec,
    config: SamplerConfig = SamplerConfig(),
    progress: Optional[Callable[[int, int], None]] = None,
) -> PosteriorSamples:
    """Run all chains and gather retained draws.

    Chains execute in parallel processes when more than one worker is
    allowed (``TNMA_THREADS`` caps the pool); a ``progress`` callback forces
    sequential execution and is invoked as ``progress(chain, iteration)``
    every 1000 iterations.
    """
    for k in spec.time_varying:
        if not 0 <= k < data.K:
            raise ValueError(f"time-varying treatment index {k} out of range")
    if not 0 <= spec.baseline < data.K:
        raise ValueError(f"baseline index {spec.baseline} out of range")

    workers = max(1, min(config.n_chains, thread_cap()))
    if workers == 1 or progress is not None:
        results = []
        for c in range(config.n_chains):
            cb = None if progress is None else (lambda it, c=c: progress(c, it))
            results.append(_run_nma_chain((data, spec, config, c, cb)))
    else:
        args = [(data, spec, config, c, None) for c in range(config.n_chains)]
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_run_nma_chain, args))

    draws = {name: np.stack([r[0][name] for r in results]) for name in results[0][0]}
    acceptance = {
        name: np.array([r[1][name] for r in results]) for name in results[0][1]
    }
    scales = {name: results[0][2][name] for name in results[0][2]}
    return PosteriorSamples(
        draws=draws,
        acceptance=acceptance,
        config=config,
        spec=spec,
        labels=tuple(t.label for t in data.treatments),
        scales=scales,
    )


# ---------------------------------------------------------------------------
# Convergence diagnostics
# ---------------------------------------------------------------------------


def _as_chains(samples, summary=None) -> np.ndarray:
    if isinstance(samples, PosteriorSamples):
        if callable(summary):
            return np.asarray(summary(samples))
        return samples.scalar(summary)
    return np.asarray(samples, dtype=float)


def _split(chains: np.ndarray) -> np.ndarray:
    half = chains.shape[1] // 2
    return np.concatenate([chains[:, :half], chains[:, half : 2 * half]], axis=0)


def split_rhat(samples, summary=None) -> float:
    """Split-chain potential scale reduction factor.

    Accepts an ``(n_chains, n_draws)`` array, or a :class:`PosteriorSamples`
    with a scalar name / extractor.  Raises :class:`DegenerateChainError`
    when the within-chain variance vanishes.
    """
    chains = _as_chains(samples, summary)
    if chains.ndim != 2 or chains.shape[0] < 2 or chains.shape[1] < 4:
        raise ValueError("need >= 2 chains with >= 4 draws each")
    split = _split(chains)
    n = split.shape[1]
    within = float(np.mean(np.var(split, axis=1, ddof=1)))
    if within == 0.0:
        raise DegenerateChainError("zero within-chain variance")
    between = n * float(np.var(np.mean(split, axis=1), ddof=1))
    var_hat = (n - 1) / n * within + between / n
    return math.sqrt(var_hat / within)


def ess(samples, summary=None) -> float:
    """Effective sample size with initial-positive-sequence truncation."""
    chains = _as_chains(samples, summary)
    if chains.ndim != 2 or chains.shape[0] < 2 or chains.shape[1] < 4:
        raise ValueError("need >= 2 chains with >= 4 draws each")
    split = _split(chains)
    m, n = split.shape
    within = float(np.mean(np.var(split, axis=1, ddof=1)))
    if within == 0.0:
        raise DegenerateChainError("zero within-chain variance")
    between = n * float(np.var(np.mean(split, axis=1), ddof=1))
    var_hat = (n - 1) / n * within + between / n

    centered = split - split.mean(axis=1, keepdims=True)
    acov = np.empty((m, n))
    for i in range(m):
        full = np.correlate(centered[i], centered[i], mode="full")
        acov[i] = full[n - 1 :] / n
    mean_acov = acov.mean(axis=0)

    rho = 1.0 - (within - mean_acov) / var_hat
    rho[0] = 1.0
    tau = 1.0
    t = 1
    while t + 1 < n:
        pair = rho[t] + rho[t + 1]
        if pair <= 0:
            break
        tau += 2.0 * pair
        t += 2
    return m * n / tau
