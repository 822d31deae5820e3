"""Composite covariance kernels and Cholesky-backed Gaussian machinery.

The latent treatment-effect series uses a sum of three kernels over scalar
timepoints:

- white noise          ``psi^2 * I``
- linear               ``s_b^2 + s_l^2 * t_i * t_j``
- Matern, nu = 1/2     ``phi^2 * exp(-rho * |t_i - t_j|)``

The linear kernel is rank-deficient, so factorizations use an escalating
jitter ladder.  Conditioning at new times treats the white-noise component as
observation-level noise: it enters the training and query covariances but not
the cross-covariance.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.linalg import solve_triangular

__all__ = [
    "CovarianceMatrix",
    "KernelParams",
    "MATERN_NU",
    "NumericalError",
    "build_covariance",
    "gp_condition",
    "k_linear",
    "k_matern12",
    "k_white",
    "mvn_logpdf",
    "mvn_sample",
]

# The Matern smoothness is fixed; the kernel below is its closed form.
MATERN_NU = 0.5

JITTER_LADDER = (0.0, 1e-10, 1e-9, 1e-8, 1e-7, 1e-6)

LOG_2PI = float(np.log(2.0 * np.pi))


class NumericalError(RuntimeError):
    """Raised when a factorization fails even at the maximum jitter."""


@dataclass(frozen=True)
class KernelParams:
    """Hyperparameters of the summed kernel for one treatment.

    Parameters
    ----------
    psi : float
        White-noise amplitude, >= 0.
    s_b : float
        Linear-kernel bias amplitude, >= 0.
    s_l : float
        Linear-kernel slope amplitude, >= 0.
    phi : float
        Matern amplitude, >= 0.
    rho : float
        Matern inverse length-scale, > 0.
    """

    psi: float
    s_b: float
    s_l: float
    phi: float
    rho: float

    def __post_init__(self) -> None:
        for name in ("psi", "s_b", "s_l", "phi"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")
        if self.rho <= 0:
            raise ValueError("rho must be strictly positive")

    def as_array(self) -> np.ndarray:
        return np.array([self.psi, self.s_b, self.s_l, self.phi, self.rho])

    @staticmethod
    def from_array(v: np.ndarray) -> "KernelParams":
        return KernelParams(*(float(x) for x in v))


@dataclass(eq=False)
class CovarianceMatrix:
    """Dense symmetric covariance with a lazily cached Cholesky factor.

    Passing ``chol`` explicitly bypasses the jitter ladder (used where exact,
    jitter-free factors are required).
    """

    matrix: np.ndarray
    chol: Optional[np.ndarray] = None
    jitter: Optional[float] = field(default=None)

    def __post_init__(self) -> None:
        m = np.asarray(self.matrix, dtype=float)
        if m.ndim != 2 or m.shape[0] != m.shape[1]:
            raise ValueError(f"covariance must be square, got shape {m.shape}")
        scale = np.max(np.abs(m))
        tol = 1e-12 * scale if scale > 0 else 1e-12
        if np.max(np.abs(m - m.T)) > tol:
            raise ValueError("covariance matrix is not symmetric")
        self.matrix = m
        if self.chol is not None and self.jitter is None:
            self.jitter = 0.0

    @property
    def n(self) -> int:
        return self.matrix.shape[0]

    @property
    def cholesky(self) -> np.ndarray:
        """Lower-triangular factor of ``matrix + jitter * I``."""
        if self.chol is None:
            self.chol, self.jitter = _chol_with_jitter(self.matrix)
        return self.chol

    def solve(self, b: np.ndarray) -> np.ndarray:
        """Solve ``(matrix + jitter I) x = b`` via the cached factor."""
        L = self.cholesky
        y = solve_triangular(L, b, lower=True)
        return solve_triangular(L.T, y, lower=False)

    def half_logdet(self) -> float:
        return float(np.sum(np.log(np.diag(self.cholesky))))


def _chol_with_jitter(m: np.ndarray) -> tuple[np.ndarray, float]:
    n = m.shape[0]
    eye = np.eye(n)
    for jitter in JITTER_LADDER:
        try:
            L = np.linalg.cholesky(m + jitter * eye if jitter else m)
            return L, jitter
        except np.linalg.LinAlgError:
            continue
    raise NumericalError(
        f"Cholesky failed at maximum jitter {JITTER_LADDER[-1]:g} "
        f"(n={n}); hyperparameters are likely pathological"
    )


def k_white(params: KernelParams, n: int) -> CovarianceMatrix:
    """White-noise kernel ``psi^2 * I_n``."""
    if n < 1:
        raise ValueError("dimension must be >= 1")
    return CovarianceMatrix(params.psi**2 * np.eye(n))


def _linear_cross(params: KernelParams, t1: np.ndarray, t2: np.ndarray) -> np.ndarray:
    return params.s_b**2 + params.s_l**2 * np.outer(t1, t2)


def _matern_cross(params: KernelParams, t1: np.ndarray, t2: np.ndarray) -> np.ndarray:
    lags = np.abs(t1[:, None] - t2[None, :])
    return params.phi**2 * np.exp(-params.rho * lags)


def k_linear(params: KernelParams, times: np.ndarray) -> CovarianceMatrix:
    """Linear kernel ``s_b^2 + s_l^2 * t_i * t_j``."""
    t = _as_times(times)
    return CovarianceMatrix(_linear_cross(params, t, t))


def k_matern12(params: KernelParams, times: np.ndarray) -> CovarianceMatrix:
    """Exponential (Matern-1/2 / Ornstein-Uhlenbeck) kernel."""
    t = _as_times(times)
    return CovarianceMatrix(_matern_cross(params, t, t))


def build_covariance(params: KernelParams, times: np.ndarray) -> CovarianceMatrix:
    """Sum of the white, linear, and Matern kernels, factored eagerly."""
    t = _as_times(times)
    total = (
        k_white(params, len(t)).matrix
        + k_linear(params, t).matrix
        + k_matern12(params, t).matrix
    )
    cov = CovarianceMatrix(total)
    cov.cholesky  # noqa: B018 - force factorization so failures surface here
    return cov


def _as_times(times: np.ndarray) -> np.ndarray:
    t = np.atleast_1d(np.asarray(times, dtype=float))
    if t.ndim != 1 or t.size == 0:
        raise ValueError("times must be a nonempty 1-d vector")
    return t


def mvn_logpdf(x: np.ndarray, mean: np.ndarray, cov: CovarianceMatrix) -> float:
    """Log-density of N(mean, cov) at ``x`` via the cached Cholesky factor."""
    x = np.asarray(x, dtype=float)
    mean = np.asarray(mean, dtype=float)
    if x.shape != mean.shape or x.shape != (cov.n,):
        raise ValueError(
            f"dimension mismatch: x{x.shape}, mean{mean.shape}, cov n={cov.n}"
        )
    z = solve_triangular(cov.cholesky, x - mean, lower=True)
    return -0.5 * cov.n * LOG_2PI - cov.half_logdet() - 0.5 * float(z @ z)


def mvn_sample(
    mean: np.ndarray, cov: CovarianceMatrix, rng: np.random.Generator
) -> np.ndarray:
    """One draw ``mean + L z`` with ``z`` i.i.d. standard normal."""
    mean = np.asarray(mean, dtype=float)
    return mean + cov.cholesky @ rng.standard_normal(cov.n)


def gp_condition(
    train_times: np.ndarray,
    train_values: np.ndarray,
    mean_level: float,
    params: KernelParams,
    query_times: np.ndarray,
) -> tuple[np.ndarray, np.ndarray]:
    """Exact GP conditional at ``query_times`` given training observations.

    The prior mean is the constant ``mean_level``.  The white-noise component
    contributes to the training covariance and the query diagonal but not to
    the cross-covariance, so it acts as per-observation noise rather than a
    correlated signal.

    Returns
    -------
    (pred_mean, pred_cov)
        Conditional mean vector and dense conditional covariance.
    """
    t = _as_times(train_times)
    q = _as_times(query_times)
    y = np.asarray(train_values, dtype=float)
    if y.shape != t.shape:
        raise ValueError(f"train_values shape {y.shape} != times shape {t.shape}")

    k_train = build_covariance(params, t)
    cross = _linear_cross(params, t, q) + _matern_cross(params, t, q)
    k_query = (
        _linear_cross(params, q, q)
        + _matern_cross(params, q, q)
        + params.psi**2 * np.eye(len(q))
    )

    alpha = k_train.solve(y - mean_level)
    pred_mean = mean_level + cross.T @ alpha
    v = solve_triangular(k_train.cholesky, cross, lower=True)
    pred_cov = k_query - v.T @ v
    return pred_mean, pred_cov
