"""Model types, the Gaussian kernel and the marginalized BKMR likelihood.

The exposure-response surface ``h`` has a zero-mean Gaussian-process prior
with covariance ``tau * K``.  Integrating ``h`` out gives

    y ~ Normal(X @ beta, sigma2 * (I + lam * K)),     lam = tau / sigma2,

which is the only density the sampler ever evaluates.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import scipy.linalg

from .errors import InvalidInputError, NumericalError

logger = logging.getLogger(__name__)

LOG_2PI = float(np.log(2.0 * np.pi))
JITTER = 1e-8


@dataclass
class ExposureDataset:
    """Exposures ``Z`` (n x M), confounders ``X`` (n x P), optional response."""

    Z: np.ndarray
    names: Sequence[str]
    X: Optional[np.ndarray] = None
    y: Optional[np.ndarray] = None
    sex: Optional[np.ndarray] = None

    def __post_init__(self):
        self.Z = np.atleast_2d(np.asarray(self.Z, dtype=float))
        n, M = self.Z.shape
        self.names = list(self.names)
        if n < 2:
            raise InvalidInputError(f"need at least 2 observations, got {n}")
        if len(self.names) != M:
            raise InvalidInputError(
                f"Z has {M} columns but {len(self.names)} names were given")
        if not np.all(np.isfinite(self.Z)):
            raise InvalidInputError("Z contains non-finite values")
        if self.X is None:
            self.X = np.zeros((n, 0))
        self.X = np.asarray(self.X, dtype=float).reshape(n, -1)
        if not np.all(np.isfinite(self.X)):
            raise InvalidInputError("X contains non-finite values")
        if self.y is not None:
            self.y = np.asarray(self.y, dtype=float).ravel()
            if self.y.shape[0] != n:
                raise InvalidInputError(
                    f"y has length {self.y.shape[0]}, expected {n}")
            if not np.all(np.isfinite(self.y)):
                raise InvalidInputError("y contains non-finite values")
        if self.sex is not None:
            self.sex = np.asarray(self.sex).astype(str)
            if self.sex.shape[0] != n:
                raise InvalidInputError("sex labels must have one entry per row")

    @property
    def n(self) -> int:
        return self.Z.shape[0]

    @property
    def M(self) -> int:
        return self.Z.shape[1]

    @property
    def P(self) -> int:
        return self.X.shape[1]

    def column(self, name: str) -> np.ndarray:
        try:
            return self.Z[:, self.names.index(name)]
        except ValueError:
            raise InvalidInputError(f"unknown exposure {name!r}") from None

    def with_response(self, y) -> "ExposureDataset":
        return ExposureDataset(self.Z, self.names, self.X, y, self.sex)


@dataclass
class KernelWeights:
    """Component weights ``r`` and inclusion indicators ``delta``."""

    r: np.ndarray
    delta: np.ndarray = field(default=None)

    def __post_init__(self):
        self.r = np.asarray(self.r, dtype=float).ravel()
        if self.delta is None:
            self.delta = (self.r > 0).astype(np.int8)
        self.delta = np.asarray(self.delta, dtype=np.int8).ravel()
        if self.delta.shape != self.r.shape:
            raise InvalidInputError("r and delta must have the same length")
        if np.any(self.r < 0) or not np.all(np.isfinite(self.r)):
            raise InvalidInputError("kernel weights must be finite and >= 0")
        if not np.all((self.delta == 0) | (self.delta == 1)):
            raise InvalidInputError("delta entries must be 0 or 1")
        if np.any((self.delta == 0) & (self.r != 0)):
            raise InvalidInputError("excluded components must have r = 0")


@dataclass
class ModelParams:
    beta: np.ndarray
    sigma2: float
    lam: float

    def __post_init__(self):
        self.beta = np.asarray(self.beta, dtype=float).ravel()
        if not (np.isfinite(self.sigma2) and self.sigma2 > 0):
            raise InvalidInputError(f"sigma2 must be > 0, got {self.sigma2}")
        if not (np.isfinite(self.lam) and self.lam >= 0):
            raise InvalidInputError(f"lambda must be >= 0, got {self.lam}")


def squared_distances(Z: np.ndarray) -> np.ndarray:
    """Per-component squared differences, shape (M, n, n)."""
    Z = np.asarray(Z, dtype=float)
    return (Z.T[:, :, None] - Z.T[:, None, :]) ** 2


def _check_weights(r, M):
    r = np.asarray(r, dtype=float).ravel()
    if r.shape[0] != M:
        raise InvalidInputError(f"expected {M} kernel weights, got {r.shape[0]}")
    if not np.all(np.isfinite(r)):
        raise InvalidInputError("kernel weights must be finite")
    if np.any(r < 0):
        raise InvalidInputError("kernel weights must be nonnegative")
    return r


def gaussian_kernel_matrix(Z, r, Z2=None) -> np.ndarray:
    """Gaussian kernel ``K_ij = exp(-sum_m r_m (Z_im - Z_jm)^2)``.

    With ``Z2`` given, returns the cross-kernel between rows of ``Z`` and
    rows of ``Z2``.
    """
    Z = np.atleast_2d(np.asarray(Z, dtype=float))
    if not np.all(np.isfinite(Z)):
        raise InvalidInputError("Z contains non-finite values")
    r = _check_weights(r, Z.shape[1])
    if Z2 is None:
        Z2 = Z
    else:
        Z2 = np.atleast_2d(np.asarray(Z2, dtype=float))
        if Z2.shape[1] != Z.shape[1]:
            raise InvalidInputError("column count mismatch between Z and Z2")
        if not np.all(np.isfinite(Z2)):
            raise InvalidInputError("Z2 contains non-finite values")
    S = np.zeros((Z.shape[0], Z2.shape[0]))
    for m in np.flatnonzero(r):
        S += r[m] * (Z[:, m][:, None] - Z2[:, m][None, :]) ** 2
    return np.exp(-S)


def cholesky_factor(lam: float, K: np.ndarray) -> np.ndarray:
    """Lower Cholesky factor of ``I + lam * K``.

    On failure, 1e-8 is added to the diagonal and the factorization retried
    once before giving up.
    """
    n = K.shape[0]
    V = lam * K
    V[np.diag_indices(n)] += 1.0
    try:
        return scipy.linalg.cholesky(V, lower=True, check_finite=False)
    except (np.linalg.LinAlgError, ValueError):
        logger.warning("Cholesky failed (lam=%g); retrying with jitter %g", lam, JITTER)
    V[np.diag_indices(n)] += JITTER
    try:
        return scipy.linalg.cholesky(V, lower=True, check_finite=False)
    except (np.linalg.LinAlgError, ValueError):
        with np.errstate(all="ignore"):
            cond = np.linalg.cond(V) if np.all(np.isfinite(V)) else np.inf
            eig_min = np.linalg.eigvalsh(V).min() if np.all(np.isfinite(V)) else np.nan
        raise NumericalError(
            f"I + lam*K is not numerically positive definite "
            f"(lam={lam:g}, n={n}, cond={cond:.3g}, min eigenvalue={eig_min:.3g})"
        ) from None


def _check_dims(y, X, K):
    y = np.asarray(y, dtype=float).ravel()
    n = y.shape[0]
    X = np.zeros((n, 0)) if X is None else np.asarray(X, dtype=float).reshape(n, -1)
    K = np.asarray(K, dtype=float)
    if K.shape != (n, n):
        raise InvalidInputError(f"K has shape {K.shape}, expected ({n}, {n})")
    return y, X, K


def gaussian_logpdf_chol(resid: np.ndarray, sigma2: float, L: np.ndarray) -> float:
    """log N(resid | 0, sigma2 * L L')."""
    n = resid.shape[0]
    w = scipy.linalg.solve_triangular(L, resid, lower=True, check_finite=False)
    logdet = 2.0 * np.sum(np.log(np.diag(L)))
    return float(-0.5 * (n * (LOG_2PI + np.log(sigma2)) + logdet + w @ w / sigma2))


def marginal_log_likelihood(y, X, params: ModelParams, K) -> float:
    """Log density of ``y`` under Normal(X beta, sigma2 (I + lam K))."""
    y, X, K = _check_dims(y, X, K)
    if params.beta.shape[0] != X.shape[1]:
        raise InvalidInputError("beta length does not match X columns")
    resid = y - X @ params.beta
    L = cholesky_factor(params.lam, K)
    return gaussian_logpdf_chol(resid, params.sigma2, L)


def posterior_h_mean(Z_train, y, X, params: ModelParams, K, Z_new, r) -> np.ndarray:
    """Posterior mean of ``h`` at ``Z_new`` given the fitted parameters.

    E[h(Z_new) | y] = lam * K(Z_new, Z_train) (I + lam K)^-1 (y - X beta)
    """
    y, X, K = _check_dims(y, X, K)
    Z_train = np.atleast_2d(np.asarray(Z_train, dtype=float))
    Z_new = np.atleast_2d(np.asarray(Z_new, dtype=float))
    if Z_train.shape[0] != y.shape[0]:
        raise InvalidInputError("Z_train rows must match y")
    if Z_new.shape[1] != Z_train.shape[1]:
        raise InvalidInputError(
            f"Z_new has {Z_new.shape[1]} columns, expected {Z_train.shape[1]}")
    if params.lam == 0:
        return np.zeros(Z_new.shape[0])
    L = cholesky_factor(params.lam, K)
    alpha = scipy.linalg.cho_solve((L, True), y - X @ params.beta, check_finite=False)
    K_cross = gaussian_kernel_matrix(Z_new, r, Z_train)
    return params.lam * K_cross @ alpha
