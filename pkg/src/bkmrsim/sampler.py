"""Metropolis-within-Gibbs sampler for BKMR with component-wise selection.

One iteration is a fixed-order sweep:

1. for each exposure ``m``: a birth / death / refine move on ``(delta_m, r_m)``
2. a log-scale random-walk update of ``lam``
3. an exact Gibbs draw of ``beta`` (flat prior)
4. an exact Gibbs draw of ``sigma2`` (inverse-gamma prior)

``h`` is integrated out, so every density below is the marginal normal
``y ~ N(X beta, sigma2 (I + lam K))``.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import scipy.linalg

from .errors import InitializationError, InvalidInputError, NumericalError
from .kernel import (
    ExposureDataset,
    cholesky_factor,
    gaussian_logpdf_chol,
    squared_distances,
)

MOVES = ("birth", "death", "refine")


@dataclass
class McmcConfig:
    """Sampler settings and prior hyperparameters.

    Priors: beta flat; sigma2 ~ InvGamma(a0, b0); P(delta_m = 1) = pi0;
    lam ~ Uniform(0, lambda_max) (``lambda_prior = "uniform"``) or a gamma
    with mean ``lambda_mean`` and sd ``lambda_sd`` (``"gamma"``); r_m | delta_m = 1 follows ``r_prior``:

    ``"uniform"``  r ~ Uniform(r_prior_a, r_prior_b)
    ``"invunif"``  1/r ~ Uniform(r_prior_a, r_prior_b)

    Birth moves draw r_m from Uniform(0, birth_r_max) (``birth_proposal =
    "uniform"``) or from the slab prior itself (``"prior"``).
    """

    iterations: int = 10000
    burn_in: Optional[int] = None
    seed: int = 0
    proposal_sd_r: float = 0.3
    proposal_sd_lambda: float = 0.5
    birth_r_max: float = 2.0
    a0: float = 0.001
    b0: float = 0.001
    lambda_prior: str = "uniform"
    lambda_max: float = 100.0
    lambda_mean: float = 10.0
    lambda_sd: float = 10.0
    r_prior: str = "uniform"
    r_prior_a: float = 0.0
    r_prior_b: float = 100.0
    birth_proposal: str = "uniform"
    pi0: float = 0.5
    lambda_init: float = 1.0
    update_lambda: bool = True
    update_components: bool = True

    def __post_init__(self):
        if self.burn_in is None:
            self.burn_in = self.iterations // 2
        if self.iterations < 2:
            raise InvalidInputError("iterations must be >= 2")
        if not 0 <= self.burn_in < self.iterations:
            raise InvalidInputError("burn_in must satisfy 0 <= burn_in < iterations")
        for name in ("proposal_sd_r", "proposal_sd_lambda", "birth_r_max",
                     "a0", "b0", "lambda_max", "r_prior_b"):
            if not getattr(self, name) > 0:
                raise InvalidInputError(f"{name} must be positive")
        if self.lambda_prior not in ("uniform", "gamma"):
            raise InvalidInputError(f"unknown lambda_prior {self.lambda_prior!r}")
        if not (self.lambda_mean > 0 and self.lambda_sd > 0):
            raise InvalidInputError("lambda_mean and lambda_sd must be positive")
        if self.r_prior not in ("uniform", "invunif"):
            raise InvalidInputError(f"unknown r_prior {self.r_prior!r}")
        if self.birth_proposal not in ("uniform", "prior"):
            raise InvalidInputError(f"unknown birth_proposal {self.birth_proposal!r}")
        if not 0 <= self.r_prior_a < self.r_prior_b:
            raise InvalidInputError("r prior bounds must satisfy 0 <= a < b")
        if not 0 < self.pi0 < 1:
            raise InvalidInputError("pi0 must lie in (0, 1)")
        if self.lambda_init < 0 or (self.lambda_prior == "uniform"
                                    and self.lambda_init > self.lambda_max):
            raise InvalidInputError("lambda_init lies outside the lambda prior support")


class ChainState:
    """Current sampler state plus its cached kernel exponent and factor.

    ``S`` is the kernel exponent ``sum_m r_m D_m`` (so ``K = exp(-S)``) and
    ``L`` the lower Cholesky factor of ``I + lam K``.  Both are kept in sync
    by :meth:`set_kernel`.
    """

    def __init__(self, data: ExposureDataset, beta, sigma2, lam, r, delta, D=None):
        self.D = squared_distances(data.Z) if D is None else D
        self._D_flat = self.D.reshape(self.D.shape[0], -1)
        self.beta = np.asarray(beta, dtype=float).ravel()
        self.sigma2 = float(sigma2)
        self.lam = float(lam)
        self.r = np.asarray(r, dtype=float).ravel().copy()
        self.delta = np.asarray(delta, dtype=np.int8).ravel().copy()
        self.resid = data.y - data.X @ self.beta
        self.set_kernel(self.r, self.lam)

    def kernel_for(self, r) -> np.ndarray:
        n = self.D.shape[1]
        return np.exp(-(np.asarray(r, dtype=float) @ self._D_flat)).reshape(n, n)

    def set_kernel(self, r, lam, K=None, L=None):
        self.r = np.asarray(r, dtype=float)
        self.lam = float(lam)
        self.K = self.kernel_for(r) if K is None else K
        self.L = cholesky_factor(self.lam, self.K) if L is None else L

    def loglik(self, L=None) -> float:
        return gaussian_logpdf_chol(self.resid, self.sigma2, self.L if L is None else L)

    def quad_form(self) -> float:
        w = scipy.linalg.solve_triangular(self.L, self.resid, lower=True,
                                          check_finite=False)
        return float(w @ w)


@dataclass
class PosteriorChain:
    beta: np.ndarray
    sigma2: np.ndarray
    lam: np.ndarray
    r: np.ndarray
    delta: np.ndarray
    names: list
    config: McmcConfig
    acceptance: dict = field(default_factory=dict)

    def __len__(self):
        return self.sigma2.shape[0]

    def acceptance_rates(self) -> dict:
        return {k: (a / p if p else float("nan")) for k, (a, p) in self.acceptance.items()}

    def columns(self):
        P = self.beta.shape[1]
        return ([f"beta_{j + 1}" for j in range(P)] + ["sigma2", "lambda"]
                + [f"r_{nm}" for nm in self.names] + [f"delta_{nm}" for nm in self.names])

    def save(self, path) -> None:
        """Write the chain as CSV plus a ``.meta.json`` sidecar."""
        path = Path(path)
        table = np.column_stack([self.beta, self.sigma2, self.lam, self.r, self.delta])
        M = self.r.shape[1]
        fmt = ["%.17g"] * (table.shape[1] - M) + ["%d"] * M
        np.savetxt(path, table, delimiter=",", header=",".join(self.columns()),
                   comments="", fmt=fmt)
        meta = {
            "names": self.names,
            "config": asdict(self.config),
            "acceptance": {k: list(v) for k, v in self.acceptance.items()},
            "acceptance_rates": self.acceptance_rates(),
        }
        Path(str(path) + ".meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True))

    @classmethod
    def load(cls, path) -> "PosteriorChain":
        path = Path(path)
        meta = json.loads(Path(str(path) + ".meta.json").read_text())
        table = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
        M = len(meta["names"])
        P = table.shape[1] - 2 - 2 * M
        return cls(
            beta=table[:, :P],
            sigma2=table[:, P],
            lam=table[:, P + 1],
            r=table[:, P + 2:P + 2 + M],
            delta=table[:, P + 2 + M:].astype(np.int8),
            names=meta["names"],
            config=McmcConfig(**meta["config"]),
            acceptance={k: tuple(v) for k, v in meta["acceptance"].items()},
        )


# --- individual updates -----------------------------------------------------

def beta_conditional(state: ChainState, data: ExposureDataset):
    """Mean and upper Cholesky factor ``R`` (``R'R = X'V^-1 X``) of the
    conditional posterior of beta under a flat prior."""
    L = state.L
    Xt = scipy.linalg.solve_triangular(L, data.X, lower=True, check_finite=False)
    yt = scipy.linalg.solve_triangular(L, data.y, lower=True, check_finite=False)
    try:
        R = scipy.linalg.cholesky(Xt.T @ Xt, lower=False, check_finite=False)
    except (np.linalg.LinAlgError, ValueError):
        raise NumericalError("X' V^-1 X is singular; confounders are collinear") from None
    mean = scipy.linalg.cho_solve((R, False), Xt.T @ yt, check_finite=False)
    return mean, R


def gibbs_update_beta(state: ChainState, data: ExposureDataset, rng) -> np.ndarray:
    """Draw beta ~ N(mean, sigma2 (X'V^-1 X)^-1)."""
    if data.P == 0:
        return np.zeros(0)
    mean, R = beta_conditional(state, data)
    z = rng.standard_normal(data.P)
    return mean + math.sqrt(state.sigma2) * scipy.linalg.solve_triangular(
        R, z, lower=False, check_finite=False)


def gibbs_update_sigma2(state: ChainState, data: ExposureDataset, rng,
                        config: McmcConfig) -> float:
    """Draw sigma2 from InvGamma(a0 + n/2, b0 + q/2)."""
    q = state.quad_form()
    if not np.isfinite(q):
        raise NumericalError(f"residual quadratic form is not finite ({q})")
    shape = config.a0 + 0.5 * data.n
    scale = config.b0 + 0.5 * q
    g = rng.gamma(shape)
    sigma2 = scale / g if g > 0 else np.inf
    if not (np.isfinite(sigma2) and sigma2 > 0):
        raise NumericalError(f"sigma2 draw left the support (shape={shape}, scale={scale})")
    return sigma2


def log_lambda_prior(lam: float, config: McmcConfig) -> float:
    """Log prior density of lam, up to an additive constant."""
    if lam <= 0:
        return -np.inf
    if config.lambda_prior == "uniform":
        return 0.0 if lam <= config.lambda_max else -np.inf
    shape = (config.lambda_mean / config.lambda_sd) ** 2
    rate = config.lambda_mean / config.lambda_sd ** 2
    return (shape - 1.0) * math.log(lam) - rate * lam


def lambda_log_ratio(state: ChainState, lam_new: float, config: McmcConfig,
                     L_new=None) -> float:
    """Log MH ratio for moving lam -> lam_new with the log-scale random walk."""
    if lam_new == state.lam:
        return 0.0
    log_prior = log_lambda_prior(lam_new, config) - log_lambda_prior(state.lam, config)
    if not np.isfinite(log_prior):
        return -np.inf
    if L_new is None:
        L_new = cholesky_factor(lam_new, state.K)
    return (state.loglik(L_new) - state.loglik() + log_prior
            + math.log(lam_new) - math.log(state.lam))


def mh_update_lambda(state: ChainState, data: ExposureDataset, rng,
                     config: McmcConfig):
    """Random-walk MH on log(lam).  Returns ``(lam, accepted)``; the state's
    cached factor is updated on acceptance.

    A state with ``lam == 0`` is absorbing for the log-scale walk and is
    returned unchanged.
    """
    if state.lam == 0:
        return 0.0, False
    lam_new = state.lam * math.exp(config.proposal_sd_lambda * rng.standard_normal())
    log_u = math.log(rng.uniform())
    if not np.isfinite(log_lambda_prior(lam_new, config)):
        return state.lam, False
    L_new = cholesky_factor(lam_new, state.K)
    if log_u < lambda_log_ratio(state, lam_new, config, L_new):
        state.set_kernel(state.r, lam_new, K=state.K, L=L_new)
        return lam_new, True
    return state.lam, False


def log_r_prior(r: float, config: McmcConfig) -> float:
    """Log slab density of r_m given delta_m = 1."""
    a, b = config.r_prior_a, config.r_prior_b
    if config.r_prior == "uniform":
        return -math.log(b - a) if a < r <= b else -np.inf
    # 1/r ~ Uniform(a, b)  =>  p(r) = r^-2 / (b - a) on [1/b, 1/a)
    if r <= 0 or not a < 1.0 / r <= b:
        return -np.inf
    return -math.log(b - a) - 2.0 * math.log(r)


def _log_birth_proposal(r: float, config: McmcConfig) -> float:
    if config.birth_proposal == "prior":
        return log_r_prior(r, config)
    return -math.log(config.birth_r_max) if 0 < r <= config.birth_r_max else -np.inf


def _draw_birth(rng, config: McmcConfig) -> float:
    if config.birth_proposal == "uniform":
        return rng.uniform(0.0, config.birth_r_max)
    u = rng.uniform(config.r_prior_a, config.r_prior_b)
    if config.r_prior == "uniform":
        return u
    return 1.0 / u if u > 0 else np.inf


def _log_birth_factor(r_new: float, config: McmcConfig) -> float:
    """Prior-over-proposal factor of a birth move (without the likelihood).

    Forward: birth chosen w.p. 1 from delta=0, r drawn from the birth proposal.
    Reverse: death chosen w.p. 1/2 from delta=1.
    """
    log_q = _log_birth_proposal(r_new, config)
    log_p = log_r_prior(r_new, config)
    if not (np.isfinite(log_q) and np.isfinite(log_p)):
        return -np.inf
    return (math.log(config.pi0) - math.log1p(-config.pi0)
            + log_p - log_q + math.log(0.5))


def _log_prior_factor(state: ChainState, m: int, move: str, r_new: float,
                      config: McmcConfig) -> float:
    r_old = state.r[m]
    if move == "birth":
        return _log_birth_factor(r_new, config)
    if move == "death":
        return -_log_birth_factor(r_old, config)
    log_p = log_r_prior(r_new, config)
    if not np.isfinite(log_p):
        return -np.inf
    # log-scale random walk contributes the Jacobian r_new / r_old
    return log_p - log_r_prior(r_old, config) + math.log(r_new) - math.log(r_old)


def component_log_ratio(state: ChainState, m: int, move: str, r_new: float,
                        config: McmcConfig, L_new=None) -> float:
    """Log MH acceptance ratio for a birth/death/refine move on component ``m``."""
    if move not in MOVES:
        raise InvalidInputError(f"unknown move {move!r}")
    needed = 0 if move == "birth" else 1
    if state.delta[m] != needed:
        raise InvalidInputError(f"{move} requires delta_m = {needed}")
    if move == "death":
        r_new = 0.0
    log_prior = _log_prior_factor(state, m, move, r_new, config)
    if not np.isfinite(log_prior):
        return log_prior
    if L_new is None:
        r_prop = state.r.copy()
        r_prop[m] = r_new
        L_new = cholesky_factor(state.lam, state.kernel_for(r_prop))
    return state.loglik(L_new) - state.loglik() + log_prior


def mh_update_component(state: ChainState, data: ExposureDataset, m: int, rng,
                        config: McmcConfig):
    """One reversible move on ``(delta_m, r_m)``.

    From ``delta_m = 0`` the move is a birth; from ``delta_m = 1`` it is a
    death or a refine with probability 1/2 each.  Returns
    ``(delta_m, r_m, move, accepted)``.
    """
    if not 0 <= m < data.M:
        raise InvalidInputError(f"component index {m} out of range")
    if state.delta[m] == 0:
        move = "birth"
        r_new = _draw_birth(rng, config)
    elif rng.uniform() < 0.5:
        move = "death"
        r_new = 0.0
    else:
        move = "refine"
        r_new = state.r[m] * math.exp(config.proposal_sd_r * rng.standard_normal())
    log_u = math.log(rng.uniform())

    # prior-only rejection before paying for a factorization
    if not np.isfinite(_log_prior_factor(state, m, move, r_new, config)):
        return int(state.delta[m]), float(state.r[m]), move, False

    r_prop = state.r.copy()
    r_prop[m] = r_new
    K_new = state.kernel_for(r_prop)
    L_new = cholesky_factor(state.lam, K_new)
    if log_u < component_log_ratio(state, m, move, r_new, config, L_new):
        state.delta[m] = 0 if move == "death" else 1
        state.set_kernel(r_prop, state.lam, K=K_new, L=L_new)
        return int(state.delta[m]), float(r_new), move, True
    return int(state.delta[m]), float(state.r[m]), move, False


# --- driver -----------------------------------------------------------------

def initial_state(data: ExposureDataset, config: McmcConfig, D=None) -> ChainState:
    """Least-squares beta, residual-variance sigma2, lam from config, all delta = 0."""
    if data.P:
        beta, *_ = np.linalg.lstsq(data.X, data.y, rcond=None)
    else:
        beta = np.zeros(0)
    resid = data.y - data.X @ beta
    sigma2 = float(np.var(resid))
    if not (np.isfinite(sigma2) and sigma2 > 0):
        sigma2 = 1.0
    M = data.M
    state = ChainState(data, beta, sigma2, config.lambda_init, np.zeros(M),
                       np.zeros(M, dtype=np.int8), D=D)
    for name, value in (("beta", state.beta), ("sigma2", sigma2), ("lambda", state.lam)):
        if not np.all(np.isfinite(value)):
            raise InitializationError(f"initial {name} is not finite")
    if not np.isfinite(state.loglik()):
        raise InitializationError(
            f"log-likelihood is not finite at initialization (sigma2={sigma2:g})")
    return state


def fit(data: ExposureDataset, config: McmcConfig, rng=None, state=None) -> PosteriorChain:
    """Run the sampler for ``config.iterations`` sweeps.

    The RNG defaults to ``np.random.default_rng(config.seed)``; a caller
    that manages its own streams may pass one in.
    """
    if data.y is None:
        raise InvalidInputError("fit requires a response y")
    if data.n < 10:
        raise InvalidInputError(f"fit requires n >= 10, got {data.n}")
    rng = np.random.default_rng(config.seed) if rng is None else rng
    if state is None:
        state = initial_state(data, config)

    T, M, P = config.iterations, data.M, data.P
    out_beta = np.empty((T, P))
    out_sigma2 = np.empty(T)
    out_lam = np.empty(T)
    out_r = np.empty((T, M))
    out_delta = np.empty((T, M), dtype=np.int8)
    acc = {"lambda": [0, 0]}
    for nm in data.names:
        for mv in MOVES:
            acc[f"{mv}:{nm}"] = [0, 0]

    for t in range(T):
        if config.update_components:
            for m in range(M):
                _, _, move, ok = mh_update_component(state, data, m, rng, config)
                key = f"{move}:{data.names[m]}"
                acc[key][0] += ok
                acc[key][1] += 1
        if config.update_lambda:
            _, ok = mh_update_lambda(state, data, rng, config)
            acc["lambda"][0] += ok
            acc["lambda"][1] += 1
        if P:
            state.beta = gibbs_update_beta(state, data, rng)
            state.resid = data.y - data.X @ state.beta
        state.sigma2 = gibbs_update_sigma2(state, data, rng, config)

        out_beta[t] = state.beta
        out_sigma2[t] = state.sigma2
        out_lam[t] = state.lam
        out_r[t] = state.r
        out_delta[t] = state.delta

    return PosteriorChain(out_beta, out_sigma2, out_lam, out_r, out_delta,
                          list(data.names), config,
                          {k: tuple(v) for k, v in acc.items()})


def posterior_inclusion_probabilities(chain: PosteriorChain, burn_in=None) -> np.ndarray:
    """Post-burn-in mean of each inclusion indicator."""
    burn_in = chain.config.burn_in if burn_in is None else burn_in
    kept = chain.delta[burn_in:]
    if kept.shape[0] == 0:
        raise InvalidInputError("no iterations left after burn-in")
    return kept.mean(axis=0)
