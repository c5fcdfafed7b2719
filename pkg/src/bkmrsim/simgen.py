"""Exposure parameter estimation and correlated skewed-gamma simulation.

Metals are log10(x + 1) transformed and divided by their standard
deviation.  Per sex stratum we keep means, SDs, covariance matrices and
moment-matched gamma parameters, then draw new exposure sets through a
Gaussian copula with gamma marginals.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy import stats

from .errors import DegenerateColumnError, InvalidInputError, NumericalError
from .kernel import ExposureDataset

METALS = ("cadmium", "lead", "manganese", "mercury", "selenium")
STRATA = ("female", "male")
REGIMES = ("diagonal", "unstructured")
COVARIANCE_ADVISORY_THRESHOLD = 0.10

_SEX_CODES = {"female": "female", "f": "female", "2": "female",
              "male": "male", "m": "male", "1": "male"}


@dataclass
class StratumParams:
    label: str
    names: List[str]
    mu: np.ndarray
    sigma: np.ndarray
    Sigma_u: np.ndarray
    Sigma_d: np.ndarray
    shape: np.ndarray
    rate: np.ndarray
    n_stratum: int

    def __post_init__(self):
        self.names = list(self.names)
        for attr in ("mu", "sigma", "shape", "rate"):
            setattr(self, attr, np.asarray(getattr(self, attr), dtype=float).ravel())
        self.Sigma_u = np.asarray(self.Sigma_u, dtype=float)
        self.Sigma_d = np.asarray(self.Sigma_d, dtype=float)
        M = len(self.names)
        if any(getattr(self, a).shape != (M,) for a in ("mu", "sigma", "shape", "rate")):
            raise InvalidInputError("parameter vectors must match the metal count")
        if self.Sigma_u.shape != (M, M) or self.Sigma_d.shape != (M, M):
            raise InvalidInputError("covariance matrices must be M x M")
        if np.any(self.sigma <= 0):
            raise InvalidInputError(f"{self.label}: standard deviations must be positive")
        if np.any(self.shape <= 0) or np.any(self.rate <= 0):
            raise InvalidInputError(f"{self.label}: gamma shape and rate must be positive")
        if not np.allclose(self.Sigma_u, self.Sigma_u.T, atol=1e-12):
            raise InvalidInputError(f"{self.label}: Sigma_u is not symmetric")
        if np.linalg.eigvalsh(self.Sigma_u).min() < -1e-10:
            raise InvalidInputError(f"{self.label}: Sigma_u is not positive semidefinite")
        if not np.allclose(self.Sigma_d, np.diag(np.diag(self.Sigma_u)), rtol=1e-12, atol=0):
            raise InvalidInputError(f"{self.label}: Sigma_d must be the diagonal of Sigma_u")
        if not (np.allclose(self.shape / self.rate, self.mu, rtol=1e-8, atol=0)
                and np.allclose(self.shape / self.rate ** 2, self.sigma ** 2, rtol=1e-8, atol=0)):
            raise InvalidInputError(f"{self.label}: gamma parameters disagree with mu/sigma")

    @property
    def corr(self) -> np.ndarray:
        d = np.sqrt(np.diag(self.Sigma_u))
        c = self.Sigma_u / np.outer(d, d)
        np.fill_diagonal(c, 1.0)
        return c

    @property
    def implied_skewness(self) -> np.ndarray:
        return 2.0 / np.sqrt(self.shape)

    def to_dict(self) -> dict:
        return {
            "label": self.label,
            "names": self.names,
            "mu": self.mu.tolist(),
            "sigma": self.sigma.tolist(),
            "Sigma_u": self.Sigma_u.tolist(),
            "Sigma_d": self.Sigma_d.tolist(),
            "shape": self.shape.tolist(),
            "rate": self.rate.tolist(),
            "n_stratum": int(self.n_stratum),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "StratumParams":
        return cls(**{k: d[k] for k in ("label", "names", "mu", "sigma", "Sigma_u",
                                        "Sigma_d", "shape", "rate", "n_stratum")})


@dataclass
class SimulationSpec:
    regime: str = "unstructured"
    n_female: int = 1506
    n_male: int = 1428
    seed: int = 0

    def __post_init__(self):
        if self.regime not in REGIMES:
            raise InvalidInputError(f"regime must be one of {REGIMES}, got {self.regime!r}")
        if self.n_female < 0 or self.n_male < 0 or self.n_female + self.n_male < 2:
            raise InvalidInputError("need n_female + n_male >= 2")

    @classmethod
    def with_total(cls, n: int, regime: str = "unstructured", seed: int = 0):
        """Split ``n`` between strata in the 1506:1428 reference proportion."""
        n_female = int(round(n * 1506 / 2934))
        return cls(regime, n_female, n - n_female, seed)


@dataclass
class FidelityReport:
    names: List[str]
    sim_mean: np.ndarray
    ref_mean: np.ndarray
    sim_sd: np.ndarray
    ref_sd: np.ndarray
    sim_skewness: np.ndarray
    ref_skewness: np.ndarray
    mean_rel_error: np.ndarray
    sd_rel_error: np.ndarray
    covariance_discrepancy: float
    sim_corr: np.ndarray
    ref_corr: np.ndarray
    flags: List[str] = field(default_factory=list)

    @property
    def covariance_equal(self) -> bool:
        return self.covariance_discrepancy <= COVARIANCE_ADVISORY_THRESHOLD


# --- transforms and moments -------------------------------------------------

def transform_exposures(raw, reference_sd: Optional[Sequence[float]] = None) -> np.ndarray:
    """log10(x + 1) per column, then divide by the column SD (ddof=1).

    Missing values (NaN) are carried through and ignored in the SD.
    """
    raw = np.atleast_2d(np.asarray(raw, dtype=float))
    if np.any(raw[~np.isnan(raw)] < 0):
        raise InvalidInputError("concentrations must be nonnegative")
    logged = np.log10(raw + 1.0)
    if reference_sd is None:
        with np.errstate(invalid="ignore"):
            sd = np.nanstd(logged, axis=0, ddof=1)
    else:
        sd = np.asarray(reference_sd, dtype=float).ravel()
        if sd.shape[0] != raw.shape[1]:
            raise InvalidInputError("reference_sd length must match column count")
    bad = ~(np.isfinite(sd) & (sd > 0))
    if np.any(bad):
        raise DegenerateColumnError(f"zero-variance column(s): {np.flatnonzero(bad).tolist()}")
    return logged / sd


def gamma_params_from_moments(mean: float, sd: float) -> Tuple[float, float]:
    """Moment-matched gamma: shape = mean^2/sd^2, rate = mean/sd^2."""
    if not (np.isfinite(mean) and mean > 0):
        raise InvalidInputError(f"gamma mean must be positive, got {mean}")
    if not (np.isfinite(sd) and sd > 0):
        raise InvalidInputError(f"gamma sd must be positive, got {sd}")
    var = sd * sd
    return mean * mean / var, mean / var


def sample_skewness(x) -> float:
    """Bias-corrected sample skewness G1; NaN for a constant sample."""
    x = np.asarray(x, dtype=float)
    if x.size < 3 or np.ptp(x) == 0:
        return float("nan")
    return float(stats.skew(x, bias=False))


# --- estimation -------------------------------------------------------------

def normalize_sex(labels) -> np.ndarray:
    out = []
    for v in labels:
        key = str(v).strip().lower()
        if key.endswith(".0"):
            key = key[:-2]
        if key not in _SEX_CODES:
            raise InvalidInputError(f"unrecognised sex label {v!r}")
        out.append(_SEX_CODES[key])
    return np.array(out)


def estimate_stratum_params(data, sex=None, names=None) -> Dict[str, StratumParams]:
    """Per-sex means, SDs, covariances and gamma parameters on complete cases.

    Accepts an :class:`ExposureDataset` or a raw ``(Z, sex, names)`` triple
    whose ``Z`` may contain NaN for missing values.
    """
    if isinstance(data, ExposureDataset):
        Z, sex, names = data.Z, data.sex, data.names
    else:
        Z = np.atleast_2d(np.asarray(data, dtype=float))
    if sex is None:
        raise InvalidInputError("sex labels are required for stratified estimation")
    names = list(names) if names is not None else [f"z{j + 1}" for j in range(Z.shape[1])]
    sex = normalize_sex(sex)

    out = {}
    for label in STRATA:
        rows = Z[(sex == label) & np.all(np.isfinite(Z), axis=1)]
        if rows.shape[0] < 3:
            raise InvalidInputError(
                f"stratum {label!r} has {rows.shape[0]} complete rows; need at least 3")
        mu = rows.mean(axis=0)
        Sigma_u = np.cov(rows, rowvar=False, ddof=1).reshape(len(names), len(names))
        sigma = np.sqrt(np.diag(Sigma_u))
        if np.any(sigma == 0):
            bad = [names[j] for j in np.flatnonzero(sigma == 0)]
            raise DegenerateColumnError(f"stratum {label!r}: constant column(s) {bad}")
        shape, rate = zip(*(gamma_params_from_moments(m, s) for m, s in zip(mu, sigma)))
        out[label] = StratumParams(label, names, mu, sigma, Sigma_u, np.diag(np.diag(Sigma_u)),
                                   np.array(shape), np.array(rate), rows.shape[0])
    return out


# --- simulation -------------------------------------------------------------

def _copula_factor(corr: np.ndarray) -> np.ndarray:
    corr = np.asarray(corr, dtype=float)
    M = corr.shape[0]
    if corr.shape != (M, M) or not np.allclose(corr, corr.T, atol=1e-12):
        raise InvalidInputError("correlation matrix must be square and symmetric")
    if not np.allclose(np.diag(corr), 1.0):
        raise InvalidInputError("correlation matrix must have unit diagonal")
    if not np.all(np.isfinite(corr)):
        raise InvalidInputError("correlation matrix must be finite")
    evals, evecs = np.linalg.eigh(corr)
    if evals.min() < -1e-10:
        raise InvalidInputError(f"correlation matrix is not PSD (min eigenvalue {evals.min():.3g})")
    try:
        return np.linalg.cholesky(corr)
    except np.linalg.LinAlgError:
        pass
    # singular but PSD: symmetric square root
    A = evecs * np.sqrt(np.clip(evals, 0.0, None))
    if not np.all(np.isfinite(A)):
        raise NumericalError("copula factorization failed")
    return A


def rmvgamma(n: int, shape, rate, corr, rng) -> np.ndarray:
    """Gaussian-copula draws with Gamma(shape_m, rate_m) marginals."""
    shape = np.asarray(shape, dtype=float).ravel()
    rate = np.asarray(rate, dtype=float).ravel()
    if np.any(shape <= 0) or np.any(rate <= 0):
        raise InvalidInputError("gamma shape and rate must be positive")
    if shape.shape != rate.shape:
        raise InvalidInputError("shape and rate must have the same length")
    A = _copula_factor(np.atleast_2d(corr))
    if A.shape[0] != shape.shape[0]:
        raise InvalidInputError("correlation matrix dimension must match shape/rate")
    G = rng.standard_normal((n, shape.shape[0])) @ A.T
    # use the upper tail directly for positive scores to keep precision
    lower = stats.gamma.ppf(stats.norm.cdf(G), shape, scale=1.0 / rate)
    upper = stats.gamma.isf(stats.norm.sf(G), shape, scale=1.0 / rate)
    return np.where(G < 0, lower, upper)


def simulate_dataset(params: Dict[str, StratumParams], spec: SimulationSpec,
                     rng=None) -> ExposureDataset:
    """Female block then male block, labelled, with the requested copula."""
    rng = np.random.default_rng(spec.seed) if rng is None else rng
    blocks, labels = [], []
    names = params["female"].names
    for label, n in (("female", spec.n_female), ("male", spec.n_male)):
        p = params[label]
        if p.names != names:
            raise InvalidInputError("strata disagree on metal names")
        if n == 0:
            continue
        corr = p.corr if spec.regime == "unstructured" else np.eye(len(names))
        blocks.append(rmvgamma(n, p.shape, p.rate, corr, rng))
        labels += [label] * n
    return ExposureDataset(np.vstack(blocks), names, sex=np.array(labels))


def compare_samples(sim: ExposureDataset, ref_params) -> FidelityReport:
    """Compare simulated exposures against reference parameters.

    ``ref_params`` may be a single :class:`StratumParams` (compared with all
    rows) or the female/male pair (reference moments are then the
    stratum-size weighted mixture of the two).
    """
    if isinstance(ref_params, StratumParams):
        ref_params = {ref_params.label: ref_params}
    refs = list(ref_params.values())
    names = refs[0].names
    if list(sim.names) != list(names) or any(r.names != names for r in refs):
        raise InvalidInputError(
            f"metal mismatch: simulated {list(sim.names)} vs reference {names}")

    if len(refs) == 1:
        ref_mean, ref_cov = refs[0].mu, refs[0].Sigma_u
        ref_skew = refs[0].implied_skewness
    else:
        counts = _stratum_counts(sim, ref_params)
        w = counts / counts.sum()
        ref_mean = sum(wi * r.mu for wi, r in zip(w, refs))
        ref_cov = sum(wi * (r.Sigma_u + np.outer(r.mu - ref_mean, r.mu - ref_mean))
                      for wi, r in zip(w, refs))
        ref_skew = _mixture_gamma_skewness(refs, w)

    Z = sim.Z
    sim_mean = Z.mean(axis=0)
    sim_cov = np.atleast_2d(np.cov(Z, rowvar=False, ddof=1))
    sim_sd = np.sqrt(np.diag(sim_cov))
    ref_sd = np.sqrt(np.diag(ref_cov))
    flags = []
    skew = np.array([sample_skewness(Z[:, j]) for j in range(Z.shape[1])])
    for j in np.flatnonzero(np.isnan(skew)):
        flags.append(f"{names[j]}: constant column, skewness undefined")
    with np.errstate(invalid="ignore", divide="ignore"):
        sim_corr = sim_cov / np.outer(sim_sd, sim_sd)
    ref_corr = ref_cov / np.outer(ref_sd, ref_sd)
    disc = float(np.linalg.norm(sim_cov - ref_cov) / np.linalg.norm(ref_cov))
    return FidelityReport(
        names=list(names),
        sim_mean=sim_mean, ref_mean=ref_mean,
        sim_sd=sim_sd, ref_sd=ref_sd,
        sim_skewness=skew, ref_skewness=ref_skew,
        mean_rel_error=np.abs(sim_mean - ref_mean) / np.abs(ref_mean),
        sd_rel_error=np.abs(sim_sd - ref_sd) / ref_sd,
        covariance_discrepancy=disc,
        sim_corr=sim_corr, ref_corr=ref_corr,
        flags=flags,
    )


def _stratum_counts(sim, ref_params):
    if sim.sex is None:
        return np.array([float(r.n_stratum) for r in ref_params.values()])
    sex = normalize_sex(sim.sex)
    counts = np.array([float(np.sum(sex == label)) for label in ref_params])
    if counts.sum() == 0:
        raise InvalidInputError("no simulated rows match the reference strata")
    return counts


def _mixture_gamma_skewness(refs, w):
    """Skewness of a finite mixture of gamma marginals, per metal."""
    mean = sum(wi * r.mu for wi, r in zip(w, refs))
    m2 = m3 = 0.0
    for wi, r in zip(w, refs):
        d = r.mu - mean
        var = r.sigma ** 2
        third = r.implied_skewness * r.sigma ** 3
        m2 = m2 + wi * (var + d ** 2)
        m3 = m3 + wi * (third + 3 * d * var + d ** 3)
    return m3 / m2 ** 1.5


# --- persistence ------------------------------------------------------------

def save_params(params: Dict[str, StratumParams], path, notes: Optional[str] = None) -> None:
    doc = {"strata": {label: p.to_dict() for label, p in params.items()}}
    if notes:
        doc["notes"] = notes
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def load_params(path=None) -> Dict[str, StratumParams]:
    """Read a parameter file; ``None`` loads the bundled defaults."""
    if path is None:
        text = resources.files("bkmrsim.data").joinpath("default_params.json").read_text()
    else:
        text = Path(path).read_text()
    doc = json.loads(text)
    params = {label: StratumParams.from_dict(d) for label, d in doc["strata"].items()}
    missing = set(STRATA) - set(params)
    if missing:
        raise InvalidInputError(f"parameter file lacks strata {sorted(missing)}")
    return params


def read_exposure_csv(path, metals: Sequence[str] = METALS, sex_column: str = "sex"):
    """Read raw concentrations; returns ``(raw matrix with NaN, sex labels, names)``."""
    df = pd.read_csv(path)
    cols = {c.strip().lower(): c for c in df.columns}
    missing = [m for m in list(metals) + [sex_column] if m.lower() not in cols]
    if missing:
        raise InvalidInputError(f"CSV is missing required column(s): {missing}")
    raw = np.empty((len(df), len(metals)))
    for j, m in enumerate(metals):
        col = pd.to_numeric(df[cols[m.lower()]], errors="coerce")
        bad = col.isna() & df[cols[m.lower()]].notna()
        if bad.any():
            raise InvalidInputError(f"column {m!r} has non-numeric entries")
        raw[:, j] = col.to_numpy(dtype=float)
    sex_raw = df[cols[sex_column.lower()]]
    if sex_raw.isna().any():
        raise InvalidInputError(f"column {sex_column!r} has missing entries")
    return raw, normalize_sex(sex_raw.astype(str)), list(metals)
