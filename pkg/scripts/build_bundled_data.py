"""Regenerate the bundled default parameters and the synthetic example CSV.

Real NHANES-estimated parameters are not redistributed.  The defaults are
constructed on the transformed scale (log10(x + 1) / SD) to satisfy the
published constraints:

* five metals, stratum sizes 1506 female / 1428 male;
* pairwise correlations within [0, 0.34];
* gamma-implied skewness of lead near 0.618 and mercury near 1.28, all
  metals within the 0.4-1.55 range seen in the raw data;
* SDs near 1 (the transform scales each metal to unit SD);
* a common per-metal mean in both strata, so pooling the strata adds no
  cross-metal correlation of its own.

Run from the repository root:  python scripts/build_bundled_data.py
"""
from pathlib import Path

import numpy as np

from bkmrsim.simgen import (
    METALS, SimulationSpec, StratumParams, gamma_params_from_moments,
    save_params, simulate_dataset,
)

DATA = Path(__file__).resolve().parents[1] / "src" / "bkmrsim" / "data"

# cadmium, lead, manganese, mercury, selenium
SKEW = {
    "female": [1.20, 0.66, 0.52, 1.25, 0.47],
    "male": [1.15, 0.58, 0.56, 1.31, 0.43],
}
# upper triangle, row-major: (Cd,Pb) (Cd,Mn) (Cd,Hg) (Cd,Se) (Pb,Mn) (Pb,Hg) (Pb,Se) (Mn,Hg) (Mn,Se) (Hg,Se)
CORR = {
    "female": [0.30, 0.08, 0.12, 0.03, 0.10, 0.22, 0.06, 0.02, 0.05, 0.15],
    "male": [0.34, 0.05, 0.10, 0.01, 0.07, 0.26, 0.04, 0.00, 0.09, 0.18],
}
N = {"female": 1506, "male": 1428}

# log10(x + 1) scale used to map the example CSV back to concentrations
LOG_MEAN = [0.15, 0.35, 1.0, 0.25, 2.28]


def build_params():
    params = {}
    M = len(METALS)
    for label in ("female", "male"):
        # gamma skewness is 2 sd / mu; a shared mu leaves the SD to carry the
        # stratum's skewness, scaled so the pooled SD is close to 1
        pooled_skew = np.mean([SKEW["female"], SKEW["male"]], axis=0)
        mu = 2.0 / pooled_skew
        sd = mu * np.array(SKEW[label]) / 2.0
        corr = np.eye(M)
        corr[np.triu_indices(M, 1)] = CORR[label]
        corr = corr + np.triu(corr, 1).T
        Sigma_u = corr * np.outer(sd, sd)
        shape, rate = map(np.array, zip(*(gamma_params_from_moments(m, s) for m, s in zip(mu, sd))))
        params[label] = StratumParams(label, list(METALS), mu, sd, Sigma_u,
                                      np.diag(np.diag(Sigma_u)), shape, rate, N[label])
    return params


def build_example_csv(params, path, seed=20240618):
    rng = np.random.default_rng(seed)
    ds = simulate_dataset(params, SimulationSpec("unstructured", N["female"], N["male"]), rng)
    T = ds.Z
    scale = np.array(LOG_MEAN) / T.mean(axis=0)
    raw = 10.0 ** (T * scale) - 1.0
    # about 30% of rows lose one metal, mirroring 2068 complete of 2934
    holes = rng.random(len(raw)) < 1 - 2068 / 2934
    raw[holes, rng.integers(0, len(METALS), holes.sum())] = np.nan
    with open(path, "w") as fh:
        fh.write(",".join(list(METALS) + ["sex"]) + "\n")
        for row, sex in zip(raw, ds.sex):
            cells = ["" if np.isnan(v) else f"{v:.5g}" for v in row]
            fh.write(",".join(cells + [sex]) + "\n")


if __name__ == "__main__":
    params = build_params()
    save_params(params, DATA / "default_params.json",
                notes="Synthetic defaults on the log10(x+1)/SD scale, constructed to honour "
                      "published summary constraints (stratum sizes 1506/1428, correlations "
                      "in [0, 0.34], lead skewness ~0.618, mercury ~1.28). Not NHANES estimates. "
                      "Regenerate with scripts/build_bundled_data.py.")
    build_example_csv(params, DATA / "example_exposures.csv")
