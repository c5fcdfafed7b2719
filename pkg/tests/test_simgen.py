import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from bkmrsim.errors import DegenerateColumnError, InvalidInputError
from bkmrsim.kernel import ExposureDataset
from bkmrsim.simgen import (
    METALS, SimulationSpec, StratumParams, compare_samples, estimate_stratum_params,
    gamma_params_from_moments, load_params, normalize_sex, read_exposure_csv, rmvgamma,
    sample_skewness, save_params, simulate_dataset, transform_exposures,
)


# --- transform -------------------------------------------------------------

def test_transform_zero_column_is_degenerate():
    with pytest.raises(DegenerateColumnError):
        transform_exposures(np.zeros((5, 1)))


def test_transform_negative_rejected():
    with pytest.raises(InvalidInputError):
        transform_exposures([[1.0], [-0.5], [2.0]])


def test_transform_nine_maps_to_inverse_sd():
    raw = np.array([[9.0], [0.0], [3.0], [40.0]])
    s = np.std(np.log10(raw + 1), ddof=1)
    assert transform_exposures(raw)[0, 0] == pytest.approx(1.0 / s, rel=1e-14)


def test_transform_self_scaled_sd_is_one():
    raw = np.random.default_rng(0).lognormal(0.5, 1.0, size=(500, 3))
    out = transform_exposures(raw)
    assert np.allclose(out.std(axis=0, ddof=1), 1.0, atol=1e-10)


def test_transform_reference_sd_and_missing():
    raw = np.array([[9.0, np.nan], [0.0, 1.0], [99.0, 3.0]])
    out = transform_exposures(raw, reference_sd=[2.0, 1.0])
    assert out[0, 0] == pytest.approx(0.5)
    assert out[2, 0] == pytest.approx(1.0)
    assert np.isnan(out[0, 1])


# --- gamma moments ---------------------------------------------------------

def test_gamma_exponential_case():
    assert gamma_params_from_moments(1.0, 1.0) == (1.0, 1.0)


def test_gamma_mean_two_sd_one():
    assert gamma_params_from_moments(2.0, 1.0) == pytest.approx((4.0, 2.0))


@pytest.mark.parametrize("mean, sd", [(0.0, 1.0), (-1.0, 1.0), (1.0, 0.0)])
def test_gamma_rejects_nonpositive(mean, sd):
    with pytest.raises(InvalidInputError):
        gamma_params_from_moments(mean, sd)


@settings(max_examples=200)
@given(m=st.floats(1e-3, 1e3), s=st.floats(1e-3, 1e3))
def test_gamma_round_trip_and_skewness(m, s):
    shape, rate = gamma_params_from_moments(m, s)
    dist = stats.gamma(shape, scale=1.0 / rate)
    assert dist.mean() == pytest.approx(m, rel=1e-12)
    assert dist.std() == pytest.approx(s, rel=1e-12)
    assert 2 / math.sqrt(shape) == pytest.approx(2 * s / m, rel=1e-12)


def test_sample_skewness_is_bias_corrected():
    x = np.array([0.0, 0.0, 1.0, 5.0])
    n = x.size
    g1 = stats.skew(x, bias=True)
    assert sample_skewness(x) == pytest.approx(g1 * math.sqrt(n * (n - 1)) / (n - 2))
    assert math.isnan(sample_skewness(np.ones(10)))


# --- estimation ------------------------------------------------------------

def test_estimate_recovers_gamma_parameters():
    rng = np.random.default_rng(1)
    n = 100_000
    shapes, rates = np.array([2.5, 6.0]), np.array([2.0, 3.0])
    Z = rng.gamma(shapes, 1 / rates, size=(2 * n, 2))
    sex = np.array(["female"] * n + ["male"] * n)
    est = estimate_stratum_params(Z, sex, ["a", "b"])
    for p in est.values():
        assert np.allclose(p.shape, shapes, rtol=0.02)
        assert np.allclose(p.rate, rates, rtol=0.02)
        assert p.n_stratum == n


def test_estimate_constant_column():
    Z = np.column_stack([np.arange(8.0) + 1, np.ones(8)])
    with pytest.raises(DegenerateColumnError):
        estimate_stratum_params(Z, ["f"] * 4 + ["m"] * 4, ["a", "b"])


def test_estimate_two_point_arithmetic():
    Z = np.array([[1.0], [3.0], [2.0], [4.0], [6.0], [8.0]])
    sex = ["female", "female", "female", "male", "male", "male"]
    est = estimate_stratum_params(Z, sex, ["a"])
    assert est["female"].mu[0] == pytest.approx(2.0)
    assert est["female"].sigma[0] == pytest.approx(1.0)
    assert est["male"].mu[0] == pytest.approx(6.0)
    assert est["male"].sigma[0] == pytest.approx(2.0)
    assert est["male"].shape[0] == pytest.approx(9.0)
    assert est["male"].rate[0] == pytest.approx(1.5)


def test_estimate_uses_complete_cases():
    Z = np.array([[1.0, 1], [3.0, 2], [np.nan, 5], [2.0, 4], [4.0, 1], [6.0, 3], [8.0, 9]])
    sex = ["f", "f", "f", "f", "m", "m", "m"]
    est = estimate_stratum_params(Z, sex, ["a", "b"])
    assert est["female"].n_stratum == 3
    assert est["female"].mu[0] == pytest.approx(2.0)


def test_estimate_names_short_stratum():
    Z = np.arange(10.0).reshape(5, 2) + 1
    with pytest.raises(InvalidInputError, match="male"):
        estimate_stratum_params(Z, ["f", "f", "f", "m", "m"], ["a", "b"])


def test_normalize_sex_codes():
    assert list(normalize_sex(["F", "male", 1, "2.0"])) == ["female", "male", "male", "female"]
    with pytest.raises(InvalidInputError):
        normalize_sex(["x"])


def test_stratum_params_moment_consistency():
    with pytest.raises(InvalidInputError):
        StratumParams("female", ["a"], np.array([1.0]), np.array([1.0]), np.eye(1), np.eye(1),
                      np.array([2.0]), np.array([1.0]), 10)


# --- copula ----------------------------------------------------------------

def test_copula_identity_is_independent():
    n = 20_000
    X = rmvgamma(n, [2, 3, 1.5], [1, 2, 1], np.eye(3), np.random.default_rng(2))
    C = np.corrcoef(X, rowvar=False)
    assert np.all(np.abs(C[np.triu_indices(3, 1)]) < 3 / math.sqrt(n))


def test_copula_single_column_matches_direct_gamma():
    n = 10_000
    X = rmvgamma(n, [1.7], [0.8], [[1.0]], np.random.default_rng(3))[:, 0]
    direct = np.random.default_rng(4).gamma(1.7, 1 / 0.8, size=n)
    assert stats.ks_2samp(X, direct).pvalue > 0.01


def test_copula_hits_target_correlation():
    n = 100_000
    corr = np.array([[1.0, 0.34], [0.34, 1.0]])
    X = rmvgamma(n, [2.0, 3.0], [1.0, 1.0], corr, np.random.default_rng(5))
    r = np.corrcoef(X, rowvar=False)[0, 1]
    assert 0 < r and abs(r - 0.34) <= 0.05


@pytest.mark.parametrize("seed", [6, 7, 8])
def test_copula_marginals_are_exact(seed):
    rng = np.random.default_rng(seed)
    M = 4
    A = rng.normal(size=(M, M))
    S = A @ A.T + 0.1 * np.eye(M)
    d = np.sqrt(np.diag(S))
    corr = S / np.outer(d, d)
    np.fill_diagonal(corr, 1.0)
    shape, rate = rng.uniform(0.5, 8, M), rng.uniform(0.5, 3, M)
    X = rmvgamma(10_000, shape, rate, corr, np.random.default_rng(seed + 100))
    for m in range(M):
        assert stats.kstest(X[:, m], stats.gamma(shape[m], scale=1 / rate[m]).cdf).pvalue > 0.01


def test_copula_sign_follows_input():
    out = []
    for c in (0.3, -0.3):
        corr = np.array([[1.0, c], [c, 1.0]])
        X = rmvgamma(10_000, [2.0, 1.2], [1.0, 1.0], corr, np.random.default_rng(9))
        out.append(np.corrcoef(X, rowvar=False)[0, 1])
    assert out[0] > 0 > out[1]


def test_copula_rejects_non_psd():
    corr = np.array([[1, 0.9, -0.9], [0.9, 1, 0.9], [-0.9, 0.9, 1]])
    with pytest.raises(InvalidInputError):
        rmvgamma(10, [1, 1, 1], [1, 1, 1], corr, np.random.default_rng(0))


def test_copula_accepts_singular_psd():
    corr = np.ones((2, 2))
    X = rmvgamma(1000, [2, 2], [1, 1], corr, np.random.default_rng(10))
    assert np.allclose(X[:, 0], X[:, 1])


# --- simulate / compare ----------------------------------------------------

@pytest.fixture(scope="module")
def defaults():
    return load_params()


def test_default_spec_sizes(defaults):
    ds = simulate_dataset(defaults, SimulationSpec())
    assert ds.n == 2934
    assert np.sum(ds.sex == "female") == 1506
    assert np.sum(ds.sex == "male") == 1428
    assert ds.names == list(METALS)


def test_with_total_split():
    spec = SimulationSpec.with_total(300)
    assert spec.n_female + spec.n_male == 300
    assert spec.n_female == round(300 * 1506 / 2934)


def test_diagonal_regime_is_uncorrelated(defaults):
    n = 10_000
    ds = simulate_dataset(defaults, SimulationSpec.with_total(n, "diagonal", seed=11))
    # within a stratum the metals are independent
    rows = ds.Z[ds.sex == "female"]
    C = np.corrcoef(rows, rowvar=False)[np.triu_indices(5, 1)]
    assert np.all(np.abs(C) < 3 / math.sqrt(rows.shape[0]))


def test_default_skewness_inside_published_range(defaults):
    ds = simulate_dataset(defaults, SimulationSpec.with_total(10_000, seed=12))
    skew = np.array([sample_skewness(ds.Z[:, j]) for j in range(5)])
    assert np.all((skew >= 0.006296) & (skew <= 1.534478))
    assert skew[METALS.index("mercury")] > skew[METALS.index("lead")]


def test_simulation_is_deterministic(defaults):
    a = simulate_dataset(defaults, SimulationSpec.with_total(500, seed=13))
    b = simulate_dataset(defaults, SimulationSpec.with_total(500, seed=13))
    assert np.array_equal(a.Z, b.Z)


def test_compare_large_sample_is_close(defaults):
    ds = simulate_dataset(defaults, SimulationSpec.with_total(100_000, seed=14))
    rep = compare_samples(ds, defaults)
    assert np.all(rep.mean_rel_error < 0.02)
    assert np.all(rep.sd_rel_error < 0.02)
    assert rep.covariance_equal
    assert not rep.flags


def test_compare_self_is_exact():
    rng = np.random.default_rng(15)
    Z = rng.gamma(3.0, 1.0, size=(400, 3))
    ds = ExposureDataset(Z, ["a", "b", "c"], sex=np.array(["female"] * 400))
    ref = estimate_stratum_params(Z, ["f"] * 200 + ["m"] * 200, ["a", "b", "c"])["female"]
    ref = StratumParams.from_dict({**ref.to_dict(), "mu": Z.mean(0).tolist(),
                                   "sigma": Z.std(0, ddof=1).tolist(),
                                   "Sigma_u": np.cov(Z, rowvar=False).tolist(),
                                   "Sigma_d": np.diag(np.var(Z, 0, ddof=1)).tolist(),
                                   "shape": (Z.mean(0) ** 2 / Z.var(0, ddof=1)).tolist(),
                                   "rate": (Z.mean(0) / Z.var(0, ddof=1)).tolist()})
    rep = compare_samples(ds, ref)
    assert np.allclose(rep.mean_rel_error, 0, atol=1e-12)
    assert np.allclose(rep.sd_rel_error, 0, atol=1e-12)
    assert rep.covariance_discrepancy < 1e-12


def test_compare_flags_constant_column(defaults):
    ds = simulate_dataset(defaults, SimulationSpec.with_total(200, seed=16))
    Z = ds.Z.copy()
    Z[:, 2] = 1.0
    rep = compare_samples(ExposureDataset(Z, ds.names, sex=ds.sex), defaults)
    assert any("manganese" in f for f in rep.flags)


def test_compare_name_mismatch(defaults):
    ds = ExposureDataset(np.ones((3, 5)) + np.arange(3)[:, None], list("abcde"))
    with pytest.raises(InvalidInputError):
        compare_samples(ds, defaults)


# --- files -----------------------------------------------------------------

def test_params_round_trip(tmp_path, defaults):
    save_params(defaults, tmp_path / "p.json")
    back = load_params(tmp_path / "p.json")
    for label in defaults:
        assert back[label].to_dict() == defaults[label].to_dict()


def test_read_csv_requires_columns(tmp_path):
    path = tmp_path / "x.csv"
    path.write_text("lead,mercury\n1,2\n")
    with pytest.raises(InvalidInputError, match="cadmium"):
        read_exposure_csv(path)


def test_read_csv_missing_cells(tmp_path):
    path = tmp_path / "x.csv"
    path.write_text("Cadmium,lead,manganese,mercury,selenium,sex\n"
                    "0.2,1.1,,0.5,190,F\n0.3,0.9,9.5,0.7,200,M\n")
    raw, sex, names = read_exposure_csv(path)
    assert np.isnan(raw[0, 2]) and raw[1, 2] == 9.5
    assert list(sex) == ["female", "male"]
