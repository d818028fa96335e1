import csv
import math

import numpy as np
import pytest

from hierspec.equivalence_lab import (
    CSV_COLUMNS,
    CheckRow,
    ScalingFit,
    clt_distance,
    contraction_scaling,
    contraction_sq_norm,
    joint_clt_deviation,
    joint_reference,
    norm_tail_check,
    project,
    signal_formula_check,
    wasserstein_to_normal,
    write_rows,
)
from hierspec.target_model import LinkFunction, random_sym_tensor, sample_target
from hierspec.tensor_core import SymTensor, contract, hermite_features, sym_dim


def assumption1(d, k, seed):
    return random_sym_tensor(d, k, np.random.default_rng(seed))


# -- projections and 1-D CLT ---------------------------------------------------


@pytest.mark.parametrize("k", [1, 2, 3])
def test_dense_projection_matches_features(k, rng):
    T = assumption1(6, k, 1)
    X = rng.standard_normal((200, 6))
    np.testing.assert_allclose(project(T, X), hermite_features(X, k) @ T.flatten().values, atol=1e-10)


def test_k1_projection_is_exactly_gaussian():
    n = 100_000
    assert clt_distance(assumption1(30, 1, 0), n_samples=n) <= 1.5 * 1.36 / math.sqrt(n)


def test_single_mode_is_chi_square():
    entries = np.zeros(sym_dim(100, 2))
    entries[0] = 1.0
    e11 = SymTensor(100, 2, entries)
    ks = clt_distance(e11, n_samples=100_000)
    assert ks >= 0.05
    # the oracle: (Z^2 - 1)/sqrt 2 against the normal CDF
    z = np.sort((np.random.default_rng(9).standard_normal(400_000) ** 2 - 1) / math.sqrt(2))
    from scipy.stats import kstest
    assert ks == pytest.approx(kstest(z, "norm").statistic, abs=0.01)


def test_clt_distance_decreases_with_d():
    meds = []
    for d in (25, 50, 100, 200):
        meds.append(np.median([clt_distance(assumption1(d, 2, 100 * d + i), n_samples=100_000, seed=i)
                               for i in range(10)]))
    assert all(a > b for a, b in zip(meds, meds[1:])), meds
    assert meds[-1] < 0.02


def test_clt_rejects_zero_and_mismatch():
    with pytest.raises(ValueError):
        clt_distance(SymTensor.zeros(4, 2))
    with pytest.raises(ValueError):
        clt_distance(assumption1(4, 2, 0), k=3)


def test_wasserstein_of_normal_sample_is_small():
    z = np.random.default_rng(0).standard_normal(50_000)
    assert wasserstein_to_normal(z) < 0.02
    assert wasserstein_to_normal(z + 1.0) == pytest.approx(1.0, abs=0.02)


# -- joint CLT -----------------------------------------------------------------


def test_joint_single_feature_is_variance_check():
    T = assumption1(40, 2, 3)
    dev = joint_clt_deviation([T], n_samples=100_000)
    assert dev <= 0.05


def test_joint_deviation_decreases_with_d():
    devs = []
    for d in (32, 64, 128):
        stack = [assumption1(d, 2, 1000 * d + i) for i in range(8)]
        devs.append(joint_clt_deviation(stack, n_samples=50_000, trials=3))
    assert devs[0] > devs[1] > devs[2], devs


def test_joint_deviation_d100():
    t = sample_target(100, 2, 0.5, "id", 0)
    assert t.d1 == 10
    assert joint_clt_deviation(t, n_samples=100_000) <= 0.2
    assert joint_reference(10, 100) == pytest.approx(1.0)


# -- contractions --------------------------------------------------------------


def test_contraction_norm_agrees_with_tensor_core(rng):
    for ka, kb, s in [(2, 2, 1), (3, 2, 1), (3, 3, 2), (2, 2, 2)]:
        A = SymTensor(4, ka, rng.standard_normal(sym_dim(4, ka)))
        B = SymTensor(4, kb, rng.standard_normal(sym_dim(4, kb)))
        c = contract(A, B, s)
        ref = c ** 2 if isinstance(c, float) else c.frobenius_sq()
        assert contraction_sq_norm(A.to_dense(), B.to_dense(), s) == pytest.approx(ref, rel=1e-10)


def test_scaling_k2_s1():
    fit = contraction_scaling(2, 1, [8, 16, 32, 64], trials=50, seed=0)
    assert fit.slope == pytest.approx(-1.0, abs=0.15)


def test_scaling_self_contraction_is_flat():
    fit = contraction_scaling(2, 2, [8, 16, 32, 64], trials=50, seed=0)
    assert np.all((fit.y_values > 0.5) & (fit.y_values < 2.0))
    assert abs(fit.slope) < 0.15


def test_scaling_k3_s2():
    fit = contraction_scaling(3, 2, [6, 9, 13, 18], trials=50, seed=0)
    assert fit.slope == pytest.approx(-2.0, abs=0.25)


@pytest.mark.parametrize("k,s,d_list", [(1, 1, [16, 32, 64, 128]), (2, 1, [12, 24, 48, 96]),
                                        (2, 2, [8, 16, 32, 64]), (3, 2, [8, 12, 18, 27]),
                                        (3, 3, [6, 9, 13, 18])])
def test_slope_interval_contains_exponent(k, s, d_list):
    fit = contraction_scaling(k, s, d_list, trials=200, seed=1, self_contraction=False)
    lo, hi = fit.slope_ci
    assert lo <= -s <= hi or abs(fit.slope + s) <= 0.1, (fit.slope, fit.slope_ci)


def test_k3_s1_local_slope_approaches_minus_one():
    # the O(d^-2) correction is large for (3, 1): local slopes run -1.3, -1.13, ...
    fit = contraction_scaling(3, 1, [8, 16, 32], trials=50, seed=0)
    local = np.diff(np.log(fit.y_values)) / np.diff(np.log(fit.x_values))
    assert local[0] < local[1] < -1.0
    assert abs(fit.slope + 1.0) <= 0.25


def test_scaling_fit_validation():
    with pytest.raises(ValueError):
        contraction_scaling(2, 3, [4, 8, 16])
    with pytest.raises(ValueError):
        contraction_scaling(2, 1, [4, 8])
    with pytest.raises(ValueError):
        contraction_scaling(2, 1, [4, 8, 16], trials=10)
    with pytest.raises(ValueError):
        ScalingFit(np.array([1.0, 1.0, 2.0]), np.ones(3), -1.0, (-1.1, -0.9))


def test_contraction_scaling_is_deterministic():
    a = contraction_scaling(2, 1, [4, 6, 8], trials=50, seed=5, n_boot=50)
    b = contraction_scaling(2, 1, [4, 6, 8], trials=50, seed=5, n_boot=50)
    assert a.slope == b.slope and a.slope_ci == b.slope_ci


# -- norms and the signal formula ----------------------------------------------


@pytest.mark.parametrize("d,k", [(10, 2), (40, 2), (8, 3)])
def test_norm_mean_ratio(d, k):
    mean, _ = norm_tail_check(d, k, 10_000)
    assert mean == pytest.approx(1.0, abs=0.05)


def test_norm_tail_concentrates():
    _, max40 = norm_tail_check(40, 2, 10_000)
    _, max10 = norm_tail_check(10, 2, 10_000)
    assert max40 <= 3
    assert max40 < max10
    with pytest.raises(ValueError):
        norm_tail_check(10, 2, 999)


def test_norm_tail_max_matches_chi_square_oracle():
    # |F[H_2(x)]|^2 = (r^2 - 2r + d)/2 with r = |x|^2 ~ chi2(d), so the maximum of
    # n ratios has CDF F(t)^n; check it lands between the 0.5% and 99.5% quantiles
    from scipy.stats import chi2
    d, n = 40, 10_000
    _, mx = norm_tail_check(d, 2, n)
    ratio = lambda r: (r * r - 2 * r + d) / (d * (d + 1))
    lo, hi = (ratio(chi2.ppf(q ** (1 / n), d)) for q in (0.005, 0.995))
    assert lo <= mx <= hi, (lo, mx, hi)


def test_signal_formula_identity_link():
    t = sample_target(64, 2, 0.5, "id", 0)
    assert signal_formula_check(t, 200_000, seed=0) <= 0.5


def test_signal_formula_tanh_link():
    t = sample_target(64, 2, 0.5, "tanh", 0)
    assert signal_formula_check(t, 200_000, seed=0) <= 0.7


def test_signal_formula_gaussian_latents_shrink():
    t = sample_target(64, 2, 0.5, "id", 0)
    small = signal_formula_check(t, 50_000, seed=1, latents="gaussian")
    big = signal_formula_check(t, 800_000, seed=1, latents="gaussian")
    assert big < small / 2
    with pytest.raises(ValueError):
        signal_formula_check(t, 10, latents="other")


def test_zero_nu1_link_rejected_upstream():
    from hierspec.target_model import DegenerateLink
    with pytest.raises(DegenerateLink):
        LinkFunction.parse("poly:1,0,1")


# -- CSV -----------------------------------------------------------------------


def test_check_rows_csv(tmp_path):
    path = tmp_path / "checks.csv"
    write_rows([CheckRow("clt", "d=10;k=2", 0.01, 0.0, True)], path)
    write_rows([CheckRow("tail", "d=40", 2.5, 3.0, False)], path, append=True)
    rows = list(csv.reader(open(path)))
    assert tuple(rows[0]) == CSV_COLUMNS
    assert rows[1] == ["clt", "d=10;k=2", "0.01", "0.0", "pass"]
    assert rows[2][-1] == "fail" and len(rows) == 3
