"""Balance and association diagnostics and bootstrap standard errors."""

import csv
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from confbal.data import Dataset
from confbal.diagnostics import (
    CONTINUOUS, DISCRETE, _resample, association_stats, balance_report, bootstrap_se, smd,
)
from confbal.errors import DegenerateWeights, ResampleDegenerate, ZeroPooledSd
from confbal.estimators import EstimateConfig, Method, estimate_ate, ipw_weights
from confbal.forest import ForestParams
from confbal.simulation import generate_labeled

FAST = EstimateConfig(forest=ForestParams(m=30, min_node=30), propensity_forest=ForestParams(m=30))


def confounded(n=2000, seed=0):
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((n, 3))
    pi = 1 / (1 + np.exp(-1.2 * X[:, 0]))
    A = (rng.random(n) < pi).astype(int)
    Y = 2 * X[:, 0] + X[:, 2] + A + rng.standard_normal(n)
    return Dataset(X, A, Y), pi


def randomized(n, rng):
    X = rng.standard_normal((n, 3))
    A = (rng.random(n) < 0.5).astype(int)
    Y = X.sum(axis=1) + A + rng.standard_normal(n)
    return Dataset(X, A, Y)


# -- smd ------------------------------------------------------------------------

def test_smd_equal_means_zero():
    x = np.array([0.0, 2.0, 0.0, 2.0])
    assert smd(x, np.array([1, 1, 0, 0])) == 0.0


def test_smd_unit_difference():
    # treated {0, 2}: mean 1, sd sqrt(2); control {-1, 1}: mean 0, sd sqrt(2)
    x = np.array([0.0, 2.0, -1.0, 1.0])
    A = np.array([1, 1, 0, 0])
    assert smd(x, A) == pytest.approx(1 / math.sqrt(2))
    # scale so both sds are 1 and means are 1 and 0
    x = np.array([1 - 1 / math.sqrt(2), 1 + 1 / math.sqrt(2), -1 / math.sqrt(2), 1 / math.sqrt(2)])
    assert smd(x, A) == pytest.approx(1.0)


def test_smd_hand_formula():
    rng = np.random.default_rng(3)
    x = rng.standard_normal(40)
    A = np.r_[np.ones(15, int), np.zeros(25, int)]
    w = rng.random(40) + 0.1
    t, c = x[:15], x[15:]
    m1 = sum(wi * xi for wi, xi in zip(w[:15], t)) / sum(w[:15])
    m0 = sum(wi * xi for wi, xi in zip(w[15:], c)) / sum(w[15:])
    v1 = sum((xi - t.mean()) ** 2 for xi in t) / 14
    v0 = sum((xi - c.mean()) ** 2 for xi in c) / 24
    assert smd(x, A, w) == pytest.approx(abs(m1 - m0) / math.sqrt((v1 + v0) / 2), rel=1e-12)


def test_smd_zero_pooled_sd():
    with pytest.raises(ZeroPooledSd):
        smd(np.array([1.0, 1.0, 1.0]), np.array([1, 0, 0]))


def test_smd_errors():
    with pytest.raises(ValueError):
        smd(np.arange(3.0), np.ones(3, int))
    with pytest.raises(DegenerateWeights):
        smd(np.arange(4.0), np.array([1, 1, 0, 0]), np.array([0.0, 0.0, 1.0, 1.0]))


@settings(max_examples=50)
@given(c=st.floats(0.01, 100) | st.floats(-100, -0.01), shift=st.floats(-1e3, 1e3),
       seed=st.integers(0, 2 ** 31))
def test_smd_affine_invariant(c, shift, seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal(30)
    A = np.r_[np.ones(12, int), np.zeros(18, int)]
    w = rng.random(30) + 0.05
    assert smd(c * x + shift, A, w) == pytest.approx(smd(x, A, w), rel=1e-9, abs=1e-12)


def test_true_ipw_reduces_confounder_smd():
    d, pi = confounded(2000, seed=1)
    w = ipw_weights(pi, d.A)
    assert smd(d.X[:, 0], d.A, w) < smd(d.X[:, 0], d.A)


# -- balance report ---------------------------------------------------------------

@settings(max_examples=30)
@given(seed=st.integers(0, 2 ** 31), p=st.integers(1, 6))
def test_balance_reduction_identities(seed, p):
    rng = np.random.default_rng(seed)
    n = 40
    A = np.r_[np.ones(15, int), np.zeros(25, int)]
    d = Dataset(rng.standard_normal((n, p)), A, rng.standard_normal(n))
    rep = balance_report(d, rng.random(n) + 0.1)
    b, a, r = rep.column("smd_before"), rep.column("smd_after"), rep.column("reduction")
    assert np.array_equal(r, b - a)
    assert r.sum() == pytest.approx(b.sum() - a.sum(), abs=1e-12)
    assert (np.diff(r) <= 0).all()


def test_balance_unit_weights_no_change():
    d, _ = confounded(300)
    rep = balance_report(d, np.ones(d.n))
    assert np.array_equal(rep.column("smd_before"), rep.column("smd_after"))


def test_balance_constant_column_na_last(tmp_path):
    rng = np.random.default_rng(0)
    X = np.column_stack([np.ones(30), rng.standard_normal(30)])
    d = Dataset(X, np.r_[np.ones(10, int), np.zeros(20, int)], rng.standard_normal(30))
    rep = balance_report(d, rng.random(30) + 0.1)
    assert rep.rows[-1]["name"] == "x1" and math.isnan(rep.rows[-1]["reduction"])
    rep.write_csv(tmp_path / "b.csv")
    rows = list(csv.DictReader(open(tmp_path / "b.csv")))
    assert rows[-1]["smd_before"] == "NA"


def test_balance_mask_restricts_rows():
    d, _ = confounded(400)
    mask = np.arange(400) % 2 == 0
    w = np.where(mask, 1.0, 0.0)
    rep = balance_report(d, w, mask)
    sub = d.subset(np.flatnonzero(mask))
    assert rep.column("smd_before") == pytest.approx(
        [smd(sub.X[:, int(r["name"][1:]) - 1], sub.A) for r in rep.rows])
    assert np.array_equal(rep.column("smd_before"), rep.column("smd_after"))


def test_love_plot_long_format(tmp_path):
    d, pi = confounded(300)
    rep = balance_report(d, ipw_weights(pi, d.A))
    rep.write_love_plot_csv(tmp_path / "love.csv")
    rows = list(csv.DictReader(open(tmp_path / "love.csv")))
    assert len(rows) == 2 * d.p
    assert {r["phase"] for r in rows} == {"before", "after"}
    first = rep.rows[0]
    assert float(rows[0]["smd"]) == first["smd_before"] and rows[0]["covariate"] == first["name"]


# -- association statistics -----------------------------------------------------------

def test_chi_square_two_by_two():
    # x = 1 for 30 treated and 10 controls; x = 0 for 10 treated and 30 controls
    x = np.r_[np.ones(30), np.zeros(10), np.ones(10), np.zeros(30)]
    A = np.r_[np.ones(40, int), np.zeros(40, int)]
    # hand computation: every expected count is 20, each cell contributes 100 / 20
    table = np.array([[30, 10], [10, 30]])
    expected = np.full((2, 2), 20.0)
    hand = ((table - expected) ** 2 / expected).sum()
    assert hand == 20.0
    rep = association_stats(Dataset(x[:, None], A, A.astype(float)))
    row = rep.rows[0]
    assert row["kind"] == DISCRETE
    assert row["stat_treatment"] == pytest.approx(math.sqrt(20.0), rel=1e-12)
    assert row["p_treatment"] == pytest.approx(stats.chi2.sf(20.0, 1), rel=1e-9)


def test_identical_groups_t_zero():
    x = np.tile(np.arange(20.0), 2)
    A = np.r_[np.ones(20, int), np.zeros(20, int)]
    row = association_stats(Dataset(x[:, None], A, np.r_[np.zeros(20), np.ones(20)])).rows[0]
    assert row["kind"] == CONTINUOUS
    assert row["stat_treatment"] == pytest.approx(0.0, abs=1e-12)
    assert row["p_treatment"] == pytest.approx(1.0)


def test_welch_matches_hand_formula():
    rng = np.random.default_rng(5)
    x = rng.standard_normal(50) + np.r_[np.ones(20), np.zeros(30)]
    A = np.r_[np.ones(20, int), np.zeros(30, int)]
    a, b = x[:20], x[20:]
    t = (a.mean() - b.mean()) / math.sqrt(a.var(ddof=1) / 20 + b.var(ddof=1) / 30)
    row = association_stats(Dataset(x[:, None], A, rng.standard_normal(50))).rows[0]
    assert row["stat_treatment"] == pytest.approx(abs(t), rel=1e-10)


def test_constant_column_gives_na_not_failure(tmp_path):
    rng = np.random.default_rng(0)
    X = np.column_stack([np.full(40, 3.0), rng.standard_normal(40)])
    A = np.r_[np.ones(20, int), np.zeros(20, int)]
    rep = association_stats(Dataset(X, A, rng.standard_normal(40)))
    assert math.isnan(rep.rows[0]["stat_treatment"])
    assert np.isfinite(rep.rows[1]["stat_treatment"])
    rep.write_csv(tmp_path / "a.csv")
    assert list(csv.DictReader(open(tmp_path / "a.csv")))[0]["p_treatment"] == "NA"


@settings(max_examples=25)
@given(seed=st.integers(0, 2 ** 31))
def test_association_permutation_invariant_and_ranges(seed):
    rng = np.random.default_rng(seed)
    n = 60
    X = np.column_stack([rng.standard_normal(n), rng.integers(0, 3, n).astype(float)])
    A = rng.permutation(np.r_[np.ones(25, int), np.zeros(35, int)])
    Y = rng.standard_normal(n)
    d = Dataset(X, A, Y)
    perm = rng.permutation(n)
    r1, r2 = association_stats(d), association_stats(d.subset(perm))
    for key in ("stat_treatment", "p_treatment", "stat_outcome", "p_outcome"):
        c1, c2 = r1.column(key), r2.column(key)
        assert np.allclose(c1, c2, rtol=1e-9, atol=1e-12, equal_nan=True)
    for key in ("stat_treatment", "stat_outcome"):
        c = r1.column(key)
        assert (c[~np.isnan(c)] >= 0).all()
    for key in ("p_treatment", "p_outcome"):
        c = r1.column(key)
        assert ((c[~np.isnan(c)] >= 0) & (c[~np.isnan(c)] <= 1)).all()


def test_confounder_high_noise_low():
    d, roles = generate_labeled(2000, 40, seed=3)
    rep = association_stats(d)
    st_t, st_y = rep.column("stat_treatment"), rep.column("stat_outcome")
    conf = np.flatnonzero(roles == "confounder")[0]
    null = np.flatnonzero(roles == "null")
    # |t| above 3 is significant far beyond any conventional level
    assert st_t[conf] > 3 and st_y[conf] > 3
    assert np.median(np.minimum(st_t[null], st_y[null])) < 2


# -- bootstrap ---------------------------------------------------------------------------

def test_bootstrap_constant_outcome():
    rng = np.random.default_rng(0)
    d = Dataset(rng.standard_normal((80, 2)), rng.permutation(np.r_[np.ones(40, int), np.zeros(40, int)]),
                np.full(80, 4.0))
    res = bootstrap_se(d, Method.LOGISTIC_IPW, B=5, base_seed=1)
    assert np.allclose(res.estimates, 0.0, atol=1e-12)
    assert res.se == pytest.approx(0.0, abs=1e-12)


def test_bootstrap_forced_identical_resamples():
    # logistic-ipw has no internal randomness, so identical resamples give identical estimates
    d = randomized(120, np.random.default_rng(1))
    idx = np.random.default_rng(2).integers(0, 120, 120)
    res = bootstrap_se(d, Method.LOGISTIC_IPW, B=2, resample_indices=lambda b: idx)
    assert res.se == 0.0
    assert res.estimates[0] == estimate_ate(d.subset(idx), Method.LOGISTIC_IPW).tau_hat


def test_bootstrap_degenerate_resamples():
    X = np.arange(400.0)[:, None]
    A = np.zeros(400, int)
    A[0] = 1
    d = Dataset(X, A, np.arange(400.0))

    class NeverTreated:
        # generator stub whose draws always miss the single treated row
        def integers(self, lo, hi, size):
            return np.ones(size, dtype=int)

    with pytest.raises(ResampleDegenerate):
        _resample(d, NeverTreated())


def test_bootstrap_deterministic_and_threads():
    d = randomized(150, np.random.default_rng(4))
    a = bootstrap_se(d, Method.RF_KERNEL_MMD, B=4, base_seed=9, config=FAST)
    b = bootstrap_se(d, Method.RF_KERNEL_MMD, B=4, base_seed=9, config=FAST, threads=2)
    assert np.array_equal(a.estimates, b.estimates)
    assert a.se == b.se


def test_bootstrap_requires_two():
    with pytest.raises(ValueError):
        bootstrap_se(randomized(50, np.random.default_rng(0)), Method.LOGISTIC_IPW, B=1)


def test_bootstrap_se_tracks_sampling_sd():
    rng = np.random.default_rng(2024)
    fresh = [estimate_ate(randomized(500, rng), Method.LOGISTIC_IPW).tau_hat for _ in range(200)]
    mc_sd = np.std(fresh, ddof=1)
    d = randomized(500, np.random.default_rng(77))
    se = bootstrap_se(d, Method.LOGISTIC_IPW, B=200, base_seed=3).se
    assert mc_sd / 1.5 < se < 1.5 * mc_sd
