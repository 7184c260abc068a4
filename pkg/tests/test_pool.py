"""Pooling oracles: hand arithmetic, an independent reimplementation, and
distributional coverage of the pooled interval."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from trialimpute.pool import PooledEstimate, rubin_pool


def _oracle(est, var, df_com, alpha=0.05, null_value=0.0):
    # independent transliteration of the pooling formulas
    est = np.asarray(est, float)
    var = np.asarray(var, float)
    m = len(est)
    qbar = sum(est) / m
    W = sum(var) / m
    B = sum((e - qbar) ** 2 for e in est) / (m - 1)
    T = W + (1 + 1 / m) * B
    lam = (1 + 1 / m) * B / T if T > 0 else 0.0
    df_obs = (df_com + 1) / (df_com + 3) * df_com * (1 - lam)
    if lam > 0:
        df = 1.0 / (lam**2 / (m - 1) + 1.0 / df_obs)
    else:
        df = df_obs
    se = math.sqrt(T)
    tcrit = stats.t.ppf(1 - alpha / 2, df)
    p = 2 * stats.t.sf(abs((qbar - null_value) / se), df)
    return qbar, W, B, T, df, qbar - tcrit * se, qbar + tcrit * se, p


def test_hand_example():
    out = rubin_pool([1.0, 2.0, 3.0], [1.0, 1.0, 1.0], df_com=1e6)
    assert out.qbar == pytest.approx(2.0, abs=1e-12)
    assert out.within == pytest.approx(1.0, abs=1e-12)
    assert out.between == pytest.approx(1.0, abs=1e-12)
    assert out.total_var == pytest.approx(7.0 / 3.0, rel=1e-12)
    lam = (4.0 / 3.0) / (7.0 / 3.0)
    assert lam == pytest.approx(4.0 / 7.0, rel=1e-15)
    df_old = 2.0 / lam**2
    assert df_old == pytest.approx(6.125, rel=1e-12)
    df_obs = (1e6 + 1) / (1e6 + 3) * 1e6 * (1 - lam)
    assert out.df == pytest.approx(1.0 / (1.0 / df_old + 1.0 / df_obs), rel=1e-12)
    assert out.m == 3


def test_no_between_spread():
    out = rubin_pool([5.0, 5.0, 5.0, 5.0], [2.0, 2.0, 2.0, 2.0], df_com=10.0)
    assert out.between == 0.0
    assert out.total_var == pytest.approx(2.0, rel=1e-15)
    assert out.df == pytest.approx(11.0 / 13.0 * 10.0, rel=1e-12)


def test_degenerate_zero_total_variance():
    out = rubin_pool([3.0, 3.0], [0.0, 0.0], df_com=50.0)
    assert out.se == 0.0
    assert (out.ci_low, out.ci_high) == (3.0, 3.0)
    assert out.p_value == 0.0  # against null 0
    assert rubin_pool([0.0, 0.0], [0.0, 0.0], df_com=50.0).p_value == 1.0


def test_matches_independent_oracle():
    gen = np.random.default_rng(5)
    for trial in range(60):
        m = int(gen.integers(2, 40))
        est = gen.normal(3.0, 2.0, size=m)
        var = gen.chisquare(3, size=m)
        df_com = [5.0, 30.0, 197.0, 1e6][trial % 4]
        out = rubin_pool(est, var, df_com=df_com, null_value=1.5)
        q, W, B, T, df, lo, hi, p = _oracle(est, var, df_com, null_value=1.5)
        assert out.qbar == pytest.approx(q, rel=1e-10)
        assert out.within == pytest.approx(W, rel=1e-10)
        assert out.between == pytest.approx(B, rel=1e-10)
        assert out.total_var == pytest.approx(T, rel=1e-10)
        assert out.df == pytest.approx(df, rel=1e-10)
        assert out.ci_low == pytest.approx(lo, rel=1e-10)
        assert out.ci_high == pytest.approx(hi, rel=1e-10)
        assert out.p_value == pytest.approx(p, rel=1e-10)
        # structural invariants
        assert out.total_var >= out.within
        assert out.between >= 0
        assert out.ci_low <= out.qbar <= out.ci_high
        assert out.df <= df_com


@settings(max_examples=60, deadline=None)
@given(
    data=st.lists(
        st.tuples(
            st.floats(-1e6, 1e6, allow_nan=False),
            st.floats(0.0, 1e6, allow_nan=False),
        ),
        min_size=2,
        max_size=10,
    ),
    seed=st.integers(0, 2**31),
)
def test_permutation_invariance(data, seed):
    est = [d[0] for d in data]
    var = [d[1] for d in data]
    base = rubin_pool(est, var, df_com=100.0)
    perm = np.random.default_rng(seed).permutation(len(est))
    mixed = rubin_pool(np.asarray(est)[perm], np.asarray(var)[perm], df_com=100.0)
    for field in ("qbar", "within", "between", "total_var", "df"):
        a, b = getattr(base, field), getattr(mixed, field)
        assert a == pytest.approx(b, rel=1e-9, abs=1e-9)


def test_total_variance_monotone():
    gen = np.random.default_rng(6)
    est = gen.normal(size=8)
    var = gen.chisquare(2, size=8)
    base = rubin_pool(est, var, df_com=40.0).total_var
    var_up = var.copy()
    var_up[3] += 1.0
    assert rubin_pool(est, var_up, df_com=40.0).total_var > base
    spread = est.mean() + 2.0 * (est - est.mean())  # doubles B
    assert rubin_pool(spread, var, df_com=40.0).total_var > base


def test_pooled_interval_coverage():
    # half the information imputed: observed-posterior variance 1 splits into
    # within 0.5 and between 0.5, making T unbiased for Var(qbar)
    gen = np.random.default_rng(7)
    trials, m = 10_000, 30
    covered = 0
    var = np.full(m, 0.5)
    for _ in range(trials):
        center = gen.normal(0.0, 1.0)
        est = center + gen.normal(0.0, math.sqrt(0.5), size=m)
        out = rubin_pool(est, var, df_com=1e6)
        covered += out.ci_low <= 0.0 <= out.ci_high
    assert 0.94 <= covered / trials <= 0.96


def test_validation():
    with pytest.raises(ValueError):
        rubin_pool([1.0], [1.0], df_com=10.0)
    with pytest.raises(ValueError):
        rubin_pool([1.0, 2.0], [1.0, -1.0], df_com=10.0)
    with pytest.raises(ValueError):
        rubin_pool([1.0, 2.0], [1.0, 1.0], df_com=0.0)
    with pytest.raises(ValueError):
        rubin_pool([1.0, 2.0], [1.0, 1.0], df_com=10.0, alpha=1.5)
    with pytest.raises(ValueError):
        rubin_pool([1.0, 2.0], [1.0, 1.0, 1.0], df_com=10.0)


def test_se_property():
    out = rubin_pool([1.0, 2.0], [1.0, 1.0], df_com=10.0)
    assert isinstance(out, PooledEstimate)
    assert out.se == pytest.approx(math.sqrt(out.total_var), rel=1e-15)
