import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.stats import chi2

from nnchange.errors import NonFinite, ParseError, TooShort
from nnchange.preprocessing import (
    DEFAULT_RHO,
    PriceSeries,
    ar_aic,
    combine_orders,
    fuller_transform,
    prepare_series,
    read_series_csv,
    returns,
    select_ar_order,
)


def _ar(coefs, n, rng, burn=300):
    coefs = np.asarray(coefs, float)
    p = coefs.size
    x = np.zeros(n + burn + p)
    e = rng.standard_normal(x.size)
    for t in range(p, x.size):
        x[t] = coefs @ x[t - p : t][::-1] + e[t]
    return x[-n:]


def test_returns_hand():
    np.testing.assert_allclose(returns([100.0, 110.0]), [0.10])
    np.testing.assert_allclose(returns([100.0, 90.0]), [-0.10])
    np.testing.assert_array_equal(returns([5.0] * 6), np.zeros(5))


def test_returns_errors():
    with pytest.raises(ValueError):
        returns([100.0, 0.0, 3.0])
    with pytest.raises(ValueError):
        PriceSeries([1.0, -2.0])
    with pytest.raises(TooShort):
        returns([100.0])


def test_fuller_zero_return_hand():
    # var([0, 1, -1], ddof=1) = 1, so c = 0.02 and X_0 = log(0.02) - 1
    x = fuller_transform([0.0, 1.0, -1.0], rho=0.02)
    assert x[0] == pytest.approx(-4.9120, abs=5e-5)
    assert x[0] == pytest.approx(np.log(0.02) - 1, rel=1e-14)


def test_fuller_rho_zero_is_log_square():
    r = np.array([0.5, -0.1, 2.0])
    np.testing.assert_allclose(fuller_transform(r, 0.0), np.log(r**2), rtol=1e-15)
    with pytest.raises(NonFinite):
        fuller_transform([0.0, 0.1], 0.0)


def test_fuller_errors():
    with pytest.raises(ValueError):
        fuller_transform([0.1, 0.2], -0.1)
    with pytest.raises(ValueError):
        fuller_transform([0.3, 0.3, 0.3])
    assert DEFAULT_RHO == 0.02


@given(st.lists(st.floats(-1, 1), min_size=3, max_size=30).filter(lambda v: np.var(v) > 1e-6))
def test_fuller_finite_and_monotone(r):
    r = np.asarray(r)
    x = fuller_transform(r)
    assert np.all(np.isfinite(x))
    order = np.argsort(r * r, kind="stable")
    u, xs = (r * r)[order], x[order]
    assert np.all(np.diff(xs) >= 0)
    assert np.all(np.diff(xs)[np.diff(u) > 1e-8] > 0)


def test_prepare_series_pipeline():
    prices = [100.0, 101.0, 99.0, 102.0, 102.0]
    r = returns(prices)
    np.testing.assert_allclose(prepare_series(prices, use_returns=True), r)
    np.testing.assert_allclose(prepare_series(prices, True, True), fuller_transform(r))
    np.testing.assert_array_equal(prepare_series(prices), prices)


def test_ar_aic_common_sample_and_rss_monotonicity(rng):
    x = rng.standard_normal(200)
    # at a common start, adding a lag cannot raise RSS, so AIC rises by at most 2
    a = [ar_aic(x, k, 4) for k in range(5)]
    assert all(b <= c + 2 + 1e-12 for c, b in zip(a, a[1:]))
    with pytest.raises(ValueError):
        ar_aic(x, 3, start=2)


def test_both_min_six_three():
    assert combine_orders(6, 3) == 3
    rng = np.random.default_rng(21)
    first = _ar([0, 0, 0, 0, 0, 0.6], 600, rng)
    last = _ar([0, 0, 0.6], 600, rng)
    x = np.concatenate([first, last])
    assert select_ar_order(x, 8, "first_segment") == 6
    assert select_ar_order(x, 8, "last_segment") == 3
    assert select_ar_order(x, 8, "both_min") == 3


# AIC keeps a fixed overfitting probability as n grows, so these rates hold
# only for the small maximal orders used here.
def test_white_noise_order_zero():
    rng = np.random.default_rng(22)
    hits = sum(select_ar_order(rng.standard_normal(600), 1, "first_segment") == 0 for _ in range(400))
    assert hits / 400 >= 0.8


def test_aic_overfit_rate_matches_chi_square():
    # AR(0) against AR(1): AIC keeps order 0 iff the LR statistic is below 2
    rng = np.random.default_rng(24)
    rate = np.mean([select_ar_order(rng.standard_normal(600), 1, "first_segment") == 0 for _ in range(2000)])
    assert rate == pytest.approx(chi2.cdf(2.0, 1), abs=3 * np.sqrt(0.16 * 0.84 / 2000))


def test_ar2_order_two():
    rng = np.random.default_rng(23)
    hits = sum(select_ar_order(_ar([0.6, -0.3], 600, rng), 2, "first_segment") == 2 for _ in range(200))
    assert hits / 200 >= 0.9
    larger = [select_ar_order(_ar([0.6, -0.3], 600, rng), 6, "first_segment") for _ in range(100)]
    assert min(larger) == 2


def test_order_selection_errors_and_determinism(rng):
    x = rng.standard_normal(700)
    assert select_ar_order(x, 5) == select_ar_order(x, 5)
    with pytest.raises(TooShort):
        select_ar_order(x[:9], 4)
    with pytest.raises(ValueError):
        select_ar_order(x, 3, split="middle")
    short = rng.standard_normal(100)
    assert select_ar_order(short, 3, "first_segment") == select_ar_order(short, 3, "last_segment")


def test_read_single_column_with_header(tmp_path):
    f = tmp_path / "s.csv"
    f.write_text("price\n1.5\n\n2.25\n3\n")
    values, dates = read_series_csv(f)
    np.testing.assert_array_equal(values, [1.5, 2.25, 3.0])
    assert dates is None


def test_read_two_columns(tmp_path):
    f = tmp_path / "s.csv"
    f.write_text("2020-01-01,100\n2020-01-02,101.5\n")
    values, dates = read_series_csv(f)
    np.testing.assert_array_equal(values, [100.0, 101.5])
    assert dates == ("2020-01-01", "2020-01-02")


def test_read_reports_line_numbers(tmp_path):
    f = tmp_path / "s.csv"
    f.write_text("value\n1.0\nabc\n")
    with pytest.raises(ParseError, match="line 3"):
        read_series_csv(f)
    f.write_text("1,2,3\n")
    with pytest.raises(ParseError):
        read_series_csv(f)
    f.write_text("1.0\nnan\n")
    with pytest.raises(ParseError, match="line 2"):
        read_series_csv(f)
    f.write_text("")
    with pytest.raises(ParseError):
        read_series_csv(f)
