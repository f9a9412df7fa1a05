import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stuq.calibration import Temperature
from stuq.evaluation import (
    ForecastDistribution,
    IntervalBounds,
    MetricError,
    combine_samples,
    critical_value,
    evaluation_report,
    gaussian_bounds,
    intervals,
    mae,
    mape,
    mc_predict,
    mnll,
    mpiw,
    norm_cdf,
    norm_ppf,
    persistence_forecast,
    picp,
    rmse,
)
from stuq.stgraph import Forecaster, ModelSpec

HALF_LOG_2PI = 0.5 * math.log(2 * math.pi)


# ------------------------------------------------------- loop references


def loop_rmse(y, f):
    s, n = 0.0, 0
    for a, b in zip(y.ravel(), f.ravel()):
        s += (b - a) ** 2
        n += 1
    return math.sqrt(s / n)


def loop_mae(y, f):
    return sum(abs(b - a) for a, b in zip(y.ravel(), f.ravel())) / y.size


def loop_mape(y, f, eps=1.0):
    terms = [abs((b - a) / a) for a, b in zip(y.ravel(), f.ravel()) if abs(a) >= eps]
    return 100.0 * sum(terms) / len(terms)


def loop_mnll(y, mu, s2):
    tot = 0.0
    for a, m, v in zip(y.ravel(), mu.ravel(), s2.ravel()):
        tot += 0.5 * math.log(2 * math.pi * v) + (a - m) ** 2 / (2 * v)
    return tot / y.size


def loop_picp_mpiw(y, lo, hi):
    hits, width = 0, 0.0
    for a, l, h in zip(y.ravel(), lo.ravel(), hi.ravel()):
        hits += l <= a <= h
        width += h - l
    return hits / y.size, width / y.size


@settings(max_examples=100)
@given(seed=st.integers(0, 2**31 - 1))
def test_metrics_match_loop_references(seed):
    r = np.random.default_rng(seed)
    shape = tuple(r.integers(1, 6, size=3))
    y = r.normal(0, 20, shape)
    y.ravel()[0] = 25.0  # keep at least one entry above the MAPE threshold
    f = y + r.normal(0, 5, shape)
    s2 = r.uniform(0.1, 30, shape)
    lo, hi = f - r.uniform(0, 10, shape), f + r.uniform(0, 10, shape)
    b = IntervalBounds(lo, hi, 0.05)
    assert rmse(y, f) == pytest.approx(loop_rmse(y, f), rel=1e-12)
    assert mae(y, f) == pytest.approx(loop_mae(y, f), rel=1e-12)
    assert mape(y, f) == pytest.approx(loop_mape(y, f), rel=1e-12)
    assert mnll(y, f, s2) == pytest.approx(loop_mnll(y, f, s2), rel=1e-12)
    p_ref, w_ref = loop_picp_mpiw(y, lo, hi)
    assert picp(y, b) == p_ref
    assert mpiw(b) == pytest.approx(w_ref, rel=1e-12)


def test_metric_examples():
    y = np.array([1.0, 2.0, 3.0])
    assert rmse(y, y) == mae(y, y) == mape(y, y) == 0.0
    assert rmse([0.0, 3.0], [4.0, 3.0]) == pytest.approx(math.sqrt(8))
    assert mae([0.0, 3.0], [4.0, 3.0]) == 2.0
    assert mape([10.0], [11.0]) == pytest.approx(10.0)
    with pytest.raises(MetricError):
        mape([0.1], [1.0])
    with pytest.raises(MetricError):
        rmse([1.0], [1.0, 2.0])


def test_mnll_examples():
    assert abs(mnll([0.0], [0.0], [1.0]) - HALF_LOG_2PI) <= 1e-12
    assert mnll([1.0], [0.0], [1.0]) == pytest.approx(HALF_LOG_2PI + 0.5, rel=1e-14)
    vals = [mnll([1.0], [0.0], [v]) for v in (1.0, 10.0, 100.0, 1e4, 1e8)]
    assert all(b > a for a, b in zip(vals, vals[1:]))
    with pytest.raises(MetricError):
        mnll([0.0], [0.0], [0.0])


def test_picp_mpiw_examples():
    b = IntervalBounds(np.array([-1.0, 8.0]), np.array([1.0, 9.0]), 0.05)
    assert picp([0.0, 10.0], b) == 0.5
    assert mpiw(b) == 1.5
    wide = IntervalBounds(np.full(2, -1e9), np.full(2, 1e9), 0.05)
    assert picp([0.0, 10.0], wide) == 1.0


# ------------------------------------------------------------ quantiles


def _bisect_ppf(p):
    lo, hi = -10.0, 10.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if 0.5 * math.erfc(-mid / math.sqrt(2)) < p:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


@settings(max_examples=100)
@given(p=st.floats(1e-10, 0.5))
def test_norm_ppf_matches_bisection(p):
    # lower half only: 1 - p loses digits near 1 in double precision
    assert norm_ppf(p) == pytest.approx(_bisect_ppf(p), abs=1e-9)
    assert norm_cdf(norm_ppf(p)) == pytest.approx(p, rel=1e-9)
    assert norm_ppf(1 - p) == pytest.approx(-norm_ppf(p), abs=1e-6)


def test_critical_values():
    assert critical_value(0.05) == pytest.approx(1.959963984540054, rel=1e-12)
    assert round(critical_value(0.05), 2) == 1.96
    assert critical_value(0.32) == pytest.approx(0.9945, abs=1e-4)
    with pytest.raises(ValueError):
        critical_value(0.0)


def _dist(mu, s2):
    mu, s2 = np.asarray(mu, float), np.asarray(s2, float)
    return ForecastDistribution(mu, s2, s2, np.zeros_like(s2), 1.0, 2, 1)


def test_interval_examples():
    b = intervals(_dist([0.0], [1.0]), 0.05)
    assert b.lower[0] == pytest.approx(-1.96, abs=1e-3)
    assert b.upper[0] == pytest.approx(1.96, abs=1e-3)
    d = intervals(_dist([3.0], [0.0]), 0.05)
    assert d.lower[0] == d.upper[0] == 3.0


@settings(max_examples=50)
@given(seed=st.integers(0, 2**31 - 1))
def test_picp_mpiw_monotone_in_alpha(seed):
    r = np.random.default_rng(seed)
    mu, s2 = r.standard_normal(300), r.uniform(0.1, 2.0, 300)
    y = mu + r.standard_normal(300) * 1.3
    prev_p, prev_w = -1.0, -1.0
    for alpha in (0.5, 0.3, 0.1, 0.05, 0.01):
        b = gaussian_bounds(mu, s2, alpha)
        p, w = picp(y, b), mpiw(b)
        assert p >= prev_p
        assert w > prev_w
        prev_p, prev_w = p, w


def test_interval_soundness_on_known_gaussian():
    r = np.random.default_rng(123)
    mu, sigma = r.normal(0, 5, 100_000), r.uniform(0.5, 3.0, 100_000)
    y = mu + sigma * r.standard_normal(100_000)
    assert abs(picp(y, gaussian_bounds(mu, sigma**2, 0.05)) - 0.95) <= 0.01


# ---------------------------------------------------------------- mc


def test_combine_samples_hand_example():
    mus = np.array([[1.0], [3.0]])
    s2s = np.array([[1.0], [1.0]])
    d = combine_samples(mus, s2s, Temperature(1.0, 2))
    assert d.mu[0] == 2.0
    assert d.sigma2[0] == 3.0
    assert d.epistemic[0] == 2.0


def test_combine_single_sample_has_no_epistemic():
    d = combine_samples(np.array([[1.0, 2.0]]), np.array([[0.5, 0.5]]), None)
    np.testing.assert_array_equal(d.epistemic, [0.0, 0.0])


@settings(max_examples=50)
@given(seed=st.integers(0, 2**31 - 1), T=st.floats(0.2, 5.0))
def test_predictive_variance_dominates_aleatoric(seed, T):
    r = np.random.default_rng(seed)
    d = combine_samples(r.standard_normal((7, 5)), r.uniform(0.1, 2, (7, 5)), Temperature(T))
    assert np.all(d.sigma2 >= d.aleatoric)


@pytest.fixture(scope="module")
def small_model():
    spec = ModelSpec(num_nodes=4, history=3, horizon=2, hidden=4, embed_dim=2)
    model = Forecaster(spec, 1.0, 2.0)
    return model, model.init(np.random.default_rng(0))


def test_mc_predict_without_dropout_has_no_epistemic(small_model):
    model, params = small_model
    X = np.random.default_rng(1).standard_normal((5, 4, 3))
    d = mc_predict(model, params, X, 4, Temperature(2.0), dropout=False)
    assert np.all(d.epistemic == 0.0)
    out = model.predict(X, params, dropout=False)
    np.testing.assert_allclose(d.sigma2, np.exp(out["logvar"]) / 4.0, rtol=1e-14)


def test_mc_predict_thread_independent(small_model):
    model, params = small_model
    X = np.random.default_rng(2).standard_normal((5, 4, 3))
    a = mc_predict(model, params, X, 6, seed=3, threads=1)
    b = mc_predict(model, params, X, 6, seed=3, threads=3)
    np.testing.assert_array_equal(a.mu, b.mu)
    np.testing.assert_array_equal(a.sigma2, b.sigma2)
    assert np.any(a.epistemic > 0)
    with pytest.raises(ValueError):
        mc_predict(model, params, X, 0)


def test_report_schema_and_nulls():
    r = np.random.default_rng(4)
    y = r.normal(50, 10, (6, 3, 4))
    mu = y + r.normal(0, 2, y.shape)
    rep = evaluation_report(y, mu)
    assert rep["picp"] is None and rep["mpiw"] is None and rep["mnll"] is None
    assert len(rep["per_horizon"]["mae"]) == 4
    b = gaussian_bounds(mu, np.full(y.shape, 4.0), 0.05)
    full = evaluation_report(y, mu, np.full(y.shape, 4.0), b, 0.05, 10, 2)
    assert 0.0 <= full["picp"] <= 1.0
    assert full["per_horizon"]["picp"][0] == picp(y[..., 0], IntervalBounds(b.lower[..., 0], b.upper[..., 0], 0.05))


def test_persistence_forecast():
    x = np.arange(12.0).reshape(1, 2, 6)
    p = persistence_forecast(x, 3)
    np.testing.assert_array_equal(p, [[[5.0] * 3, [11.0] * 3]])
