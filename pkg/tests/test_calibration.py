import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stuq.calibration import (
    CalibrationError,
    Temperature,
    apply_temperature,
    calibrate_temperature,
    calibration_report,
    conformal_bounds,
    conformal_calibrate,
    standardized_mse,
)
from stuq.evaluation import mnll


def _batch(r, n=500, scale=1.0):
    mu = r.standard_normal(n)
    sigma2 = r.uniform(0.2, 3.0, n)
    y = mu + np.sqrt(sigma2) * scale * r.standard_normal(n)
    return y, mu, sigma2


def test_temperature_examples():
    assert Temperature(1.0).T == 1.0
    np.testing.assert_array_equal(apply_temperature([4.0], Temperature(1.0)), [4.0])
    assert apply_temperature([4.0], Temperature(2.0, 2))[0] == 1.0
    assert apply_temperature([4.0], Temperature(2.0, 1))[0] == 2.0
    with pytest.raises(ValueError):
        Temperature(0.0)
    with pytest.raises(ValueError):
        Temperature(1.0, 3)


def test_calibrate_unit_c_gives_unit_temperature():
    r = np.random.default_rng(0)
    sigma2 = r.uniform(0.5, 2.0, 100)
    resid = r.standard_normal(100)
    resid /= np.sqrt(np.mean(resid**2))
    y = resid * np.sqrt(sigma2)
    assert standardized_mse(y, np.zeros(100), sigma2) == pytest.approx(1.0, rel=1e-12)
    assert calibrate_temperature(y, np.zeros(100), sigma2).T == pytest.approx(1.0, rel=1e-6)


def test_calibrate_sigma_twice_too_large():
    r = np.random.default_rng(1)
    e = r.standard_normal(400)
    e /= np.sqrt(np.mean(e**2))  # unit residuals exactly
    sigma2 = np.full(400, 4.0)
    assert standardized_mse(e, np.zeros(400), sigma2) == pytest.approx(0.25, rel=1e-12)
    assert calibrate_temperature(e, np.zeros(400), sigma2).T == pytest.approx(2.0, rel=1e-6)


def test_calibrate_degenerate_residuals():
    with pytest.raises(CalibrationError):
        calibrate_temperature(np.ones(5), np.ones(5), np.ones(5))


@settings(max_examples=100)
@given(seed=st.integers(0, 2**31 - 1), scale=st.floats(0.05, 20.0))
def test_calibration_closed_form(seed, scale):
    y, mu, s2 = _batch(np.random.default_rng(seed), scale=scale)
    c = standardized_mse(y, mu, s2)
    temp = calibrate_temperature(y, mu, s2)
    assert temp.T == pytest.approx(1.0 / math.sqrt(c), rel=1e-6)
    z = np.sqrt(np.mean((y - mu) ** 2 / apply_temperature(s2, temp)))
    assert abs(z - 1.0) <= 1e-6


@settings(max_examples=60)
@given(seed=st.integers(0, 2**31 - 1), k=st.floats(0.1, 10.0))
def test_rescaling_sigma_is_absorbed_by_temperature(seed, k):
    y, mu, s2 = _batch(np.random.default_rng(seed))
    a = apply_temperature(s2, calibrate_temperature(y, mu, s2))
    b = apply_temperature(s2 * k * k, calibrate_temperature(y, mu, s2 * k * k))
    np.testing.assert_allclose(a, b, rtol=1e-9)


def test_power_one_uses_same_fitted_temperature():
    y, mu, s2 = _batch(np.random.default_rng(3), scale=2.0)
    t2 = calibrate_temperature(y, mu, s2, variance_power=2)
    t1 = calibrate_temperature(y, mu, s2, variance_power=1)
    assert t1.T == pytest.approx(t2.T, rel=1e-9)
    assert t1.variance_power == 1


def test_mixed_objective_reduces_to_closed_form():
    y, mu, s2 = _batch(np.random.default_rng(4), scale=0.5)
    plain = calibrate_temperature(y, mu, s2)
    mixed = calibrate_temperature(y, mu, s2, epistemic=np.zeros_like(s2))
    assert mixed.T == pytest.approx(plain.T, rel=1e-6)


def test_mixed_objective_is_a_likelihood_minimum():
    r = np.random.default_rng(5)
    y, mu, s2 = _batch(r, scale=0.6)
    epi = r.uniform(0.0, 0.3, y.size)
    temp = calibrate_temperature(y, mu, s2, epistemic=epi)
    best = mnll(y, mu, apply_temperature(s2, temp) + epi)
    for f in (0.97, 1.03):
        other = Temperature(temp.T * f)
        assert mnll(y, mu, apply_temperature(s2, other) + epi) > best
    rep = calibration_report(y, mu, s2, temp, epistemic=epi)
    assert rep["mnll_post"] <= rep["mnll_pre"]
    assert rep["fit_target"] == "aleatoric+epistemic"


# ---------------------------------------------------------------- conformal


def test_conformal_order_statistic():
    cq = conformal_calibrate([1.0, 2.0, 3.0, 4.0], np.zeros(4), np.ones(4), 0.5)
    assert cq.q_hat == 3.0
    assert cq.n_cal == 4


@settings(max_examples=50)
@given(s=st.floats(0.1, 10.0), alpha=st.floats(0.05, 0.5))
def test_conformal_equal_scores(s, alpha):
    n = 40
    cq = conformal_calibrate(np.full(n, s), np.zeros(n), np.ones(n), alpha)
    assert cq.q_hat == pytest.approx(s, rel=1e-15)


@settings(max_examples=60)
@given(seed=st.integers(0, 2**31 - 1))
def test_conformal_monotone_in_confidence(seed):
    r = np.random.default_rng(seed)
    y, mu, s2 = _batch(r, n=200)
    qs = [conformal_calibrate(y, mu, np.sqrt(s2), a).q_hat for a in (0.5, 0.3, 0.2, 0.1, 0.05)]
    assert all(b >= a for a, b in zip(qs, qs[1:]))


def test_conformal_coverage_over_seeds():
    alpha, hits = 0.1, []
    for seed in range(200):
        r = np.random.default_rng(seed)
        y, mu, s2 = _batch(r, n=100, scale=1.7)
        cq = conformal_calibrate(y, mu, np.sqrt(s2), alpha)
        yt, mut, s2t = _batch(r, n=100, scale=1.7)
        lo, hi = conformal_bounds(mut, np.sqrt(s2t), cq)
        hits.append(np.mean((yt >= lo) & (yt <= hi)))
    assert np.mean(hits) >= 1 - alpha - 0.005


def test_conformal_validation():
    with pytest.raises(ValueError):
        conformal_calibrate(np.ones(5), np.zeros(5), np.ones(5), 0.05)
    with pytest.raises(ValueError):
        conformal_calibrate(np.ones(50), np.zeros(50), np.zeros(50), 0.1)
