"""Monte Carlo predictive inference and point / interval metrics."""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from scipy import special

from . import _kernels

MAPE_EPS = 1.0


class MetricError(ValueError):
    pass


# ------------------------------------------------------------ normal quantiles


def norm_cdf(x: float) -> float:
    return float(special.ndtr(x))


def norm_ppf(p: float) -> float:
    """Inverse standard normal CDF."""
    if not 0.0 < p < 1.0:
        raise ValueError("probability must lie in (0, 1)")
    return float(special.ndtri(p))


def critical_value(alpha: float) -> float:
    """Two-sided normal critical value ``z_{1 - alpha/2}``."""
    if not 0.0 < alpha < 1.0:
        raise ValueError("alpha must lie in (0, 1)")
    return norm_ppf(1.0 - alpha / 2.0)


# ------------------------------------------------------------------ metrics


def _arrays(*arrs):
    out = [np.asarray(a, dtype=np.float64) for a in arrs]
    if len({a.shape for a in out}) != 1:
        raise MetricError(f"shape mismatch: {[a.shape for a in out]}")
    return out


def rmse(y, yhat) -> float:
    y, yhat = _arrays(y, yhat)
    return float(np.sqrt(np.mean((yhat - y) ** 2)))


def mae(y, yhat) -> float:
    y, yhat = _arrays(y, yhat)
    return float(np.mean(np.abs(yhat - y)))


def mape(y, yhat, eps: float = MAPE_EPS) -> float:
    """Percentage error over entries with ``|y| >= eps``."""
    y, yhat = _arrays(y, yhat)
    keep = np.abs(y) >= eps
    if not np.any(keep):
        raise MetricError("every target is below the MAPE mask threshold")
    return float(100.0 * np.mean(np.abs((yhat[keep] - y[keep]) / y[keep])))


def mnll(y, mu, sigma2) -> float:
    """Mean Gaussian negative log-likelihood."""
    y, mu, sigma2 = _arrays(y, mu, sigma2)
    if np.any(sigma2 <= 0):
        raise MetricError("variance must be positive")
    return float(np.mean(0.5 * np.log(2.0 * np.pi * sigma2) + (y - mu) ** 2 / (2.0 * sigma2)))


@dataclass(frozen=True)
class IntervalBounds:
    lower: np.ndarray
    upper: np.ndarray
    alpha: float
    z: float | None = None


def picp(y, bounds: IntervalBounds) -> float:
    y, lo, hi = _arrays(y, bounds.lower, bounds.upper)
    hits, _ = _kernels.interval_counts(y, lo, hi)
    return hits / y.size


def mpiw(bounds: IntervalBounds) -> float:
    lo, hi = _arrays(bounds.lower, bounds.upper)
    _, width = _kernels.interval_counts(lo, lo, hi)
    return width / lo.size


# ---------------------------------------------------------------- inference


@dataclass
class ForecastDistribution:
    mu: np.ndarray
    sigma2: np.ndarray
    aleatoric: np.ndarray
    epistemic: np.ndarray
    T: float
    variance_power: int
    n_mc: int


def intervals(dist: ForecastDistribution, alpha: float) -> IntervalBounds:
    """``mu +- z_{1 - alpha/2} * sigma``."""
    z = critical_value(alpha)
    s = np.sqrt(dist.sigma2)
    return IntervalBounds(dist.mu - z * s, dist.mu + z * s, alpha, z)


def gaussian_bounds(mu, sigma2, alpha: float) -> IntervalBounds:
    z = critical_value(alpha)
    s = np.sqrt(np.asarray(sigma2, dtype=np.float64))
    return IntervalBounds(mu - z * s, mu + z * s, alpha, z)


def worker_count() -> int:
    try:
        return max(1, int(os.environ.get("STUQ_THREADS", "1")))
    except ValueError:
        return 1


def combine_samples(mus: np.ndarray, sigma2s: np.ndarray | None, temp) -> ForecastDistribution:
    """Mix per-sample means and variances into one Gaussian per entry.

    ``mus``/``sigma2s`` have a leading sample axis. Aleatoric part is the
    temperature-scaled mean variance, epistemic part the unbiased sample
    variance of the means (zero for a single sample).
    """
    from .calibration import Temperature, apply_temperature

    temp = temp or Temperature()
    n = mus.shape[0]
    mu = mus.mean(axis=0)
    epi = mus.var(axis=0, ddof=1) if n > 1 else np.zeros_like(mu)
    if sigma2s is None:
        ale = np.zeros_like(mu)
    else:
        ale = apply_temperature(sigma2s.mean(axis=0), temp)
    return ForecastDistribution(mu, ale + epi, ale, epi, temp.T, temp.variance_power, n)


def mc_predict(
    model,
    params,
    X: np.ndarray,
    n_mc: int,
    temp=None,
    seed: int = 0,
    dropout: bool = True,
    batch_size: int = 512,
    threads: int | None = None,
) -> ForecastDistribution:
    """Draw ``n_mc`` stochastic forward passes and combine them.

    Each pass has its own RNG stream spawned from ``seed``, so results do not
    depend on ``threads``.
    """
    if n_mc < 1:
        raise ValueError("n_mc must be >= 1")
    streams = np.random.SeedSequence(seed).spawn(n_mc)
    gaussian = model.spec.head_mode == "gaussian"

    def one(j):
        rng = np.random.default_rng(streams[j])
        mus, s2s = [], []
        for i in range(0, len(X), batch_size):
            out = model.predict(X[i : i + batch_size], params, rng, dropout)
            mus.append(out["mu"])
            if gaussian:
                s2s.append(np.exp(out["logvar"]))
        return np.concatenate(mus), (np.concatenate(s2s) if gaussian else None)

    threads = threads or worker_count()
    if threads > 1 and n_mc > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(one, range(n_mc)))
    else:
        results = [one(j) for j in range(n_mc)]
    mus = np.stack([r[0] for r in results])
    s2s = np.stack([r[1] for r in results]) if gaussian else None
    return combine_samples(mus, s2s, temp)


def quantile_predict(model, params, X: np.ndarray, batch_size: int = 512) -> dict[str, np.ndarray]:
    outs = [model.predict(X[i : i + batch_size], params, None, dropout=False) for i in range(0, len(X), batch_size)]
    return {k: np.concatenate([o[k] for o in outs]) for k in outs[0]}


# -------------------------------------------------------------------- report


def _per_horizon(fn, *arrs) -> list[float]:
    tau = arrs[0].shape[-1]
    return [fn(*(a[..., k] for a in arrs)) for k in range(tau)]


def evaluation_report(
    y,
    mu,
    sigma2=None,
    bounds: IntervalBounds | None = None,
    alpha: float = 0.05,
    n_mc: int = 1,
    variance_power: int | None = None,
) -> dict:
    """Metric block; interval and likelihood fields are ``None`` when undefined.

    Arrays are (samples, nodes, horizon); horizon is the last axis.
    """
    y = np.asarray(y, dtype=np.float64)
    mu = np.asarray(mu, dtype=np.float64)
    rep = {
        "rmse": rmse(y, mu),
        "mae": mae(y, mu),
        "mape_pct": mape(y, mu),
        "mnll": None,
        "picp": None,
        "mpiw": None,
        "alpha": alpha,
        "n_mc": n_mc,
        "variance_power": variance_power,
    }
    ph = {
        "rmse": _per_horizon(rmse, y, mu),
        "mae": _per_horizon(mae, y, mu),
    }
    if sigma2 is not None:
        sigma2 = np.asarray(sigma2, dtype=np.float64)
        rep["mnll"] = mnll(y, mu, sigma2)
        ph["mnll"] = _per_horizon(mnll, y, mu, sigma2)
    if bounds is not None:
        rep["picp"] = picp(y, bounds)
        rep["mpiw"] = mpiw(bounds)
        lo, hi = bounds.lower, bounds.upper
        ph["picp"] = [picp(y[..., k], IntervalBounds(lo[..., k], hi[..., k], alpha)) for k in range(y.shape[-1])]
        ph["mpiw"] = [mpiw(IntervalBounds(lo[..., k], hi[..., k], alpha)) for k in range(y.shape[-1])]
    rep["per_horizon"] = ph
    return rep


def persistence_forecast(raw_inputs: np.ndarray, horizon: int) -> np.ndarray:
    """Repeat the last observed step across the horizon."""
    last = raw_inputs[..., -1:]
    return np.repeat(last, horizon, axis=-1)
