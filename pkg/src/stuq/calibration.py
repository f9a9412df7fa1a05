"""Post-hoc calibration of predictive variances on a held-out split."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
from scipy.optimize import minimize

from .evaluation import mnll


class CalibrationError(RuntimeError):
    def __init__(self, message: str, best: float | None = None):
        super().__init__(message)
        self.best = best


@dataclass(frozen=True)
class Temperature:
    T: float = 1.0
    variance_power: int = 2

    def __post_init__(self):
        if not self.T > 0:
            raise ValueError(f"temperature must be positive, got {self.T}")
        if self.variance_power not in (1, 2):
            raise ValueError("variance_power must be 1 or 2")


def apply_temperature(sigma2, temp: Temperature) -> np.ndarray:
    """``sigma2 / T**variance_power``."""
    return np.asarray(sigma2, dtype=np.float64) / temp.T**temp.variance_power


def standardized_mse(y, mu, sigma2) -> float:
    """``c = mean((y - mu)^2 / sigma2)``."""
    y, mu, sigma2 = (np.asarray(a, dtype=np.float64) for a in (y, mu, sigma2))
    if np.any(sigma2 <= 0):
        raise ValueError("variances must be positive")
    return float(np.mean((y - mu) ** 2 / sigma2))


def temperature_objective(T: float, c: float) -> float:
    """Mean of ``-log T^2 + T^2 (y - mu)^2 / sigma^2`` written through ``c``."""
    return -math.log(T * T) + T * T * c


@dataclass(frozen=True)
class OptimizerConfig:
    step: float = 0.02
    iters: int = 500
    tol: float = 1e-12


_U_BOUND = 15.0  # |log T| cap for the mixed objective


def calibrate_temperature(
    y,
    mu,
    sigma2,
    cfg: OptimizerConfig = OptimizerConfig(),
    variance_power: int = 2,
    epistemic=None,
) -> Temperature:
    """Fit ``T`` by L-BFGS on ``u = log T``, starting from ``T = 1``.

    Without ``epistemic`` the objective depends on the data only through
    ``c``, so the minimizer is ``T = 1 / sqrt(c)`` (power 2); tests use that
    as the oracle. With ``epistemic`` the fitted variance is
    ``sigma2 / T**p + epistemic``, the form the predictive variance takes at
    inference, and the same likelihood is minimised numerically.
    ``cfg.step`` is kept for config echo; scipy's line search picks steps.
    """
    y, mu, sigma2 = (np.asarray(a, dtype=np.float64) for a in (y, mu, sigma2))
    if y.size < 2:
        raise ValueError("need at least two calibration points")
    if np.any(sigma2 <= 0):
        raise ValueError("variances must be positive")
    c = standardized_mse(y, mu, sigma2)
    if c <= 0:
        raise CalibrationError("zero residuals: calibration objective is unbounded below")
    p = variance_power
    opts = {"maxiter": cfg.iters, "gtol": cfg.tol, "ftol": 1e-15}

    if epistemic is None:
        def f(u):
            u = float(u[0])
            e = math.exp(2.0 * u)
            return -2.0 * u + e * c, np.array([-2.0 + 2.0 * c * e])

        res = minimize(f, np.zeros(1), jac=True, method="L-BFGS-B", options=opts)
        u = float(res.x[0])
        # Newton polish on the 1-d objective (f'' = 4 c e^{2u}) to full precision
        for _ in range(2):
            e = math.exp(2.0 * u)
            u -= (-2.0 + 2.0 * c * e) / (4.0 * c * e)
        grad = abs(f(np.array([u]))[1][0])
        if not math.isfinite(u) or grad > 1e-6:
            raise CalibrationError(f"L-BFGS did not converge ({res.message})", best=math.exp(u))
        # the fit is always in T^2; power 1 then applies it to variances verbatim
        return Temperature(math.exp(u), p)

    epi = np.asarray(epistemic, dtype=np.float64)
    if epi.shape != sigma2.shape or np.any(epi < 0):
        raise ValueError("epistemic must match sigma2 and be non-negative")
    r2 = ((y - mu) ** 2).ravel()
    a, e0 = sigma2.ravel(), epi.ravel()

    def g(u):
        u = float(u[0])
        scaled = a * math.exp(-p * u)
        s = scaled + e0
        val = float(np.mean(np.log(s) + r2 / s))
        d = float(np.mean((1.0 / s - r2 / (s * s)) * (-p * scaled)))
        return val, np.array([d])

    res = minimize(g, np.zeros(1), jac=True, method="L-BFGS-B",
                   bounds=[(-_U_BOUND, _U_BOUND)], options=opts)
    u = float(res.x[0])
    grad = abs(g(res.x)[1][0])
    at_bound = abs(u) >= _U_BOUND - 1e-9
    if not math.isfinite(u) or (grad > 1e-6 and not at_bound):
        raise CalibrationError(f"L-BFGS did not converge ({res.message})", best=math.exp(u))
    return Temperature(math.exp(u), p)


def calibration_report(y, mu, sigma2, temp: Temperature, epistemic=None) -> dict:
    c = standardized_mse(y, mu, sigma2)
    epi = 0.0 if epistemic is None else np.asarray(epistemic, dtype=np.float64)
    return {
        "T": temp.T,
        "variance_power": temp.variance_power,
        "c": c,
        "n_cal": int(np.asarray(y).size),
        "fit_target": "aleatoric" if epistemic is None else "aleatoric+epistemic",
        "mnll_pre": mnll(y, mu, np.asarray(sigma2) + epi),
        "mnll_post": mnll(y, mu, apply_temperature(sigma2, temp) + epi),
    }


# ---------------------------------------------------------------- conformal


@dataclass(frozen=True)
class ConformalQuantile:
    q_hat: float
    alpha: float
    n_cal: int
    score: str = "abs_residual_over_sigma"

    def to_json(self) -> dict:
        return asdict(self)


def conformal_scores(y, mu, sigma) -> np.ndarray:
    y, mu, sigma = (np.asarray(a, dtype=np.float64).ravel() for a in (y, mu, sigma))
    if np.any(sigma <= 0):
        raise ValueError("sigma must be positive")
    return np.abs(y - mu) / sigma


def conformal_calibrate(y, mu, sigma, alpha: float) -> ConformalQuantile:
    """Split-conformal scale factor for intervals ``mu +- q_hat * sigma``.

    ``q_hat`` is the ``ceil((n + 1)(1 - alpha))``-th smallest score.
    """
    if not 0.0 < alpha < 1.0:
        raise ValueError("alpha must lie in (0, 1)")
    scores = conformal_scores(y, mu, sigma)
    n = scores.size
    # guard against (n + 1)(1 - alpha) landing a rounding error above an integer
    k = math.ceil((n + 1) * (1.0 - alpha) - 1e-9)
    if n < math.ceil(1.0 / alpha) or k > n:
        raise ValueError(f"{n} calibration points are too few for alpha={alpha}")
    q = float(np.partition(scores, k - 1)[k - 1])
    return ConformalQuantile(q, alpha, n)


def conformal_bounds(mu, sigma, cq: ConformalQuantile) -> tuple[np.ndarray, np.ndarray]:
    mu, sigma = np.asarray(mu, dtype=np.float64), np.asarray(sigma, dtype=np.float64)
    return mu - cq.q_hat * sigma, mu + cq.q_hat * sigma
