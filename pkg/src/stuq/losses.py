"""Training objectives.

All losses reduce by the mean over every element (batch x nodes x horizon).
Targets and predictions are in data units.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ndcore as nd
from .ndcore import Tensor
from .stgraph import QUANTILES

LOSS_MODES = ("gaussian", "quantile", "point")
DECAY_MODES = ("global", "per_layer")


@dataclass(frozen=True)
class LossConfig:
    lam: float = 0.1
    weight_decay: float = 1e-6
    head_mode: str = "gaussian"
    decay_mode: str = "global"

    def __post_init__(self):
        if not 0.0 < self.lam <= 1.0:
            raise ValueError(f"lambda must lie in (0, 1], got {self.lam}")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be non-negative")
        if self.head_mode not in LOSS_MODES:
            raise ValueError(f"head_mode must be one of {LOSS_MODES}")
        if self.decay_mode not in DECAY_MODES:
            raise ValueError(f"decay_mode must be one of {DECAY_MODES}")


def _same_shape(*ts: Tensor) -> None:
    shapes = {t.shape for t in ts}
    if len(shapes) != 1:
        raise nd.ShapeError(f"loss operands differ in shape: {sorted(shapes)}")


def hetero_nll_term(y, mu, logvar) -> Tensor:
    """Mean of ``logvar + (y - mu)^2 * exp(-logvar)``."""
    y, mu, logvar = (nd.as_tensor(t) for t in (y, mu, logvar))
    _same_shape(y, mu, logvar)
    resid2 = nd.square(nd.sub(y, mu))
    return nd.reduce_mean(nd.add(logvar, nd.mul(resid2, nd.exp(nd.mul(logvar, -1.0)))))


def mae_term(y, mu) -> Tensor:
    y, mu = nd.as_tensor(y), nd.as_tensor(mu)
    _same_shape(y, mu)
    return nd.reduce_mean(nd.absolute(nd.sub(y, mu)))


def combined_aleatoric_loss(y, mu, logvar, lam: float) -> Tensor:
    """``lam * hetero_nll_term + (1 - lam) * mean|y - mu|``."""
    if not 0.0 < lam <= 1.0:
        raise ValueError(f"lambda must lie in (0, 1], got {lam}")
    nll = hetero_nll_term(y, mu, logvar)
    if lam == 1.0:
        return nll
    return nd.add(nd.mul(nll, lam), nd.mul(mae_term(y, mu), 1.0 - lam))


def pinball_loss(y, yhat, q: float) -> Tensor:
    """Mean of ``max(q * (y - yhat), (q - 1) * (y - yhat))``."""
    if not 0.0 < q < 1.0:
        raise ValueError(f"quantile level must lie in (0, 1), got {q}")
    y, yhat = nd.as_tensor(y), nd.as_tensor(yhat)
    _same_shape(y, yhat)
    diff = nd.sub(y, yhat)
    return nd.reduce_mean(nd.maximum(nd.mul(diff, q), nd.mul(diff, q - 1.0)))


def l2_penalty(vec: np.ndarray, coef: float) -> float:
    """``coef / 2 * ||w||^2``; the value the optimizer's decay step realizes."""
    vec = np.asarray(vec, dtype=np.float64)
    return 0.5 * coef * float(vec @ vec)


def l2_term(tensors, coefs: dict[str, float]) -> Tensor:
    """Differentiable ``sum_k coef_k / 2 * ||w_k||^2`` over named tensors."""
    total = None
    for name, t in tensors.items():
        term = nd.mul(nd.reduce_sum(nd.square(t)), 0.5 * coefs[name])
        total = term if total is None else nd.add(total, term)
    return total


def decay_coefficients(names, config: LossConfig, enc_dropout: float, dec_dropout: float) -> dict[str, float]:
    """Weight-decay coefficient per parameter name.

    ``global`` uses ``weight_decay`` everywhere. ``per_layer`` divides by the
    dropout rate feeding each layer (encoder gates, decoder heads), falling
    back to the global value where that rate is zero.
    """
    out = {}
    for name in names:
        coef = config.weight_decay
        if config.decay_mode == "per_layer":
            rate = enc_dropout if name.startswith("enc") else dec_dropout if name.startswith("head") else 0.0
            if rate > 0:
                coef = config.weight_decay / rate
        out[name] = coef
    return out


def data_loss(outputs: dict[str, Tensor], y, config: LossConfig) -> Tensor:
    """Differentiable data term for the configured head mode."""
    y = nd.as_tensor(y)
    if config.head_mode == "gaussian":
        return combined_aleatoric_loss(y, outputs["mu"], outputs["logvar"], config.lam)
    if config.head_mode == "point":
        return mae_term(y, outputs["mu"])
    total = None
    for i, q in enumerate(QUANTILES):
        term = pinball_loss(y, outputs[f"q{i}"], q)
        total = term if total is None else nd.add(total, term)
    return total


def total_loss(y, mu, logvar, config: LossConfig) -> tuple[Tensor, float]:
    """Data term of the combined objective plus the decay coefficient.

    The L2 part is applied by the optimizer as decoupled weight decay, so it
    is not added to the returned tensor; see :func:`l2_penalty`.
    """
    return combined_aleatoric_loss(y, mu, logvar, config.lam), config.weight_decay
