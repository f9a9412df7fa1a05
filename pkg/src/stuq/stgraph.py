"""Adaptive-graph recurrent forecaster.

Data flow for one forward pass over a batch ``X`` of shape (B, V, T_h)::

    A_hat = softmax_rows(relu(E @ E.T))          once per pass
    h_0 = 0
    for t in 1..T_h:  h_t = agcrn_cell(x_t, h_{t-1})
    mu, logvar = decode(h_T)

Inputs are z-scored; the heads emit normalized-scale values that are mapped
back to data units with the training mean/std, so loss and metrics see
physical units.
"""

from __future__ import annotations

import math
from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np

from . import ndcore as nd
from .ndcore import DropoutMask, Tensor

LOGVAR_CLAMP = 10.0
HEAD_MODES = ("gaussian", "point", "quantile")
QUANTILES = (0.025, 0.5, 0.975)


@dataclass(frozen=True)
class ModelSpec:
    num_nodes: int
    history: int = 12
    horizon: int = 12
    hidden: int = 32
    embed_dim: int = 8
    num_layers: int = 1
    input_dim: int = 1
    enc_dropout: float = 0.05
    dec_dropout: float = 0.2
    head_mode: str = "gaussian"
    dtype: str = "float64"

    def __post_init__(self):
        if self.num_nodes < 2:
            raise ValueError("need at least two nodes")
        if not 1 <= self.embed_dim < self.num_nodes:
            raise ValueError(
                f"embed_dim must satisfy 1 <= d < num_nodes ({self.num_nodes}), got {self.embed_dim}"
            )
        if self.head_mode not in HEAD_MODES:
            raise ValueError(f"head_mode must be one of {HEAD_MODES}")
        for name in ("enc_dropout", "dec_dropout"):
            rate = getattr(self, name)
            if not 0.0 <= rate < 1.0:
                raise ValueError(f"{name} must lie in [0, 1), got {rate}")
        if min(self.history, self.horizon, self.hidden, self.num_layers, self.input_dim) < 1:
            raise ValueError("history, horizon, hidden, num_layers and input_dim must be >= 1")

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)


@dataclass
class ModelParams:
    """Named parameter arrays with a stable flat-vector view."""

    arrays: "OrderedDict[str, np.ndarray]" = field(default_factory=OrderedDict)

    def names(self) -> list[str]:
        return list(self.arrays)

    def shapes(self) -> dict[str, list[int]]:
        return {k: list(v.shape) for k, v in self.arrays.items()}

    def size(self) -> int:
        return sum(v.size for v in self.arrays.values())

    def flatten(self) -> np.ndarray:
        return np.concatenate([v.reshape(-1) for v in self.arrays.values()])

    def unflatten(self, vec: np.ndarray) -> ModelParams:
        vec = np.asarray(vec)
        if vec.size != self.size():
            raise ValueError(f"vector length {vec.size} != parameter count {self.size()}")
        out = OrderedDict()
        pos = 0
        for k, v in self.arrays.items():
            out[k] = vec[pos : pos + v.size].reshape(v.shape).astype(v.dtype, copy=True)
            pos += v.size
        return ModelParams(out)

    def copy(self) -> ModelParams:
        return ModelParams(OrderedDict((k, v.copy()) for k, v in self.arrays.items()))

    def tensors(self, requires_grad: bool = True) -> dict[str, Tensor]:
        return {k: Tensor(v, requires_grad=requires_grad, name=k) for k, v in self.arrays.items()}


def _uniform(rng, shape, fan_in, dtype):
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def gate_names(layer: int) -> list[str]:
    return [f"enc{layer}.{g}" for g in ("z", "r", "c")]


def init_params(spec: ModelSpec, rng: np.random.Generator) -> ModelParams:
    dt = spec.np_dtype
    d, H = spec.embed_dim, spec.hidden
    p: OrderedDict[str, np.ndarray] = OrderedDict()
    p["embed"] = (0.1 * rng.standard_normal((spec.num_nodes, d))).astype(dt)
    for layer in range(spec.num_layers):
        c_in = (spec.input_dim if layer == 0 else H) + H
        for g in gate_names(layer):
            p[f"{g}.w_pool"] = _uniform(rng, (d, c_in, H), c_in, dt)
            p[f"{g}.b_pool"] = _uniform(rng, (d, H), c_in, dt)
    tau = spec.horizon
    if spec.head_mode == "quantile":
        heads = [f"q{i}" for i in range(len(QUANTILES))]
    elif spec.head_mode == "point":
        heads = ["mu"]
    else:
        heads = ["mu", "logvar"]
    for h in heads:
        p[f"head.{h}.w"] = _uniform(rng, (H, tau), H, dt)
        p[f"head.{h}.b"] = _uniform(rng, (tau,), H, dt)
    return ModelParams(p)


# ------------------------------------------------------------------ layers


def adaptive_adjacency(embed: Tensor) -> Tensor:
    """Row-stochastic adjacency ``softmax_rows(relu(E E^T))``."""
    return nd.softmax_rows(nd.relu(nd.matmul(embed, nd.transpose(embed))))


def propagation(a_hat: Tensor) -> Tensor:
    """``I + A_hat``."""
    return nd.add(a_hat, np.eye(a_hat.shape[0], dtype=a_hat.data.dtype))


def node_weights(embed: Tensor, w_pool: Tensor, b_pool: Tensor) -> tuple[Tensor, Tensor]:
    """Per-node weights ``E W_pool`` (V, C_in, C_out) and biases ``E b_pool`` (V, C_out)."""
    d, c_in, c_out = w_pool.shape
    w = nd.reshape(nd.matmul(embed, nd.reshape(w_pool, (d, c_in * c_out))), (embed.shape[0], c_in, c_out))
    b = nd.matmul(embed, b_pool)
    return w, b


def napl_gcn(
    z_in: Tensor,
    prop: Tensor,
    weights: tuple[Tensor, Tensor],
    mask: DropoutMask | None,
    activation: str,
    propagated: Tensor | None = None,
) -> Tensor:
    """``activation(mask * ((I + A_hat) Z (E W) + E b))``.

    ``prop`` is ``I + A_hat``; pass ``propagated`` to reuse an already
    computed ``(I + A_hat) Z``.
    """
    w, b = weights
    pz = nd.matmul(prop, z_in) if propagated is None else propagated
    pre = nd.add(nd.node_contract(pz, w), b)
    if activation in ("sigmoid", "tanh"):
        return nd.masked_activation(pre, mask, activation)
    if mask is not None:
        pre = nd.apply_dropout(pre, mask)
    return nd.unary(activation, pre)


@dataclass
class CellWeights:
    """Per-node gate weights; ``zr`` stacks the update and reset gates."""

    zr: tuple[Tensor, Tensor]
    c: tuple[Tensor, Tensor]
    hidden: int

    @classmethod
    def build(cls, embed: Tensor, tp: dict[str, Tensor], layer: int) -> CellWeights:
        z, r, c = gate_names(layer)
        w_zr = nd.concat([tp[f"{z}.w_pool"], tp[f"{r}.w_pool"]], axis=-1)
        b_zr = nd.concat([tp[f"{z}.b_pool"], tp[f"{r}.b_pool"]], axis=-1)
        hidden = tp[f"{c}.b_pool"].shape[-1]
        return cls(node_weights(embed, w_zr, b_zr),
                   node_weights(embed, tp[f"{c}.w_pool"], tp[f"{c}.b_pool"]), hidden)


def agcrn_cell(
    x_t: Tensor,
    h_prev: Tensor,
    cell: CellWeights,
    prop: Tensor,
    masks: tuple[DropoutMask | None, DropoutMask | None] = (None, None),
) -> Tensor:
    """One recurrent step; ``masks`` cover the stacked z/r gates and the candidate."""
    H = cell.hidden
    xh = nd.concat([x_t, h_prev], axis=-1)
    zr = napl_gcn(xh, prop, cell.zr, masks[0], "sigmoid")
    z, r = zr[..., :H], zr[..., H:]
    xc = nd.concat([x_t, nd.mul(r, h_prev)], axis=-1)
    c = napl_gcn(xc, prop, cell.c, masks[1], "tanh")
    return nd.gated_update(z, h_prev, c)


# ------------------------------------------------------------------- model


class Forecaster:
    """Binds a ``ModelSpec`` to the functional forward pass."""

    def __init__(self, spec: ModelSpec, mean: float = 0.0, std: float = 1.0):
        if std <= 0:
            raise ValueError("std must be positive")
        self.spec = spec
        self.mean = float(mean)
        self.std = float(std)

    def init(self, rng: np.random.Generator) -> ModelParams:
        return init_params(self.spec, rng)

    def _keep(self, rate: float, dropout: bool) -> float:
        return 1.0 - rate if dropout else 1.0

    def _mask(self, shape, keep: float, rng) -> DropoutMask | None:
        if keep >= 1.0:
            return None
        return DropoutMask.sample(shape, keep, rng, dtype=self.spec.np_dtype)

    def encode(
        self,
        X: Tensor,
        tp: dict[str, Tensor],
        rng: np.random.Generator | None,
        dropout: bool = True,
    ) -> Tensor:
        """Run the recurrent encoder; returns the final hidden state (B, V, H)."""
        spec = self.spec
        X = nd.as_tensor(X)
        if X.ndim == 2:
            X = nd.reshape(X, (1,) + X.shape)
        B, V, T = X.shape
        if T < 1:
            raise ValueError("empty input sequence")
        if V != spec.num_nodes:
            raise nd.ShapeError(f"input has {V} nodes, model expects {spec.num_nodes}")
        keep = self._keep(spec.enc_dropout, dropout)
        if keep < 1.0 and rng is None:
            raise ValueError("dropout requires an rng")
        embed = tp["embed"]
        prop = propagation(adaptive_adjacency(embed))
        H = spec.hidden
        dt = spec.np_dtype
        seq = [nd.reshape(X[:, :, t], (B, V, 1)) for t in range(T)]
        h = None
        for layer in range(spec.num_layers):
            cell = CellWeights.build(embed, tp, layer)
            h = Tensor(np.zeros((B, V, H), dtype=dt))
            # one draw per layer: (T, B, V, 3H) split into z/r and candidate masks
            block = self._mask((T, B, V, 3 * H), keep, rng)
            outs = []
            for t, x_t in enumerate(seq):
                if block is None:
                    masks = (None, None)
                else:
                    mv = block.values[t]
                    masks = (DropoutMask(mv[..., : 2 * H], keep), DropoutMask(mv[..., 2 * H :], keep))
                h = agcrn_cell(x_t, h, cell, prop, masks)
                outs.append(h)
            seq = outs
        return h

    def decode(
        self,
        h: Tensor,
        tp: dict[str, Tensor],
        rng: np.random.Generator | None,
        dropout: bool = True,
    ) -> dict[str, Tensor]:
        """Heads over the final hidden state, in data units.

        Gaussian mode returns ``mu`` and ``logvar``; point mode ``mu``;
        quantile mode ``q0``, ``q1``, ``q2`` for the levels in ``QUANTILES``.
        """
        spec = self.spec
        keep = self._keep(spec.dec_dropout, dropout)
        mask = self._mask(h.shape, keep, rng)
        if mask is not None:
            h = nd.apply_dropout(h, mask)

        def head(name):
            return nd.add(nd.matmul(h, tp[f"head.{name}.w"]), tp[f"head.{name}.b"])

        out = {}
        if spec.head_mode == "quantile":
            for i in range(len(QUANTILES)):
                out[f"q{i}"] = nd.add(nd.mul(head(f"q{i}"), self.std), self.mean)
            return out
        out["mu"] = nd.add(nd.mul(head("mu"), self.std), self.mean)
        if spec.head_mode == "gaussian":
            lv = nd.clip(head("logvar"), -LOGVAR_CLAMP, LOGVAR_CLAMP)
            out["logvar"] = nd.add(lv, 2.0 * math.log(self.std))
        return out

    def forward(
        self,
        X,
        tp: dict[str, Tensor],
        rng: np.random.Generator | None = None,
        dropout: bool = True,
    ) -> dict[str, Tensor]:
        h = self.encode(X, tp, rng, dropout)
        return self.decode(h, tp, rng, dropout)

    def predict(self, X: np.ndarray, params: ModelParams, rng=None, dropout: bool = True) -> dict[str, np.ndarray]:
        """Forward pass without gradient tracking; returns numpy arrays."""
        tp = params.tensors(requires_grad=False)
        out = self.forward(Tensor(np.asarray(X, dtype=self.spec.np_dtype)), tp, rng, dropout)
        return {k: v.data for k, v in out.items()}
