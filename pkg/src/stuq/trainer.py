"""Pre-training and weight-averaging re-training loops."""

from __future__ import annotations

import hashlib
import json
import logging
import math
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import ndcore as nd
from .dataio import SplitBundle
from .losses import LossConfig, data_loss, decay_coefficients
from .stgraph import Forecaster, ModelParams

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1


class TrainingDivergence(RuntimeError):
    """Non-finite loss or gradient; carries the last finite parameters."""

    def __init__(self, message: str, last_good: ModelParams | None = None):
        super().__init__(message)
        self.last_good = last_good


@dataclass
class TrainConfig:
    epochs: int = 100
    lr: float = 0.003
    batch_size: int = 64
    grad_clip: float = 5.0
    select_best: bool = True
    awa_lr1: float = 0.003
    awa_lr2: float = 0.00003
    awa_epochs: int = 20
    loss: LossConfig = field(default_factory=LossConfig)


# ------------------------------------------------------------------- Adam


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0
    lr: float = 0.003
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    decay: dict[str, float] = field(default_factory=dict)

    @classmethod
    def for_params(cls, params: ModelParams, lr: float, decay: dict[str, float] | None = None) -> OptimizerState:
        zeros = {k: np.zeros_like(v) for k, v in params.arrays.items()}
        return cls(m=zeros, v={k: np.zeros_like(v) for k, v in params.arrays.items()},
                   lr=lr, decay=dict(decay or {}))


def adam_step(params: ModelParams, grads: dict[str, np.ndarray], state: OptimizerState) -> ModelParams:
    """Bias-corrected Adam with decoupled weight decay, in place on ``params``."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise TrainingDivergence(f"non-finite gradient for {name!r} at step {state.step + 1}")
        if g.shape != params.arrays[name].shape:
            raise nd.ShapeError(f"gradient shape {g.shape} != parameter shape for {name!r}")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for name, w in params.arrays.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(w)
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        step = (m / c1) / (np.sqrt(v / c2) + state.eps)
        wd = state.decay.get(name, 0.0)
        if wd:
            step = step + wd * w
        w -= state.lr * step
    return params


def clip_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / norm
        for g in grads.values():
            g *= scale
    return norm


# -------------------------------------------------------- learning rates


@dataclass(frozen=True)
class LrSchedule:
    lr1: float
    lr2: float
    n_iteration: int

    def __post_init__(self):
        if not self.lr1 >= self.lr2 > 0:
            raise ValueError("need lr1 >= lr2 > 0")
        if self.n_iteration < 1:
            raise ValueError("n_iteration must be >= 1")


def cosine_lr(n_i: int, sched: LrSchedule) -> float:
    """Cosine decay from ``lr1`` at ``n_i = 0`` to ``lr2`` at ``n_i = n_iteration``."""
    if not 0 <= n_i <= sched.n_iteration:
        raise ValueError(f"iteration {n_i} outside [0, {sched.n_iteration}]")
    if n_i == 0:
        return sched.lr1
    if n_i == sched.n_iteration:
        return sched.lr2
    return sched.lr2 + 0.5 * (sched.lr1 - sched.lr2) * (1.0 + math.cos(math.pi * n_i / sched.n_iteration))


def epoch_lrs(epoch: int, n_batches: int, lr1: float, lr2: float) -> list[float]:
    """Per-iteration rates of one re-training epoch.

    Even epochs decay ``lr1 -> lr2`` across their iterations; odd epochs
    hold ``lr2``.
    """
    if epoch % 2 == 1:
        return [lr2] * n_batches
    if n_batches == 1:
        return [lr1]
    sched = LrSchedule(lr1, lr2, n_batches - 1)
    return [cosine_lr(i, sched) for i in range(n_batches)]


# ---------------------------------------------------------- averaging


@dataclass
class AwaState:
    w_awa: np.ndarray | None = None
    n_models: int = 0


def awa_update(awa: AwaState, w: np.ndarray) -> AwaState:
    w = np.asarray(w, dtype=np.float64)
    if awa.w_awa is None or awa.n_models == 0:
        return AwaState(w.copy(), 1)
    if awa.w_awa.shape != w.shape:
        raise ValueError(f"snapshot length {w.size} != average length {awa.w_awa.size}")
    n = awa.n_models
    return AwaState((awa.w_awa * n + w) / (n + 1), n + 1)


# ------------------------------------------------------------- loops


@dataclass
class TrainResult:
    params: ModelParams
    train_loss: list[float]
    val_loss: list[float]
    best_epoch: int
    optimizer: OptimizerState | None = None


def batches(n: int, batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    order = rng.permutation(n)
    return [order[i : i + batch_size] for i in range(0, n, batch_size)]


def loss_and_grads(model: Forecaster, params: ModelParams, X, Y, loss_cfg: LossConfig, rng, dropout=True):
    tp = params.tensors(requires_grad=True)
    out = model.forward(nd.Tensor(X.astype(model.spec.np_dtype, copy=False)), tp, rng, dropout)
    loss = data_loss(out, Y.astype(model.spec.np_dtype, copy=False), loss_cfg)
    nd.backward(loss)
    grads = {k: t.grad if t.grad is not None else np.zeros_like(t.data) for k, t in tp.items()}
    return loss.item(), grads


def evaluate_loss(model: Forecaster, params: ModelParams, X, Y, loss_cfg: LossConfig, batch_size: int = 256) -> float:
    """Deterministic (dropout off) mean loss over a split."""
    if len(X) == 0:
        return float("nan")
    total = 0.0
    tp = params.tensors(requires_grad=False)
    for i in range(0, len(X), batch_size):
        xb, yb = X[i : i + batch_size], Y[i : i + batch_size]
        out = model.forward(nd.Tensor(xb.astype(model.spec.np_dtype, copy=False)), tp, None, dropout=False)
        total += data_loss(out, yb, loss_cfg).item() * len(xb)
    return total / len(X)


def _decay_for(model: Forecaster, params: ModelParams, cfg: TrainConfig) -> dict[str, float]:
    return decay_coefficients(params.names(), cfg.loss, model.spec.enc_dropout, model.spec.dec_dropout)


def _train_epoch(model, params, opt, X, Y, cfg, rng, lrs=None) -> float:
    groups = batches(len(X), cfg.batch_size, rng)
    total = 0.0
    for k, idx in enumerate(groups):
        if lrs is not None:
            opt.lr = lrs[k]
        try:
            loss, grads = loss_and_grads(model, params, X[idx], Y[idx], cfg.loss, rng)
        except nd.NonFiniteError as exc:
            raise TrainingDivergence(f"forward/backward produced non-finite values: {exc}") from exc
        if not math.isfinite(loss):
            raise TrainingDivergence(f"non-finite loss {loss}")
        clip_global_norm(grads, cfg.grad_clip)
        adam_step(params, grads, opt)
        total += loss * len(idx)
    return total / len(X)


def pretrain(
    model: Forecaster,
    data: SplitBundle,
    cfg: TrainConfig,
    rng: np.random.Generator,
    params: ModelParams | None = None,
) -> TrainResult:
    """Minibatch Adam on the configured loss with dropout active."""
    X, Y = data.inputs("train"), data.targets("train")
    if len(X) == 0:
        raise ValueError("empty training split")
    Xv, Yv = data.inputs("val"), data.targets("val")
    params = params.copy() if params is not None else model.init(rng)
    opt = OptimizerState.for_params(params, cfg.lr, _decay_for(model, params, cfg))
    hist_t: list[float] = []
    hist_v: list[float] = []
    best = (math.inf, -1, params.copy())
    last_good = params.copy()
    for epoch in range(cfg.epochs):
        try:
            tl = _train_epoch(model, params, opt, X, Y, cfg, rng)
        except TrainingDivergence as exc:
            exc.last_good = best[2] if best[1] >= 0 else last_good
            raise
        vl = evaluate_loss(model, params, Xv, Yv, cfg.loss) if len(Xv) else tl
        hist_t.append(tl)
        hist_v.append(vl)
        last_good = params.copy()
        if vl < best[0]:
            best = (vl, epoch, params.copy())
        log.info("pretrain epoch %d train %.6g val %.6g", epoch, tl, vl)
    if cfg.select_best and best[1] >= 0:
        final, best_epoch = best[2], best[1]
    else:
        final, best_epoch = params, len(hist_t) - 1
    return TrainResult(final, hist_t, hist_v, best_epoch, opt)


@dataclass
class AwaResult:
    params: ModelParams
    awa: AwaState
    snapshots: list[np.ndarray]
    lr_history: list[float]
    train_loss: list[float]


def normalization_refresh(params: ModelParams) -> ModelParams:
    """Hook for recomputing normalization-layer statistics after averaging.

    The forecaster has no normalization layers, so this returns ``params``.
    """
    return params


def awa_retrain(
    model: Forecaster,
    data: SplitBundle,
    cfg: TrainConfig,
    rng: np.random.Generator,
    params: ModelParams,
) -> AwaResult:
    """Alternate cosine-decay and constant-rate epochs, averaging after each pair.

    Epoch ``e`` even: rates decay ``lr1 -> lr2`` over its iterations.
    Epoch ``e`` odd: rate ``lr2``; at its end the weights join the average.
    """
    if cfg.awa_epochs < 2:
        raise ValueError("awa_epochs must be >= 2")
    X, Y = data.inputs("train"), data.targets("train")
    if len(X) == 0:
        raise ValueError("empty training split")
    params = params.copy()
    opt = OptimizerState.for_params(params, cfg.awa_lr1, _decay_for(model, params, cfg))
    n_batches = math.ceil(len(X) / cfg.batch_size)
    awa = AwaState()
    snapshots: list[np.ndarray] = []
    lr_hist: list[float] = []
    losses: list[float] = []
    for epoch in range(cfg.awa_epochs):
        lrs = epoch_lrs(epoch, n_batches, cfg.awa_lr1, cfg.awa_lr2)
        lr_hist.extend(lrs)
        try:
            losses.append(_train_epoch(model, params, opt, X, Y, cfg, rng, lrs))
        except TrainingDivergence as exc:
            exc.last_good = params.unflatten(awa.w_awa) if awa.n_models else None
            raise
        if epoch % 2 == 1:
            snap = params.flatten().astype(np.float64)
            snapshots.append(snap)
            awa = awa_update(awa, snap)
            normalization_refresh(params)
        log.info("awa epoch %d loss %.6g models %d", epoch, losses[-1], awa.n_models)
    if awa.n_models == 0:
        raise RuntimeError("no snapshots were averaged")
    averaged = normalization_refresh(params.unflatten(awa.w_awa))
    return AwaResult(averaged, awa, snapshots, lr_hist, losses)


# ------------------------------------------------------------ checkpoints


def _rng_state(rng: np.random.Generator | None):
    return None if rng is None else rng.bit_generator.state


def save_checkpoint(
    stem,
    params: ModelParams,
    optimizer: OptimizerState | None = None,
    rng: np.random.Generator | None = None,
    meta: dict | None = None,
) -> tuple[Path, Path]:
    """Write ``<stem>.bin`` (raw little-endian arrays) and ``<stem>.json``.

    The binary holds the flat parameter vector followed, when present, by the
    Adam first and second moments in the same order. The JSON manifest gives
    shapes, dtype, section offsets, optimizer scalars and RNG state.
    """
    stem = Path(stem)
    stem.parent.mkdir(parents=True, exist_ok=True)
    dtype = next(iter(params.arrays.values())).dtype
    le = dtype.newbyteorder("<")
    sections = {"params": params.flatten()}
    if optimizer is not None:
        sections["adam_m"] = np.concatenate([optimizer.m[k].reshape(-1) for k in params.names()])
        sections["adam_v"] = np.concatenate([optimizer.v[k].reshape(-1) for k in params.names()])
    offsets = {}
    pos = 0
    blobs = []
    for name, arr in sections.items():
        offsets[name] = [pos, int(arr.size)]
        pos += arr.size
        blobs.append(arr.astype(le).tobytes())
    bin_path = stem.with_suffix(".bin")
    payload = b"".join(blobs)
    bin_path.write_bytes(payload)
    manifest = {
        "format": "stuq-checkpoint",
        "version": CHECKPOINT_VERSION,
        "dtype": le.str,
        "order": params.names(),
        "shapes": params.shapes(),
        "sections": offsets,
        "sha256": hashlib.sha256(payload).hexdigest(),
        "optimizer": None if optimizer is None else {
            "step": optimizer.step, "lr": optimizer.lr, "beta1": optimizer.beta1,
            "beta2": optimizer.beta2, "eps": optimizer.eps, "decay": optimizer.decay,
        },
        "rng_state": _rng_state(rng),
        "meta": meta or {},
    }
    json_path = stem.with_suffix(".json")
    json_path.write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return bin_path, json_path


@dataclass
class Checkpoint:
    params: ModelParams
    optimizer: OptimizerState | None
    rng_state: dict | None
    meta: dict

    def rng(self) -> np.random.Generator | None:
        if self.rng_state is None:
            return None
        bg = getattr(np.random, self.rng_state["bit_generator"])()
        bg.state = self.rng_state
        return np.random.Generator(bg)


class CheckpointError(FileNotFoundError):
    pass


def load_checkpoint(stem) -> Checkpoint:
    stem = Path(stem)
    json_path, bin_path = stem.with_suffix(".json"), stem.with_suffix(".bin")
    if not json_path.exists() or not bin_path.exists():
        raise CheckpointError(f"missing checkpoint {stem}")
    manifest = json.loads(json_path.read_text())
    if manifest.get("format") != "stuq-checkpoint" or manifest.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{json_path}: unsupported checkpoint format")
    payload = bin_path.read_bytes()
    if hashlib.sha256(payload).hexdigest() != manifest["sha256"]:
        raise CheckpointError(f"{bin_path}: checksum mismatch")
    dtype = np.dtype(manifest["dtype"])
    flat = np.frombuffer(payload, dtype=dtype)

    def section(name):
        off, n = manifest["sections"][name]
        return flat[off : off + n].astype(dtype.newbyteorder("="))

    template = ModelParams(OrderedDict(
        (k, np.zeros(manifest["shapes"][k], dtype=dtype.newbyteorder("="))) for k in manifest["order"]
    ))
    params = template.unflatten(section("params"))
    opt = None
    if manifest["optimizer"] is not None:
        o = manifest["optimizer"]
        m = template.unflatten(section("adam_m")).arrays
        v = template.unflatten(section("adam_v")).arrays
        opt = OptimizerState(dict(m), dict(v), o["step"], o["lr"], o["beta1"], o["beta2"], o["eps"], o["decay"])
    return Checkpoint(params, opt, manifest["rng_state"], manifest["meta"])
