"""Pipeline stages and baseline runners.

Every stage reads its inputs from the run directory and writes its outputs
there, so stages can be re-run in isolation. Stage RNGs are derived from the
run seed and a fixed per-stage tag.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import math
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import dataio
from .calibration import (
    OptimizerConfig,
    Temperature,
    calibrate_temperature,
    calibration_report,
    conformal_bounds,
    conformal_calibrate,
)
from .config import ConfigError, RunConfig
from .dataio import DataError, SplitBundle, SynthConfig
from .evaluation import (
    IntervalBounds,
    evaluation_report,
    gaussian_bounds,
    intervals,
    mae,
    mc_predict,
    persistence_forecast,
    quantile_predict,
)
from .losses import LossConfig
from .stgraph import Forecaster, ModelSpec
from .trainer import (
    CheckpointError,
    TrainConfig,
    awa_retrain,
    load_checkpoint,
    pretrain,
    save_checkpoint,
)

log = logging.getLogger(__name__)

STAGES = ("train", "retrain-awa", "calibrate", "evaluate")
BASELINE_MODES = ("point", "quantile", "mve", "mcdo", "combined", "ts", "conformal")
_STAGE_TAGS = {"train": 1, "retrain-awa": 2, "calibrate": 3, "evaluate": 4, "predict": 5, "baseline": 6}


def stage_seed(cfg: RunConfig, stage: str, extra: int = 0) -> np.random.SeedSequence:
    return np.random.SeedSequence([cfg.run.seed, _STAGE_TAGS[stage], extra])


def stage_rng(cfg: RunConfig, stage: str, extra: int = 0) -> np.random.Generator:
    return np.random.default_rng(stage_seed(cfg, stage, extra))


def stage_int_seed(cfg: RunConfig, stage: str, extra: int = 0) -> int:
    return int(stage_seed(cfg, stage, extra).generate_state(1)[0])


def write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def file_sha256(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# ---------------------------------------------------------------- data


def out_dir(cfg: RunConfig) -> Path:
    return Path(cfg.run.out)


def series_path(cfg: RunConfig) -> Path:
    return Path(cfg.data.path) if cfg.data.path else out_dir(cfg) / "series.csv"


def run_synth(cfg: RunConfig) -> dict:
    s = cfg.synth
    series, truth = dataio.synth_generate(
        SynthConfig(nodes=s.nodes, steps=s.steps, seed=s.seed, noise_base=s.a, noise_scale=s.b)
    )
    path = series_path(cfg)
    dataio.write_series(series, path, None if cfg.data.format == "auto" else cfg.data.format)
    write_json(out_dir(cfg) / "truth.json", truth.to_json())
    return {"series": str(path), "nodes": series.node_count, "steps": series.step_count}


def load_bundle(cfg: RunConfig) -> SplitBundle:
    path = series_path(cfg)
    if not path.exists():
        raise DataError(f"series file not found: {path} (run `stuq synth` or set data.path)")
    m = dataio.load_series(path, None if cfg.data.format == "auto" else cfg.data.format)
    if cfg.data.max_steps:
        m = dataio.SeriesMatrix(m.values[: cfg.data.max_steps], m.node_ids, m.interval_minutes)
    if m.step_count <= cfg.data.history + cfg.data.horizon:
        raise DataError(f"series has {m.step_count} steps; need more than history + horizon")
    w = dataio.make_windows(m, cfg.data.history, cfg.data.horizon)
    return dataio.split_and_normalize(w)


# ------------------------------------------------------------ model builders


@dataclass(frozen=True)
class Variant:
    """Which pieces of the full method a run uses."""

    head_mode: str = "gaussian"
    dropout: bool = True
    lam: float | None = None  # None -> config value


VARIANTS = {
    "deepstuq": Variant(),
    "combined": Variant(),
    "mve": Variant(dropout=False),
    "point": Variant(head_mode="point", dropout=False),
    "mcdo": Variant(head_mode="point", dropout=True),
    "quantile": Variant(head_mode="quantile", dropout=False),
}


def model_spec(cfg: RunConfig, nodes: int, variant: Variant) -> ModelSpec:
    try:
        return _model_spec(cfg, nodes, variant)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def _model_spec(cfg: RunConfig, nodes: int, variant: Variant) -> ModelSpec:
    return ModelSpec(
        num_nodes=nodes,
        history=cfg.data.history,
        horizon=cfg.data.horizon,
        hidden=cfg.model.hidden,
        embed_dim=cfg.embed_dim_for(nodes),
        num_layers=cfg.model.num_layers,
        enc_dropout=cfg.enc_dropout_for(nodes) if variant.dropout else 0.0,
        dec_dropout=cfg.model.dec_dropout if variant.dropout else 0.0,
        head_mode=variant.head_mode,
        dtype=cfg.model.dtype,
    )


def train_config(cfg: RunConfig, variant: Variant) -> TrainConfig:
    t = cfg.train
    return TrainConfig(
        epochs=t.epochs,
        lr=t.lr,
        batch_size=t.batch_size,
        grad_clip=t.grad_clip,
        select_best=t.select_best,
        awa_lr1=cfg.awa.lr1,
        awa_lr2=cfg.awa.lr2,
        awa_epochs=cfg.awa.epochs,
        loss=LossConfig(lam=variant.lam or t.lam, weight_decay=t.weight_decay,
                        head_mode=variant.head_mode, decay_mode=t.decay_mode),
    )


def _meta(model: Forecaster, variant: str) -> dict:
    return {"spec": dataclasses.asdict(model.spec), "mean": model.mean, "std": model.std, "variant": variant}


def load_model(stem: Path) -> tuple[Forecaster, object, dict]:
    ck = load_checkpoint(stem)
    meta = ck.meta
    model = Forecaster(ModelSpec(**meta["spec"]), meta["mean"], meta["std"])
    return model, ck.params, meta


def _require_ckpt(stem: Path) -> None:
    if not stem.with_suffix(".json").exists() or not stem.with_suffix(".bin").exists():
        raise CheckpointError(f"missing checkpoint {stem} (run the preceding stage first)")


# ----------------------------------------------------------------- stages


def stage_train(cfg: RunConfig, variant_name: str = "deepstuq", stem: Path | None = None) -> dict:
    data = load_bundle(cfg)
    variant = VARIANTS[variant_name]
    model = Forecaster(model_spec(cfg, data.windows.X.shape[1], variant), data.mean, data.std)
    rng = stage_rng(cfg, "train", _variant_code(variant_name))
    res = pretrain(model, data, train_config(cfg, variant), rng)
    stem = stem or out_dir(cfg) / "pretrain"
    save_checkpoint(stem, res.params, res.optimizer, rng, _meta(model, variant_name))
    report = {"train_loss": res.train_loss, "val_loss": res.val_loss, "best_epoch": res.best_epoch}
    write_json(stem.with_name(stem.name + "_history.json"), report)
    return report


def stage_awa(cfg: RunConfig) -> dict:
    src = out_dir(cfg) / "pretrain"
    _require_ckpt(src)
    data = load_bundle(cfg)
    model, params, meta = load_model(src)
    rng = stage_rng(cfg, "retrain-awa")
    res = awa_retrain(model, data, train_config(cfg, VARIANTS["deepstuq"]), rng, params)
    save_checkpoint(out_dir(cfg) / "awa", res.params, None, rng, dict(meta, n_models=res.awa.n_models))
    report = {"n_models": res.awa.n_models, "train_loss": res.train_loss}
    write_json(out_dir(cfg) / "awa_history.json", report)
    return report


def _predict_split(cfg, model, params, data, part, n_mc, temp, stage, dropout=True):
    X = data.inputs(part)
    if not model.spec.enc_dropout and not model.spec.dec_dropout:
        n_mc, dropout = 1, False
    return mc_predict(model, params, X, n_mc, temp, seed=stage_int_seed(cfg, stage), dropout=dropout)


def stage_calibrate(cfg: RunConfig, stem: Path | None = None, report_name: str = "calibration.json") -> dict:
    stem = stem or out_dir(cfg) / "awa"
    _require_ckpt(stem)
    data = load_bundle(cfg)
    model, params, _ = load_model(stem)
    dist = _predict_split(cfg, model, params, data, "val", cfg.calibration.n_mc, None, "calibrate")
    y = data.targets("val")
    # T rescales only the aleatoric mean, but the likelihood is that of the
    # full predictive variance it feeds into
    temp = calibrate_temperature(
        y, dist.mu, dist.aleatoric,
        OptimizerConfig(step=cfg.calibration.step, iters=cfg.calibration.iters),
        variance_power=cfg.calibration.variance_power,
        epistemic=dist.epistemic,
    )
    rep = calibration_report(y, dist.mu, dist.aleatoric, temp, epistemic=dist.epistemic)
    rep["n_mc"] = dist.n_mc
    write_json(out_dir(cfg) / report_name, rep)
    return rep


def read_temperature(path: Path) -> Temperature:
    if not path.exists():
        raise CheckpointError(f"missing calibration report {path} (run `stuq calibrate` first)")
    rep = json.loads(path.read_text())
    return Temperature(rep["T"], rep["variance_power"])


def stage_evaluate(cfg: RunConfig) -> dict:
    stem = out_dir(cfg) / "awa"
    _require_ckpt(stem)
    temp = read_temperature(out_dir(cfg) / "calibration.json")
    data = load_bundle(cfg)
    model, params, _ = load_model(stem)
    dist = _predict_split(cfg, model, params, data, "test", cfg.inference.n_mc, temp, "evaluate")
    y = data.targets("test")
    rep = evaluation_report(y, dist.mu, dist.sigma2, intervals(dist, cfg.inference.alpha),
                            cfg.inference.alpha, dist.n_mc, temp.variance_power)
    rep["method"] = "deepstuq"
    write_json(out_dir(cfg) / "evaluation.json", rep)
    return rep


def stage_predict(cfg: RunConfig, part: str = "test") -> Path:
    stem = out_dir(cfg) / "awa"
    _require_ckpt(stem)
    temp = read_temperature(out_dir(cfg) / "calibration.json")
    data = load_bundle(cfg)
    model, params, _ = load_model(stem)
    dist = _predict_split(cfg, model, params, data, part, cfg.inference.n_mc, temp, "predict")
    b = intervals(dist, cfg.inference.alpha)
    lo, _ = data.ranges[part]
    origins = data.windows.origins[lo : lo + len(dist.mu)]
    path = out_dir(cfg) / "predictions.csv"
    rows = ["origin,node,horizon,mu,sigma2,y_L,y_U"]
    S, V, H = dist.mu.shape
    for s in range(S):
        for v in range(V):
            for h in range(H):
                vals = (dist.mu[s, v, h], dist.sigma2[s, v, h], b.lower[s, v, h], b.upper[s, v, h])
                rows.append(f"{origins[s]},{v},{h + 1}," + ",".join(repr(float(x)) for x in vals))
    path.write_text("\n".join(rows) + "\n")
    return path


def persistence_report(cfg: RunConfig, data: SplitBundle | None = None) -> dict:
    data = data or load_bundle(cfg)
    y = data.targets("test")
    return {"mae": mae(y, persistence_forecast(data.raw_inputs("test"), y.shape[-1]))}


def run_stages(cfg: RunConfig, stages) -> dict:
    """Run ``stages`` (pipeline order enforced) and write ``run_report.json``."""
    unknown = [s for s in stages if s not in STAGES]
    if unknown:
        raise ValueError(f"unknown stages {unknown}")
    ordered = [s for s in STAGES if s in stages]
    fns = {"train": stage_train, "retrain-awa": stage_awa, "calibrate": stage_calibrate, "evaluate": stage_evaluate}
    timings = {}
    for s in ordered:
        t0 = time.perf_counter()
        fns[s](cfg)
        timings[s] = round(time.perf_counter() - t0, 3)
    return write_run_report(cfg, timings)


def write_run_report(cfg: RunConfig, timings: dict) -> dict:
    od = out_dir(cfg)
    artifacts = {}
    for name in ("pretrain.bin", "awa.bin", "calibration.json", "evaluation.json"):
        if (od / name).exists():
            artifacts[name] = file_sha256(od / name)
    report = {
        "config_hash": cfg.hash(),
        "seed": cfg.run.seed,
        "config": cfg.to_ini(),
        "artifacts": artifacts,
        "timings_s": timings,
    }
    for key, name in (("metrics", "evaluation.json"), ("calibration", "calibration.json")):
        p = od / name
        report[key] = json.loads(p.read_text()) if p.exists() else None
    write_json(od / "run_report.json", report)
    return report


# --------------------------------------------------------------- baselines


def _variant_code(name: str) -> int:
    return sorted(VARIANTS).index(name)


def _baseline_stem(cfg: RunConfig, base: str) -> Path:
    # distinct from the baseline_<mode>.json report names
    return out_dir(cfg) / f"model_{base}"


def _ensure_trained(cfg: RunConfig, base: str) -> Path:
    stem = _baseline_stem(cfg, base)
    if not stem.with_suffix(".json").exists():
        stage_train(cfg, base, stem)
    return stem


def run_baseline(cfg: RunConfig, mode: str) -> dict:
    """Train (or reuse) the checkpoint behind ``mode`` and evaluate on test."""
    if mode not in BASELINE_MODES:
        raise ValueError(f"unknown baseline mode {mode!r}; choose from {BASELINE_MODES}")
    base = "mve" if mode in ("mve", "ts", "conformal") else mode
    stem = _ensure_trained(cfg, base)
    data = load_bundle(cfg)
    model, params, _ = load_model(stem)
    y = data.targets("test")
    alpha = cfg.inference.alpha
    Xt = data.inputs("test")
    seed = stage_int_seed(cfg, "baseline", BASELINE_MODES.index(mode))
    extra: dict = {}
    if mode == "point":
        dist = mc_predict(model, params, Xt, 1, seed=seed, dropout=False)
        rep = evaluation_report(y, dist.mu, None, None, alpha, 1, None)
    elif mode == "quantile":
        q = quantile_predict(model, params, Xt)
        lo, hi = np.minimum(q["q0"], q["q2"]), np.maximum(q["q0"], q["q2"])
        rep = evaluation_report(y, q["q1"], None, IntervalBounds(lo, hi, alpha), alpha, 1, None)
    elif mode in ("mve", "ts", "conformal"):
        dist = mc_predict(model, params, Xt, 1, seed=seed, dropout=False)
        if mode == "mve":
            rep = evaluation_report(y, dist.mu, dist.sigma2, intervals(dist, alpha), alpha, 1, None)
        else:
            val = mc_predict(model, params, data.inputs("val"), 1, seed=seed, dropout=False)
            yv = data.targets("val")
            if mode == "ts":
                temp = calibrate_temperature(
                    yv, val.mu, val.sigma2,
                    OptimizerConfig(cfg.calibration.step, cfg.calibration.iters),
                    cfg.calibration.variance_power,
                )
                extra["calibration"] = calibration_report(yv, val.mu, val.sigma2, temp)
                dist = mc_predict(model, params, Xt, 1, temp, seed=seed, dropout=False)
                rep = evaluation_report(y, dist.mu, dist.sigma2, intervals(dist, alpha), alpha, 1,
                                        temp.variance_power)
            else:
                cq = conformal_calibrate(yv, val.mu, np.sqrt(val.sigma2), alpha)
                extra["conformal"] = cq.to_json()
                lo, hi = conformal_bounds(dist.mu, np.sqrt(dist.sigma2), cq)
                rep = evaluation_report(y, dist.mu, dist.sigma2, IntervalBounds(lo, hi, alpha), alpha, 1, None)
    else:  # mcdo, combined
        n_mc = cfg.inference.n_mc
        dist = mc_predict(model, params, Xt, n_mc, seed=seed, dropout=True)
        if np.any(dist.sigma2 <= 0):
            # epistemic-only variance can underflow to zero where samples agree
            s2 = np.maximum(dist.sigma2, np.finfo(float).tiny)
        else:
            s2 = dist.sigma2
        rep = evaluation_report(y, dist.mu, s2, gaussian_bounds(dist.mu, s2, alpha), alpha, n_mc,
                                2 if mode == "combined" else None)
    rep["method"] = mode
    rep.update(extra)
    write_json(out_dir(cfg) / f"baseline_{mode}.json", rep)
    return rep


def metric_block_bytes(rep: dict) -> bytes:
    return json.dumps(rep, sort_keys=True).encode()


def is_finite_number(x) -> bool:
    return isinstance(x, (int, float)) and math.isfinite(x)
