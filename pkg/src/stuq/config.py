"""Run configuration: INI sections, strict validation, stable serialization."""

from __future__ import annotations

import configparser
import dataclasses
import hashlib
from dataclasses import dataclass, field, fields
from pathlib import Path

LARGE_GRAPH_NODES = 200


class ConfigError(ValueError):
    pass


@dataclass
class DataSection:
    path: str = ""
    format: str = "auto"
    history: int = 12
    horizon: int = 12
    max_steps: int = 0  # 0 keeps every step


@dataclass
class SynthSection:
    nodes: int = 8
    steps: int = 4000
    seed: int = 7
    a: float = 2.0
    b: float = 4.0


@dataclass
class ModelSection:
    hidden: int = 32
    embed_dim: str = "auto"
    num_layers: int = 1
    enc_dropout: str = "auto"
    dec_dropout: float = 0.2
    dtype: str = "float64"


@dataclass
class TrainSection:
    epochs: int = 100
    lr: float = 0.003
    weight_decay: float = 1e-6
    batch_size: int = 64
    lam: float = 0.1
    grad_clip: float = 5.0
    select_best: bool = True
    decay_mode: str = "global"


@dataclass
class AwaSection:
    lr1: float = 0.003
    lr2: float = 0.00003
    epochs: int = 20


@dataclass
class CalibrationSection:
    step: float = 0.02
    iters: int = 500
    n_mc: int = 10
    variance_power: int = 2


@dataclass
class InferenceSection:
    n_mc: int = 10
    alpha: float = 0.05


@dataclass
class RunSection:
    seed: int = 0
    out: str = "runs/default"


@dataclass
class RunConfig:
    data: DataSection = field(default_factory=DataSection)
    synth: SynthSection = field(default_factory=SynthSection)
    model: ModelSection = field(default_factory=ModelSection)
    train: TrainSection = field(default_factory=TrainSection)
    awa: AwaSection = field(default_factory=AwaSection)
    calibration: CalibrationSection = field(default_factory=CalibrationSection)
    inference: InferenceSection = field(default_factory=InferenceSection)
    run: RunSection = field(default_factory=RunSection)

    def validate(self) -> RunConfig:
        d, m, t, a, c, i = self.data, self.model, self.train, self.awa, self.calibration, self.inference
        checks = [
            (d.format in ("auto", "csv", "raw"), "data.format must be auto, csv or raw"),
            (d.history >= 1 and d.horizon >= 1, "data.history and data.horizon must be >= 1"),
            (d.max_steps >= 0, "data.max_steps must be >= 0"),
            (self.synth.nodes >= 2 and self.synth.steps > 0, "synth.nodes >= 2 and synth.steps > 0"),
            (self.synth.a > 0 and self.synth.b >= 0, "synth.a > 0 and synth.b >= 0"),
            (m.hidden >= 1 and m.num_layers >= 1, "model.hidden and model.num_layers must be >= 1"),
            (m.embed_dim == "auto" or _is_int(m.embed_dim, 1), "model.embed_dim must be auto or a positive integer"),
            (m.enc_dropout == "auto" or _is_rate(m.enc_dropout), "model.enc_dropout must be auto or in [0, 1)"),
            (0.0 <= m.dec_dropout < 1.0, "model.dec_dropout must lie in [0, 1)"),
            (m.dtype in ("float64", "float32"), "model.dtype must be float64 or float32"),
            (t.epochs >= 1 and t.batch_size >= 1, "train.epochs and train.batch_size must be >= 1"),
            (t.lr > 0 and t.weight_decay >= 0, "train.lr > 0 and train.weight_decay >= 0"),
            (0.0 < t.lam <= 1.0, "train.lam must lie in (0, 1]"),
            (t.decay_mode in ("global", "per_layer"), "train.decay_mode must be global or per_layer"),
            (a.lr1 >= a.lr2 > 0, "awa needs lr1 >= lr2 > 0"),
            (a.epochs >= 2, "awa.epochs must be >= 2"),
            (c.iters >= 1 and c.n_mc >= 1 and c.step > 0, "calibration.iters, n_mc >= 1 and step > 0"),
            (c.variance_power in (1, 2), "calibration.variance_power must be 1 or 2"),
            (i.n_mc >= 1 and 0.0 < i.alpha < 1.0, "inference.n_mc >= 1 and alpha in (0, 1)"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ConfigError(msg)
        return self

    def embed_dim_for(self, nodes: int) -> int:
        if self.model.embed_dim == "auto":
            return max(1, min(8, nodes - 1))
        return int(self.model.embed_dim)

    def enc_dropout_for(self, nodes: int) -> float:
        if self.model.enc_dropout == "auto":
            return 0.1 if nodes >= LARGE_GRAPH_NODES else 0.05
        return float(self.model.enc_dropout)

    def to_ini(self) -> str:
        lines = []
        for sec in fields(self):
            lines.append(f"[{sec.name}]")
            obj = getattr(self, sec.name)
            for f in fields(obj):
                lines.append(f"{f.name} = {_format(getattr(obj, f.name))}")
            lines.append("")
        return "\n".join(lines)

    def hash(self) -> str:
        return hashlib.sha256(self.to_ini().encode()).hexdigest()[:16]

    def with_overrides(self, seed: int | None = None, out: str | None = None) -> RunConfig:
        cfg = dataclasses.replace(self, run=dataclasses.replace(self.run))
        if seed is not None:
            cfg.run.seed = seed
        if out is not None:
            cfg.run.out = out
        return cfg


def _is_int(s: str, lo: int) -> bool:
    try:
        return int(s) >= lo
    except ValueError:
        return False


def _is_rate(s: str) -> bool:
    try:
        return 0.0 <= float(s) < 1.0
    except ValueError:
        return False


def _format(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _coerce(raw: str, default, where: str):
    try:
        if isinstance(default, bool):
            low = raw.strip().lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        return raw.strip()
    except ValueError:
        raise ConfigError(f"{where}: cannot parse {raw!r} as {type(default).__name__}") from None


def parse_config(text: str) -> RunConfig:
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    parser.optionxform = str  # keep key case
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from None
    cfg = RunConfig()
    known = {f.name: f for f in fields(cfg)}
    for section in parser.sections():
        if section not in known:
            raise ConfigError(f"unknown section [{section}]")
        obj = getattr(cfg, section)
        keys = {f.name: f for f in fields(obj)}
        for key, raw in parser.items(section):
            if key not in keys:
                raise ConfigError(f"unknown key {section}.{key}")
            setattr(obj, key, _coerce(raw, getattr(obj, key), f"{section}.{key}"))
    return cfg.validate()


def load_config(path) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    return parse_config(path.read_text())
