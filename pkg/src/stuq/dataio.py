"""Series ingestion, windowing, splitting and a synthetic traffic generator."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

# Table-level statistics of the public PEMS exports (nodes, steps).
PEMS_STATS = {
    "PEMS03": {"nodes": 358, "edges": 547, "steps": 26208},
    "PEMS04": {"nodes": 307, "edges": 340, "steps": 16992},
    "PEMS07": {"nodes": 883, "edges": 866, "steps": 28224},
    "PEMS08": {"nodes": 170, "edges": 295, "steps": 17856},
}


class DataError(ValueError):
    """Raised for malformed, inconsistent or insufficient input data."""


@dataclass
class SeriesMatrix:
    values: np.ndarray  # (steps, nodes)
    node_ids: list[str] = field(default_factory=list)
    interval_minutes: int = 5

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise DataError(f"series must be 2-d (steps x nodes), got shape {self.values.shape}")
        bad = np.argwhere(~np.isfinite(self.values))
        if bad.size:
            r, c = bad[0]
            raise DataError(f"non-finite value at row {r}, column {c}")
        if not self.node_ids:
            self.node_ids = [str(i) for i in range(self.node_count)]
        if len(self.node_ids) != self.node_count:
            raise DataError("node_ids length does not match column count")

    @property
    def node_count(self) -> int:
        return self.values.shape[1]

    @property
    def step_count(self) -> int:
        return self.values.shape[0]


def _raw_paths(path: Path) -> tuple[Path, Path]:
    path = Path(path)
    return path, path.with_suffix(".json")


def detect_format(path) -> str:
    return "csv" if Path(path).suffix.lower() == ".csv" else "raw"


def load_series(path, format: str | None = None) -> SeriesMatrix:
    """Read a series matrix.

    ``csv``: header row of node ids, then one row per time step.
    ``raw``: little-endian float32, row-major (steps x nodes), with a JSON
    manifest next to it (same stem, ``.json``) holding
    ``{nodes, steps, interval_minutes}``.
    """
    path = Path(path)
    fmt = format or detect_format(path)
    if not path.exists():
        raise DataError(f"no such file: {path}")
    if fmt == "csv":
        return _load_csv(path)
    if fmt == "raw":
        return _load_raw(path)
    raise DataError(f"unknown series format {fmt!r}")


def _load_csv(path: Path) -> SeriesMatrix:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        header = [h.strip() for h in header]
        rows = []
        for r, row in enumerate(reader, start=1):
            if not row:
                continue
            if len(row) != len(header):
                raise DataError(f"{path}: row {r} has {len(row)} cells, header declares {len(header)}")
            vals = []
            for c, cell in enumerate(row):
                try:
                    v = float(cell)
                except ValueError:
                    raise DataError(f"{path}: non-numeric cell at row {r}, column {c}: {cell!r}") from None
                if not math.isfinite(v):
                    raise DataError(f"{path}: non-finite value at row {r}, column {c}")
                vals.append(v)
            rows.append(vals)
    if not rows:
        raise DataError(f"{path}: no data rows")
    return SeriesMatrix(np.array(rows, dtype=np.float64), node_ids=header)


def _load_raw(path: Path) -> SeriesMatrix:
    data_path, manifest_path = _raw_paths(path)
    if not manifest_path.exists():
        raise DataError(f"missing manifest {manifest_path}")
    manifest = json.loads(manifest_path.read_text())
    try:
        nodes, steps = int(manifest["nodes"]), int(manifest["steps"])
    except KeyError as exc:
        raise DataError(f"manifest missing field {exc}") from None
    raw = np.fromfile(data_path, dtype="<f4")
    if raw.size != nodes * steps:
        raise DataError(
            f"{data_path}: {raw.size} values, manifest declares {steps} x {nodes} = {nodes * steps}"
        )
    values = raw.reshape(steps, nodes)
    bad = np.argwhere(~np.isfinite(values))
    if bad.size:
        r, c = bad[0]
        raise DataError(f"{data_path}: non-finite value at row {r}, column {c}")
    ids = manifest.get("node_ids") or [str(i) for i in range(nodes)]
    return SeriesMatrix(values.astype(np.float64), node_ids=list(ids),
                        interval_minutes=int(manifest.get("interval_minutes", 5)))


def write_series(m: SeriesMatrix, path, format: str | None = None) -> None:
    path = Path(path)
    fmt = format or detect_format(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if fmt == "csv":
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(m.node_ids)
            for row in m.values:
                w.writerow([repr(float(v)) for v in row])
    elif fmt == "raw":
        data_path, manifest_path = _raw_paths(path)
        m.values.astype("<f4").tofile(data_path)
        manifest = {"nodes": m.node_count, "steps": m.step_count,
                    "interval_minutes": m.interval_minutes, "node_ids": m.node_ids}
        manifest_path.write_text(json.dumps(manifest, indent=2))
    else:
        raise DataError(f"unknown series format {fmt!r}")


# ------------------------------------------------------------------ windows


@dataclass(frozen=True)
class WindowedSample:
    X: np.ndarray  # (nodes, history)
    Y: np.ndarray  # (nodes, horizon)
    origin: int


@dataclass
class Windows:
    """Stride-1 windows stored as stacked arrays.

    ``X[s]`` covers steps ``origin-T_h+1 .. origin`` and ``Y[s]`` steps
    ``origin+1 .. origin+tau``, both node-major.
    """

    X: np.ndarray  # (S, nodes, history)
    Y: np.ndarray  # (S, nodes, horizon)
    origins: np.ndarray

    def __len__(self) -> int:
        return len(self.origins)

    def __getitem__(self, i: int) -> WindowedSample:
        return WindowedSample(self.X[i], self.Y[i], int(self.origins[i]))


def make_windows(m: SeriesMatrix, history: int, horizon: int) -> Windows:
    if history < 1 or horizon < 1:
        raise ValueError("history and horizon must be >= 1")
    n = m.step_count - history - horizon + 1
    if n < 1:
        raise DataError(
            f"series of {m.step_count} steps is too short for history={history}, horizon={horizon}"
        )
    v = m.values.T  # (nodes, steps)
    sw = np.lib.stride_tricks.sliding_window_view(v, history + horizon, axis=1)[:, :n]
    X = np.ascontiguousarray(sw[:, :, :history].transpose(1, 0, 2))
    Y = np.ascontiguousarray(sw[:, :, history:].transpose(1, 0, 2))
    origins = np.arange(history - 1, history - 1 + n)
    return Windows(X, Y, origins)


@dataclass
class SplitBundle:
    """Chronological train/val/test partition of windows.

    Inputs are z-scored with the training-input mean and std; targets
    stay in data units. ``raw_inputs`` returns unscaled inputs for the
    persistence reference.
    """

    windows: Windows
    ranges: dict[str, tuple[int, int]]
    mean: float
    std: float

    def inputs(self, part: str) -> np.ndarray:
        lo, hi = self.ranges[part]
        return (self.windows.X[lo:hi] - self.mean) / self.std

    def targets(self, part: str) -> np.ndarray:
        lo, hi = self.ranges[part]
        return self.windows.Y[lo:hi]

    def raw_inputs(self, part: str) -> np.ndarray:
        lo, hi = self.ranges[part]
        return self.windows.X[lo:hi]

    def size(self, part: str) -> int:
        lo, hi = self.ranges[part]
        return hi - lo


def split_and_normalize(windows: Windows, ratios=(6, 2, 2)) -> SplitBundle:
    s = len(windows)
    if s < 10:
        raise DataError(f"need at least 10 windows to split, got {s}")
    total = sum(ratios)
    n_train = s * ratios[0] // total
    n_val = s * ratios[1] // total
    ranges = {
        "train": (0, n_train),
        "val": (n_train, n_train + n_val),
        "test": (n_train + n_val, s),
    }
    train_x = windows.X[:n_train]
    mean = float(train_x.mean())
    std = float(train_x.std())
    if std <= 0:
        std = 1.0
    return SplitBundle(windows, ranges, mean, std)


# ---------------------------------------------------------------- synthetic


@dataclass(frozen=True)
class SynthConfig:
    nodes: int = 8
    steps: int = 4000
    seed: int = 0
    noise_base: float = 2.0
    noise_scale: float = 4.0
    period: int = 288
    coupling: float = 0.6
    amp_low: float = 10.0
    amp_high: float = 30.0
    burn_in: int = 100


@dataclass
class SyntheticTruth:
    adjacency: np.ndarray  # row-normalized
    sigma: np.ndarray  # (steps, nodes)
    latent: np.ndarray  # (steps, nodes)
    amplitudes: np.ndarray
    seed: int
    noise_base: float
    noise_scale: float

    def to_json(self) -> dict:
        return {
            "seed": self.seed,
            "a": self.noise_base,
            "b": self.noise_scale,
            "adjacency": self.adjacency.tolist(),
            "amplitudes": self.amplitudes.tolist(),
        }


def ring_with_chords(nodes: int) -> np.ndarray:
    """Row-normalized adjacency of a ring plus opposite-node chords."""
    A = np.zeros((nodes, nodes))
    for i in range(nodes):
        A[i, (i + 1) % nodes] = A[(i + 1) % nodes, i] = 1.0
        if nodes >= 4:
            j = (i + nodes // 2) % nodes
            A[i, j] = A[j, i] = 1.0
    np.fill_diagonal(A, 0.0)
    return A / A.sum(axis=1, keepdims=True)


def seasonal_profile(t: np.ndarray, period: int) -> np.ndarray:
    return np.sin(2.0 * np.pi * t / period)


def synth_generate(cfg: SynthConfig) -> tuple[SeriesMatrix, SyntheticTruth]:
    """Heteroscedastic graph-coupled seasonal series with known noise scale.

    Latent dynamics ``s_{t+1} = coupling * A s_t + sin(2 pi t / period) * amp``
    and observations ``s_t + eps_t`` with
    ``eps_t ~ N(0, (a + b |sin(2 pi t / period)|)^2)``.
    """
    if cfg.nodes < 2:
        raise ValueError("synthetic graph needs at least 2 nodes")
    if cfg.steps < 2 or cfg.noise_base <= 0 or cfg.noise_scale < 0:
        raise ValueError("invalid synthetic sizes or noise parameters")
    rng = np.random.default_rng(cfg.seed)
    A = ring_with_chords(cfg.nodes)
    amp = rng.uniform(cfg.amp_low, cfg.amp_high, size=cfg.nodes)
    s = np.zeros(cfg.nodes)
    latent = np.empty((cfg.steps, cfg.nodes))
    for t in range(-cfg.burn_in, cfg.steps):
        if t >= 0:
            latent[t] = s
        s = cfg.coupling * (A @ s) + seasonal_profile(t, cfg.period) * amp
    prof = seasonal_profile(np.arange(cfg.steps), cfg.period)
    sigma = np.repeat((cfg.noise_base + cfg.noise_scale * np.abs(prof))[:, None], cfg.nodes, axis=1)
    obs = latent + sigma * rng.standard_normal(latent.shape)
    truth = SyntheticTruth(A, sigma, latent, amp, cfg.seed, cfg.noise_base, cfg.noise_scale)
    return SeriesMatrix(obs, node_ids=[f"n{i}" for i in range(cfg.nodes)]), truth
