import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stuq.dataio import (
    DataError,
    SeriesMatrix,
    SynthConfig,
    load_series,
    make_windows,
    split_and_normalize,
    synth_generate,
    write_series,
)

FIXTURE = "t0,t1,t2\n1.0,2.0,3.0\n4.0,5.5,6.0\n7.0,8.0,9.25\n"


def ramp(steps, nodes=2):
    return SeriesMatrix(np.arange(steps * nodes, dtype=np.float64).reshape(steps, nodes))


# ------------------------------------------------------------------- io


def test_load_csv_fixture(tmp_path):
    p = tmp_path / "s.csv"
    p.write_text(FIXTURE)
    m = load_series(p)
    assert m.node_ids == ["t0", "t1", "t2"]
    np.testing.assert_array_equal(m.values, [[1, 2, 3], [4, 5.5, 6], [7, 8, 9.25]])


def test_csv_roundtrip(tmp_path, rng):
    m = SeriesMatrix(rng.normal(100, 30, (20, 4)))
    write_series(m, tmp_path / "s.csv")
    np.testing.assert_array_equal(load_series(tmp_path / "s.csv").values, m.values)


def test_raw_roundtrip_is_bit_exact(tmp_path, rng):
    vals = rng.normal(100, 30, (50, 3)).astype(np.float32).astype(np.float64)
    m = SeriesMatrix(vals, interval_minutes=5)
    write_series(m, tmp_path / "s.bin")
    back = load_series(tmp_path / "s.bin")
    assert back.values.tobytes() == vals.tobytes()
    meta = json.loads((tmp_path / "s.json").read_text())
    assert (meta["nodes"], meta["steps"], meta["interval_minutes"]) == (3, 50, 5)


def test_raw_size_mismatch(tmp_path):
    np.zeros(7, dtype="<f4").tofile(tmp_path / "s.bin")
    (tmp_path / "s.json").write_text(json.dumps({"nodes": 2, "steps": 4}))
    with pytest.raises(DataError, match="declares"):
        load_series(tmp_path / "s.bin")


def test_nan_reports_row_and_column(tmp_path):
    p = tmp_path / "s.csv"
    p.write_text("a,b\n1,2\n3,nan\n")
    with pytest.raises(DataError, match="row 2, column 1"):
        load_series(p)
    with pytest.raises(DataError, match="row 1, column 0"):
        SeriesMatrix(np.array([[1.0, 2.0], [np.inf, 1.0]]))


def test_ragged_and_missing(tmp_path):
    p = tmp_path / "s.csv"
    p.write_text("a,b\n1,2\n3\n")
    with pytest.raises(DataError, match="row 2"):
        load_series(p)
    with pytest.raises(DataError, match="no such file"):
        load_series(tmp_path / "absent.csv")


# -------------------------------------------------------------- windows


def test_window_counts():
    assert len(make_windows(ramp(26), 12, 12)) == 3
    assert len(make_windows(ramp(24), 12, 12)) == 1
    with pytest.raises(DataError, match="too short"):
        make_windows(ramp(23), 12, 12)


def test_ramp_windows():
    w = make_windows(ramp(10, 1), 3, 2)
    np.testing.assert_array_equal(w.X[0, 0], [0, 1, 2])
    np.testing.assert_array_equal(w.Y[0, 0], [3, 4])
    np.testing.assert_array_equal(w.X[-1, 0], [5, 6, 7])
    np.testing.assert_array_equal(w.Y[-1, 0], [8, 9])
    assert w[0].origin == 2


@settings(max_examples=60)
@given(steps=st.integers(6, 80), h=st.integers(1, 5), tau=st.integers(1, 5), nodes=st.integers(1, 4))
def test_windows_reconstruct_series(steps, h, tau, nodes):
    if steps < h + tau:
        return
    r = np.random.default_rng(steps * 31 + h)
    m = SeriesMatrix(r.standard_normal((steps, nodes)))
    w = make_windows(m, h, tau)
    assert len(w) == steps - h - tau + 1
    for s in range(len(w)):
        o = w.origins[s]
        np.testing.assert_array_equal(w.X[s], m.values[o - h + 1 : o + 1].T)
        np.testing.assert_array_equal(w.Y[s], m.values[o + 1 : o + tau + 1].T)
    # targets at stride tau tile the tail of the series
    picks = w.Y[::tau]
    tiled = np.concatenate(list(picks), axis=1)
    np.testing.assert_array_equal(tiled, m.values[h : h + tiled.shape[1]].T)


# ---------------------------------------------------------------- split


@pytest.mark.parametrize("n, sizes", [(100, (60, 20, 20)), (101, (60, 20, 21))])
def test_split_sizes(n, sizes):
    w = make_windows(ramp(n + 2, 1), 1, 2)
    assert len(w) == n
    b = split_and_normalize(w)
    assert (b.size("train"), b.size("val"), b.size("test")) == sizes
    assert b.ranges["train"][1] == b.ranges["val"][0]
    assert b.ranges["val"][1] == b.ranges["test"][0]


def test_normalization_uses_training_inputs(rng):
    w = make_windows(SeriesMatrix(rng.normal(50, 10, (300, 3))), 4, 2)
    b = split_and_normalize(w)
    tx = b.inputs("train")
    assert abs(tx.mean()) < 1e-12
    assert tx.std() == pytest.approx(1.0, rel=1e-12)
    np.testing.assert_array_equal(b.targets("test"), w.Y[b.ranges["test"][0] :])
    np.testing.assert_array_equal(b.raw_inputs("val"), w.X[slice(*b.ranges["val"])])


def test_constant_series_has_unit_std():
    b = split_and_normalize(make_windows(SeriesMatrix(np.full((40, 2), 3.0)), 3, 2))
    assert b.std == 1.0
    assert np.all(b.inputs("train") == 0.0)


def test_too_few_windows():
    with pytest.raises(DataError):
        split_and_normalize(make_windows(ramp(11, 1), 1, 2))


# ------------------------------------------------------------ synthetic


def test_synth_deterministic():
    a, ta = synth_generate(SynthConfig(nodes=5, steps=300, seed=4))
    b, tb = synth_generate(SynthConfig(nodes=5, steps=300, seed=4))
    assert a.values.tobytes() == b.values.tobytes()
    np.testing.assert_array_equal(ta.adjacency, tb.adjacency)
    c, _ = synth_generate(SynthConfig(nodes=5, steps=300, seed=5))
    assert not np.array_equal(a.values, c.values)


def test_synth_without_scale_is_homoscedastic():
    _, t = synth_generate(SynthConfig(nodes=4, steps=500, noise_base=2.0, noise_scale=0.0))
    assert np.all(t.sigma == 2.0)


def test_synth_noise_matches_declared_sigma():
    m, t = synth_generate(SynthConfig(nodes=8, steps=4000, seed=7, noise_base=2.0, noise_scale=4.0))
    z = (m.values - t.latent) / t.sigma
    assert abs(np.sqrt(np.mean(z**2)) - 1.0) <= 0.03
    prof = t.sigma[:, 0]
    hi, lo = prof > 5.0, prof < 3.0
    emp_hi = np.std((m.values - t.latent)[hi])
    emp_lo = np.std((m.values - t.latent)[lo])
    assert emp_hi > 2 * emp_lo


def test_synth_adjacency_row_stochastic():
    _, t = synth_generate(SynthConfig(nodes=6, steps=50))
    np.testing.assert_allclose(t.adjacency.sum(axis=1), 1.0)
    assert np.all(np.diag(t.adjacency) == 0)
    np.testing.assert_array_equal(t.adjacency > 0, (t.adjacency > 0).T)


def test_synth_validation():
    with pytest.raises(ValueError):
        synth_generate(SynthConfig(nodes=1))
    with pytest.raises(ValueError):
        synth_generate(SynthConfig(noise_base=0.0))
