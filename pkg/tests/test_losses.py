import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stuq import ndcore as nd
from stuq.losses import (
    LossConfig,
    combined_aleatoric_loss,
    data_loss,
    decay_coefficients,
    hetero_nll_term,
    l2_penalty,
    l2_term,
    mae_term,
    pinball_loss,
    total_loss,
)
from stuq.ndcore import Tensor
from stuq.trainer import OptimizerState, adam_step
from stuq.stgraph import ModelParams

arrays = st.integers(0, 2**31 - 1).map(np.random.default_rng)


def test_hetero_nll_examples():
    assert hetero_nll_term([1.0], [1.0], [0.0]).item() == 0.0
    assert hetero_nll_term([2.0], [1.0], [0.0]).item() == 1.0
    got = hetero_nll_term([2.0], [0.0], [math.log(4.0)]).item()
    assert got == pytest.approx(math.log(4.0) + 1.0, rel=1e-14)
    assert got == pytest.approx(2.3863, abs=1e-4)


def test_combined_examples():
    y, mu, lv = np.array([3.0, -1.0]), np.array([2.5, 0.5]), np.array([0.3, -0.2])
    assert combined_aleatoric_loss(y, mu, lv, 1.0).item() == hetero_nll_term(y, mu, lv).item()
    for lam in (0.1, 0.5, 0.9):
        assert combined_aleatoric_loss(y, y, np.zeros(2), lam).item() == 0.0
    assert combined_aleatoric_loss([1.0], [0.0], [0.0], 0.1).item() == pytest.approx(1.0, rel=1e-15)
    with pytest.raises(ValueError):
        combined_aleatoric_loss(y, mu, lv, 0.0)


def test_total_loss_without_decay_is_combined():
    y, mu, lv = np.array([1.0, 2.0]), np.array([0.0, 2.5]), np.zeros(2)
    loss, wd = total_loss(y, mu, lv, LossConfig(lam=0.3, weight_decay=0.0))
    assert wd == 0.0
    assert loss.item() == combined_aleatoric_loss(y, mu, lv, 0.3).item()


def test_decay_term_matches_optimizer_step():
    c, lr = 0.01, 0.1
    assert l2_penalty([3.0, 4.0], c) == pytest.approx(c * 25 / 2, rel=1e-15)
    w = Tensor(np.array([3.0, 4.0]), requires_grad=True)
    nd.backward(l2_term({"w": w}, {"w": c}))
    # decoupled decay with zero data gradient moves w by lr * grad of the penalty
    p = ModelParams({"w": np.array([3.0, 4.0])})
    state = OptimizerState.for_params(p, lr, {"w": c})
    adam_step(p, {"w": np.zeros(2)}, state)
    np.testing.assert_allclose(p.arrays["w"], np.array([3.0, 4.0]) - lr * w.grad, rtol=1e-15)


def test_pinball_examples():
    assert pinball_loss([2.0], [2.0], 0.3).item() == 0.0
    assert pinball_loss([1.0], [0.0], 0.9).item() == pytest.approx(0.9)
    assert pinball_loss([-1.0], [0.0], 0.9).item() == pytest.approx(0.1)
    with pytest.raises(ValueError):
        pinball_loss([1.0], [0.0], 1.0)


@settings(max_examples=100)
@given(r=arrays)
def test_pinball_median_is_half_mae(r):
    y, yh = r.standard_normal(20), r.standard_normal(20)
    assert pinball_loss(y, yh, 0.5).item() == 0.5 * mae_term(y, yh).item()


@settings(max_examples=100)
@given(r=arrays)
def test_nll_stationary_at_log_squared_residual(r):
    y, mu = r.standard_normal(1), r.standard_normal(1)
    lv = Tensor(np.log((y - mu) ** 2), requires_grad=True)
    nd.backward(hetero_nll_term(y, mu, lv))
    assert abs(lv.grad[0]) <= 1e-8


@settings(max_examples=100)
@given(r=arrays, lam=st.floats(0.01, 0.99))
def test_combined_at_unit_variance(r, lam):
    resid = r.standard_normal(10) * (r.random() < 0.8)
    loss = combined_aleatoric_loss(resid, np.zeros(10), np.zeros(10), lam).item()
    want = lam * np.mean(resid**2) + (1 - lam) * np.mean(np.abs(resid))
    assert loss == pytest.approx(want, rel=1e-12, abs=1e-300)
    assert loss >= 0.0
    assert (loss == 0.0) == bool(np.all(resid == 0))


@settings(max_examples=100)
@given(r=arrays)
def test_losses_finite_on_clamped_domain(r):
    y = r.standard_normal(8) * 1e3
    lv = r.uniform(-10, 10, 8)
    assert math.isfinite(combined_aleatoric_loss(y, np.zeros(8), lv, 0.1).item())


def test_shape_mismatch_rejected():
    with pytest.raises(nd.ShapeError):
        hetero_nll_term(np.zeros(2), np.zeros(3), np.zeros(2))


def test_decay_coefficients_modes():
    names = ["embed", "enc0.z.w_pool", "head.mu.w"]
    g = decay_coefficients(names, LossConfig(weight_decay=1e-6), 0.05, 0.2)
    assert set(g.values()) == {1e-6}
    p = decay_coefficients(names, LossConfig(weight_decay=1e-6, decay_mode="per_layer"), 0.05, 0.2)
    assert p == {"embed": 1e-6, "enc0.z.w_pool": pytest.approx(2e-5), "head.mu.w": pytest.approx(5e-6)}


def test_data_loss_dispatch():
    y = np.array([[1.0, 2.0]])
    outs = {"q0": Tensor(y - 1), "q1": Tensor(y), "q2": Tensor(y + 1)}
    got = data_loss(outs, y, LossConfig(head_mode="quantile")).item()
    assert got == pytest.approx(0.025 * 1 + 0.0 + 0.025 * 1)
    assert data_loss({"mu": Tensor(y + 2)}, y, LossConfig(head_mode="point")).item() == 2.0


def test_loss_config_validation():
    with pytest.raises(ValueError):
        LossConfig(lam=1.5)
    with pytest.raises(ValueError):
        LossConfig(decay_mode="layerwise")
