import math

import numpy as np
import pytest

from nodulemtl.autodiff import Tensor, precision, square, tsum
from nodulemtl.optim import Adam, AdamState, adam_step


def scalar_adam(theta, steps, lr=1e-3, b1=0.9, b2=0.999, eps=1e-8):
    """Independent scalar Adam on f(x) = x^2."""
    m = v = 0.0
    out = []
    for t in range(1, steps + 1):
        g = 2 * theta
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        theta = theta - lr * (m / (1 - b1 ** t)) / (math.sqrt(v / (1 - b2 ** t)) + eps)
        out.append(theta)
    return out


def test_zero_gradient_leaves_parameters():
    p = {"w": np.array([1.0, -2.0])}
    st = AdamState()
    st.m["w"] = np.array([0.5, 0.5])
    st.v["w"] = np.array([0.25, 0.25])
    adam_step(p, {"w": np.zeros(2)}, st)
    # the decayed moments still move the parameters; the update equals the
    # moment ratio and no new gradient information enters
    m_hat, v_hat = 0.45 / 0.1, 0.25 * 0.999 / 0.001
    assert np.allclose(p["w"], np.array([1.0, -2.0]) - 1e-3 * m_hat / (np.sqrt(v_hat) + 1e-8))
    assert np.allclose(st.m["w"], 0.45) and np.allclose(st.v["w"], 0.25 * 0.999)


def test_zero_gradient_from_fresh_state_is_identity():
    p = {"w": np.array([1.0, -2.0])}
    adam_step(p, {"w": np.zeros(2)}, AdamState())
    assert np.array_equal(p["w"], [1.0, -2.0])


@pytest.mark.parametrize("g", [3.0, -0.01, 250.0])
def test_first_step_is_signed_lr(g):
    p = {"x": np.array([0.0])}
    adam_step(p, {"x": np.array([g])}, AdamState(lr=1e-3))
    assert p["x"][0] == pytest.approx(-1e-3 * np.sign(g), rel=1e-6)


def test_trajectory_matches_scalar_oracle():
    with precision(64):
        x = Tensor(np.array([1.0]), requires_grad=True)
        opt = Adam({"x": x})
        ours = []
        for _ in range(10):
            opt.zero_grad()
            tsum(square(x)).backward()
            opt.step()
            ours.append(float(x.data[0]))
    ref = scalar_adam(1.0, 10)
    assert max(abs(a - b) for a, b in zip(ours, ref)) < 1e-12
    assert opt.t == 10


@pytest.mark.parametrize("bad", [np.nan, np.inf])
def test_non_finite_gradient_aborts_before_update(bad):
    p = {"a": np.array([1.0]), "b": np.array([2.0])}
    st = AdamState()
    with pytest.raises(FloatingPointError, match="'b'"):
        adam_step(p, {"a": np.array([1.0]), "b": np.array([bad])}, st)
    assert st.t == 0 and p["a"][0] == 1.0 and not st.m


def test_state_tensor_round_trip():
    x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    opt = Adam({"x": x})
    x.grad = np.array([0.1, -0.2])
    opt.step()
    twin = Adam({"x": Tensor(x.data.copy(), requires_grad=True)})
    twin.load_state_tensors(opt.state_tensors(), opt.t)
    for o in (opt, twin):
        o.params["x"].grad = np.array([0.3, 0.3])
        o.step()
    assert np.array_equal(opt.params["x"].data, twin.params["x"].data)
