import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from irregts.errors import ConfigError, NumericDivergenceError, OrderingError, StateError
from irregts.gradcheck import check_dynamics
from irregts.node import (
    DynamicsNet,
    LinearField,
    SolveConfig,
    euler_solve,
    f_theta,
    ode_gradients,
    steps_for_gap,
    steps_per_update,
)
from irregts.tensorcore import ParamStore, grad_check


class ConstantField:
    def __init__(self, v):
        self.v = np.asarray(v, dtype=float)

    def forward(self, h, t=0.0):
        return np.broadcast_to(self.v, np.shape(h)).copy(), None

    def backward(self, cache, df):
        return np.zeros_like(df), {}


def test_f_theta_examples(rng):
    net = DynamicsNet.create(3, 4, rng)
    net["W2"].fill(0.0)
    net["b2"].fill(0.0)
    assert not f_theta(rng.standard_normal(3), net).any()
    net = DynamicsNet.create(1, 1, rng)
    for k, v in (("W1", 1.0), ("b1", 0.0), ("W2", 1.0), ("b2", 0.0)):
        net[k][...] = v
    assert f_theta(np.array([0.5]), net)[0] == pytest.approx(math.tanh(0.5), abs=1e-15)


def test_dynamics_shapes_and_names(rng):
    P = ParamStore()
    DynamicsNet.create(80, 255, rng, P)
    assert sorted(P) == ["ode.W1", "ode.W2", "ode.b1", "ode.b2"]
    assert P["ode.W1"].shape == (255, 80) and P["ode.W2"].shape == (80, 255)


def test_time_input_changes_output_only_when_enabled(rng):
    net = DynamicsNet.create(3, 4, np.random.default_rng(0))
    h = rng.standard_normal(3)
    assert np.array_equal(net(h, 0.0), net(h, 7.0))
    tnet = DynamicsNet.create(3, 4, np.random.default_rng(0), time_input=True)
    assert not np.array_equal(tnet(h, 0.0), tnet(h, 7.0))


def test_step_count_rule():
    assert steps_for_gap(3, 7) == 4
    assert steps_for_gap(3, 7, SolveConfig(steps_multiplier=3)) == 12
    with pytest.raises(OrderingError):
        steps_for_gap(5, 5)
    with pytest.raises(ConfigError):
        SolveConfig(steps_multiplier=0)
    with pytest.raises(ConfigError):
        SolveConfig(gradient_mode="rk4")


def test_steps_per_update():
    assert steps_per_update(0.0) == 1.0
    assert steps_per_update(0.5) == 2.0
    assert steps_per_update(0.59) == pytest.approx(2.439, abs=1e-3)


def test_euler_examples(rng):
    zero = LinearField([[0.0]])
    assert euler_solve(zero, [1.3], 0, 5, 7).tolist() == [1.3]
    assert euler_solve(ConstantField([1.0, 0.0]), [1.0, 2.0], 0, 3, 3).tolist() == [4.0, 2.0]
    assert euler_solve(LinearField([[-1.0]]), [1.0], 0, 1, 4)[0] == 0.31640625


@given(st.integers(1, 6), st.integers(1, 6), st.integers(1, 5))
def test_euler_additive_over_subintervals(a, b, m):
    f = LinearField([[-0.3, 0.2], [0.1, -0.5]])
    h0 = np.array([1.0, -2.0])
    mid = euler_solve(f, h0, 0, a, a * m)
    two = euler_solve(f, mid, a, a + b, b * m)
    one = euler_solve(f, h0, 0, a + b, (a + b) * m)
    np.testing.assert_allclose(two, one, rtol=0, atol=1e-14)


def test_euler_first_order_convergence():
    f = LinearField([[-1.0]])
    errs = [abs(euler_solve(f, [1.0], 0, 1, n)[0] - math.exp(-1)) for n in (16, 32, 64, 128)]
    orders = [math.log2(a / b) for a, b in zip(errs, errs[1:])]
    assert all(0.8 <= o <= 1.2 for o in orders), orders


def test_euler_divergence_guard():
    with pytest.raises(NumericDivergenceError):
        euler_solve(LinearField([[10.0]]), [1.0], 0, 10, 10)
    with pytest.raises(OrderingError):
        euler_solve(LinearField([[1.0]]), [1.0], 2, 1, 1)


def test_gradients_of_zero_field_are_identity():
    f = LinearField([[0.0, 0.0], [0.0, 0.0]])
    g = np.array([0.7, -1.1])
    for mode in ("discrete", "adjoint"):
        _, tr = euler_solve(f, [1.0, 2.0], 0, 3, 3, keep_states=True)
        dh0, grads = ode_gradients(f, [1.0, 2.0], 0, 3, 3, g, mode, trace=tr)
        assert np.array_equal(dh0, g)


def test_zero_output_layer_gives_identity_flow(rng):
    net = DynamicsNet.create(3, 4, rng)
    net.store["ode.W2"].fill(0.0)
    h0, g = rng.standard_normal(3), rng.standard_normal(3)
    _, tr = euler_solve(net, h0, 0, 2, 4, keep_states=True)
    dh0, grads = ode_gradients(net, h0, 0, 2, 4, g, "discrete", trace=tr)
    assert np.array_equal(dh0, g)
    # the first layer sees no signal through a zero output layer
    assert not grads["ode.W1"].any() and not grads["ode.b1"].any()


def test_discrete_mode_needs_trace(rng):
    net = DynamicsNet.create(2, 3, rng)
    with pytest.raises(StateError):
        ode_gradients(net, np.zeros(2), 0, 1, 2, np.ones(2), "discrete")


def test_discrete_gradients_match_finite_differences(rng):
    P = ParamStore()
    net = DynamicsNet.create(3, 5, rng, P)
    P.add("h0", rng.standard_normal((2, 3)))
    w = rng.standard_normal((2, 3))

    def loss(P):
        h1, tr = euler_solve(net, P["h0"], 0.0, 3.0, 6, keep_states=True)
        dh0, grads = ode_gradients(net, P["h0"], 0.0, 3.0, 6, w, "discrete", trace=tr)
        P.accumulate({**grads, "h0": dh0})
        return float(np.sum(h1 * w))

    rep = grad_check(loss, P, tol=1e-6)
    assert rep.passed, rep


def test_adjoint_approaches_discrete(rng):
    net = DynamicsNet.create(3, 5, rng)
    h0, g = rng.standard_normal(3), rng.standard_normal(3)
    gaps = []
    for n in (8, 16, 32, 64):
        _, tr = euler_solve(net, h0, 0, 1, n, keep_states=True)
        d_dis, gd = ode_gradients(net, h0, 0, 1, n, g, "discrete", trace=tr)
        d_adj, ga = ode_gradients(net, h0, 0, 1, n, g, "adjoint", trace=tr)
        gaps.append(np.linalg.norm(ga["ode.W1"] - gd["ode.W1"]) / np.linalg.norm(gd["ode.W1"]))
    assert all(b < a for a, b in zip(gaps, gaps[1:]))


@pytest.mark.parametrize("time_input", [False, True])
def test_dynamics_gradients(time_input, rng):
    rep = check_dynamics(rng, 1e-6, time_input)
    assert rep.passed, rep
