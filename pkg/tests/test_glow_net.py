import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ipdnn.glow_net import (ACTIVATIONS, GlowParams, NetworkParams, alt_activation, glow,
                            glow_param_grads, glow_prime, map_to_channels, net_backward,
                            net_forward, net_forward_state, net_init)

positive = st.floats(0.1, 5.0)
reals = st.floats(-50.0, 50.0, allow_nan=False)


def test_glow_prime_reference_value():
    assert glow_prime(2.0, GlowParams.from_values(1.0, 1.0)) == pytest.approx(2 * np.exp(-3), rel=1e-15)


@pytest.mark.parametrize("c,sigma", [(1.0, 1.0), (0.3, 2.0), (2.5, 0.4)])
def test_glow_c1_at_transition(c, sigma):
    p = GlowParams.from_values(c, sigma)
    d = 1e-6
    for edge in (c, -c):
        # one-sided limits at the edge by quadratic extrapolation
        left = lambda f: 3 * f(edge - d, p) - 3 * f(edge - 2 * d, p) + f(edge - 3 * d, p)
        right = lambda f: 3 * f(edge + d, p) - 3 * f(edge + 2 * d, p) + f(edge + 3 * d, p)
        assert abs(right(glow) - left(glow)) < 1e-9
        assert abs(right(glow_prime) - left(glow_prime)) < 1e-9
    assert glow(c, p) == pytest.approx(0.5 * c * c, rel=1e-15)
    assert glow_prime(c, p) == pytest.approx(c, rel=1e-15)


@settings(max_examples=200, deadline=None)
@given(reals, positive, positive)
def test_glow_odd_and_bounded(x, c, sigma):
    p = GlowParams.from_values(c, sigma)
    assert glow(-x, p) == -glow(x, p)
    assert abs(glow(x, p)) <= 0.5 * c * c + 0.5 * sigma * sigma + 1e-12


@settings(max_examples=100, deadline=None)
@given(reals, reals, positive, positive)
def test_glow_monotone(a, b, c, sigma):
    p = GlowParams.from_values(c, sigma)
    lo, hi = min(a, b), max(a, b)
    assert glow(lo, p) <= glow(hi, p)
    assert glow_prime(a, p) >= 0


@pytest.mark.parametrize("x", [-3.1, -1.4, -0.2, 0.7, 1.3, 2.0, 4.5])
def test_glow_derivatives_match_finite_differences(x):
    c, s = 1.1, 0.8
    p = GlowParams.from_values(c, s)
    h = 1e-6
    fd = (glow(x + h, p) - glow(x - h, p)) / (2 * h)
    assert glow_prime(x, p) == pytest.approx(fd, abs=1e-8)
    d_c, d_s = glow_param_grads(x, p)
    fd_c = (glow(x, GlowParams.from_values(c + h, s)) - glow(x, GlowParams.from_values(c - h, s))) / (2 * h)
    fd_s = (glow(x, GlowParams.from_values(c, s + h)) - glow(x, GlowParams.from_values(c, s - h))) / (2 * h)
    assert d_c == pytest.approx(fd_c, abs=1e-8)
    assert d_s == pytest.approx(fd_s, abs=1e-8)


def test_glow_flat_at_origin():
    p = GlowParams.from_values(1.1, 0.8)
    assert glow(0.0, p) == 0.0 and glow_prime(0.0, p) == 0.0


def test_glow_params_positive():
    with pytest.raises(ValueError):
        GlowParams.from_values(0.0, 1.0)


@pytest.mark.parametrize("name", [a for a in ACTIVATIONS if a != "glow"])
def test_alt_activation_derivatives(name):
    x = np.array([-2.0, -0.4, 0.3, 1.7])
    h = 1e-6
    _, d = alt_activation(name, x)
    fd = (alt_activation(name, x + h)[0] - alt_activation(name, x - h)[0]) / (2 * h)
    assert np.allclose(d, fd, atol=1e-7)


def test_alt_activation_unknown():
    with pytest.raises(ValueError):
        alt_activation("swish", 1.0)


def test_init_deterministic_and_bounded():
    a, b = net_init(3, 4), net_init(3, 4)
    assert np.array_equal(a.weight, b.weight)
    assert a.weight.shape == (32, 32) and np.abs(a.weight).max() <= 1 / np.sqrt(32)
    assert not np.array_equal(a.weight, net_init(4, 4).weight)
    with pytest.raises(ValueError):
        net_init(0, 4, "gelu")


def test_zero_weights_give_background():
    p = net_init(0, 4)
    p.weight[:] = 0
    eps = net_forward(p, np.full((4, 4), 2.0 - 0.5j))
    assert np.array_equal(eps, np.ones((4, 4), complex))


def test_channel_mapping_and_sign():
    eps = np.array([[1.5 - 0.2j, 1.0]])
    assert np.array_equal(map_to_channels(eps), [0.5, 0.0, -0.2, 0.0])
    p = net_init(0, 1)
    p.weight[:] = 0
    p.bias[:] = [0.5, 0.2]
    e = net_forward(p, np.ones((1, 1)))[0, 0]
    assert e.real > 1 and e.imag < 0


def test_forward_rejects_wrong_size():
    with pytest.raises(ValueError):
        net_forward(net_init(0, 4), np.ones((3, 3)))


@pytest.mark.parametrize("activation", ["glow", "tanh"])
def test_backward_matches_finite_differences(activation, rng):
    p = net_init(1, 3, activation)
    p.log_glow[:] = [np.log(0.05), np.log(0.7)]
    x = 1 + 0.8 * rng.random((3, 3)) - 0.3j * rng.random((3, 3))
    wr, wi = rng.standard_normal((3, 3)), rng.standard_normal((3, 3))

    def f(v):
        q = p.copy()
        q.set_vector(v)
        e = net_forward(q, x)
        return np.sum(wr * e.real + wi * e.imag)

    grads = net_backward(p, net_forward_state(p, x), wr, wi)
    g = np.concatenate([a.ravel() for a in grads])
    v0 = p.to_vector()
    h = 1e-6
    for i in rng.choice(v0.size, 30, replace=False).tolist() + [v0.size - 2, v0.size - 1]:
        e = np.zeros_like(v0)
        e[i] = h
        fd = (f(v0 + e) - f(v0 - e)) / (2 * h)
        assert g[i] == pytest.approx(fd, rel=1e-5, abs=1e-8)


def test_checkpoint_round_trip(tmp_path):
    p = net_init(5, 3, "glow", "abc")
    p.log_glow[:] = [0.1, -0.3]
    p.save(tmp_path / "ck.bin")
    q = NetworkParams.load(tmp_path / "ck.bin")
    assert all(np.array_equal(a, b) for a, b in zip(p.arrays(), q.arrays()))
    assert q.activation == "glow" and q.grid_fingerprint == "abc"
