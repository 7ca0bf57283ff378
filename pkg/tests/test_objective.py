import numpy as np
import pytest

from ipdnn.em_core import forward
from ipdnn.glow_net import net_init
from ipdnn.objective import (AdamState, LossBreakdown, LossWeights, Physics, adam_step,
                             bound_grad, bound_loss, data_loss, evaluate_map, loss_gradient,
                             loss_value, total_loss, tv_grad, tv_loss)


@pytest.fixture(scope="module")
def physics8(request):
    setup = request.getfixturevalue("small_setup")
    return Physics.build(setup)


@pytest.fixture
def truth8():
    eps = np.ones((8, 8), complex)
    eps[2:5, 3:6] = 1.8 - 0.2j
    return eps


# ------------------------------------------------------------------ loss terms

def test_data_loss_examples():
    assert data_loss(np.ones((2, 3)), np.ones((2, 3))) == 0
    pred = np.zeros((2, 2), complex)
    pred[1, 0] = 3 + 4j
    assert data_loss(pred, np.zeros((2, 2))) == 5.0
    a, b = np.array([1 + 2j, 0.5]), np.array([-1j, 2.0])
    assert data_loss(3j * a, 3j * b) == pytest.approx(3 * data_loss(a, b), rel=1e-15)


def test_bound_loss_examples():
    assert bound_loss(np.full((3, 3), 1.2)) == 0
    eps = np.ones((3, 3))
    eps[1, 2] = 0.5
    assert bound_loss(eps) == 0.5
    g = bound_grad(np.array([0.5, 1.0, 1.5]))
    assert np.array_equal(g, [-1.0, 0.0, 0.0])


def test_tv_fixture_and_invariances():
    fixture = np.array([[1.0, 1.0], [1.0, 2.0]])
    assert tv_loss(fixture) == pytest.approx(2 + np.sqrt(2), abs=1e-9)
    assert tv_loss(np.full((5, 5), 3.0 - 1j)) == 0.0
    rng = np.random.default_rng(4)
    m = rng.random((6, 6)) + 1j * rng.random((6, 6))
    assert tv_loss(m + 2.5 - 0.5j) == pytest.approx(tv_loss(m), rel=1e-12)
    # real and imaginary parts are penalised independently
    assert tv_loss(1 + 1j * fixture) == pytest.approx(tv_loss(fixture), rel=1e-15)


def test_tv_gradient_matches_finite_differences(rng):
    p = rng.random((5, 5)) + 1j * rng.random((5, 5))
    g_re, g_im = tv_grad(p)
    h = 1e-6
    for i, j in [(0, 0), (2, 3), (4, 4), (1, 4)]:
        e = np.zeros((5, 5))
        e[i, j] = h
        fd_re = (tv_loss(p + e) - tv_loss(p - e)) / (2 * h)
        fd_im = (tv_loss(p + 1j * e) - tv_loss(p - 1j * e)) / (2 * h)
        assert g_re[i, j] == pytest.approx(fd_re, rel=1e-6, abs=1e-8)
        assert g_im[i, j] == pytest.approx(fd_im, rel=1e-6, abs=1e-8)


def test_breakdown_recomposition():
    rng = np.random.default_rng(1)
    eps = 1 + rng.standard_normal((4, 4)) * 0.3
    pred = rng.standard_normal((3, 2)) + 1j * rng.standard_normal((3, 2))
    meas = rng.standard_normal((3, 2)) + 1j * rng.standard_normal((3, 2))
    w = LossWeights(2.0, 1.0)
    b = total_loss(eps, pred, meas, w)
    assert b.total == data_loss(pred, meas) + 2.0 * bound_loss(eps) + 1.0 * tv_loss(eps)
    assert total_loss(eps, pred, meas, LossWeights(0, 0)).total == b.data
    assert LossBreakdown.compose(1.0, 2.0, 3.0, w).total == 1.0 + 4.0 + 3.0


def test_weights_validated():
    with pytest.raises(ValueError):
        LossWeights(-1.0, 0.0)


def test_background_map_loss_is_measurement_norm(small_setup, physics8, truth8):
    meas = forward(truth8, small_setup, greens=physics8.greens)
    ev = evaluate_map(np.ones((8, 8)), meas, physics8, np.ones((8, 8), bool),
                      LossWeights(), with_grad=False)
    assert ev.loss.total == pytest.approx(np.linalg.norm(meas.samples), rel=1e-14)


# ------------------------------------------------------------------ gradients

def test_map_gradient_vanishes_at_truth(small_setup, physics8, truth8):
    meas = forward(truth8, small_setup, greens=physics8.greens)
    ev = evaluate_map(truth8, meas, physics8, truth8 != 1, LossWeights(0, 0))
    assert ev.loss.data <= 1e-12
    assert np.abs(ev.grad_re).max() <= 1e-8 and np.abs(ev.grad_im).max() <= 1e-8


def test_term_isolation(small_setup, physics8, truth8, rng):
    meas = forward(truth8, small_setup, greens=physics8.greens)
    eps = 1 + 0.6 * rng.random((8, 8)) - 0.4 - 0.1j * rng.random((8, 8))
    mask = np.ones((8, 8), bool)
    w = LossWeights(2.0, 0.7)
    a = evaluate_map(eps, meas, physics8, mask, LossWeights(0, 0))
    b = evaluate_map(eps, meas, physics8, mask, w)
    tv_re, tv_im = tv_grad(eps)
    assert np.allclose(b.grad_re - a.grad_re, 2.0 * bound_grad(eps) + 0.7 * tv_re, rtol=0, atol=1e-12)
    assert np.allclose(b.grad_im - a.grad_im, 0.7 * tv_im, rtol=0, atol=1e-12)


def test_parameter_gradient_matches_finite_differences(small_setup, physics8, truth8):
    rng = np.random.default_rng(11)
    meas = forward(truth8, small_setup, greens=physics8.greens)
    eps0 = truth8 * 0.9 + 0.1
    mask = np.zeros((8, 8), bool)
    mask[1:6, 2:7] = True
    params = net_init(2, 8)
    params.log_glow[:] = [np.log(0.3), np.log(0.9)]
    w = LossWeights(2.0, 0.5)
    _, grads, _ = loss_gradient(params, eps0, meas, physics8, mask, w)
    g = np.concatenate([a.ravel() for a in grads])
    v0 = params.to_vector()
    idx = list(rng.choice(v0.size - 2, 50, replace=False)) + [v0.size - 2, v0.size - 1]
    h = 1e-6
    for i in idx:
        q = params.copy()
        v = v0.copy()
        v[i] += h
        q.set_vector(v)
        up = loss_value(q, eps0, meas, physics8, mask, w).total
        v[i] -= 2 * h
        q.set_vector(v)
        down = loss_value(q, eps0, meas, physics8, mask, w).total
        fd = (up - down) / (2 * h)
        assert abs(g[i] - fd) <= 1e-4 * abs(fd) + 1e-8, (i, g[i], fd)


# ----------------------------------------------------------------------- Adam

def test_adam_first_step_moves_by_lr():
    params = net_init(0, 2)
    before = params.to_vector()
    grads = [np.full_like(a, 3.0) for a in params.arrays()]
    state = AdamState.for_params(params, lr=0.01)
    adam_step(params, grads, state)
    # bias correction makes the first step exactly lr * sign(g)
    assert np.allclose(before - params.to_vector(), 0.01, rtol=1e-6)
    assert state.step == 1
    assert all(m.shape == a.shape for m, a in zip(state.m, params.arrays()))


def test_adam_minimises_quadratic():
    params = net_init(0, 1)
    params.weight[:] = 1.0
    state = AdamState.for_params(params, lr=0.05)
    for _ in range(500):
        adam_step(params, [2 * a for a in params.arrays()], state)
    assert np.abs(params.to_vector()).max() < 1e-2


def test_adam_rejects_bad_shapes():
    params = net_init(0, 2)
    with pytest.raises(ValueError):
        adam_step(params, [np.zeros(3)], AdamState.for_params(params))
