"""Physics loss (data + bound + TV), adjoint-state gradients and Adam."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .em_core import (GreensOperators, Grid, MeasurementSet, Setup, StateSolver,
                      assemble_greens, incident_fields, make_grid)
from .glow_net import NetworkParams, net_backward, net_forward_state

TV_SMOOTHING = 1e-12
RESIDUAL_FLOOR = 1e-14


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 2.0
    beta: float = 0.01

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("loss weights must be non-negative")


@dataclass(frozen=True)
class LossBreakdown:
    data: float
    bound: float
    tv: float
    total: float

    @classmethod
    def compose(cls, data, bound, tv, weights: LossWeights) -> LossBreakdown:
        return cls(data, bound, tv, data + weights.alpha * bound + weights.beta * tv)


def _samples(m):
    return m.samples if isinstance(m, MeasurementSet) else np.asarray(m, dtype=complex)


def data_loss(pred, meas) -> float:
    """Unsquared 2-norm of the scattered-field misfit over all samples."""
    return float(np.linalg.norm(_samples(meas) - _samples(pred)))


def bound_loss(eps) -> float:
    return float(np.sum(np.maximum(0.0, 1.0 - np.real(eps))))


def bound_grad(eps) -> np.ndarray:
    """Subgradient w.r.t. Re(eps); zero at the kink."""
    return np.where(np.real(eps) < 1.0, -1.0, 0.0)


def _tv_parts(p: np.ndarray):
    # periodic neighbours: p[i, j-1] and p[i+1, j]
    dx = np.roll(p, 1, axis=1) - p
    dy = np.roll(p, -1, axis=0) - p
    r2 = dx * dx + dy * dy
    return dx, dy, r2, np.sqrt(r2 + TV_SMOOTHING)


def _tv_real(p: np.ndarray) -> float:
    _, _, r2, t = _tv_parts(p)
    return float(np.sum(r2 / t))


def _tv_real_grad(p: np.ndarray) -> np.ndarray:
    dx, dy, r2, t = _tv_parts(p)
    w = (r2 + 2 * TV_SMOOTHING) / t**3
    qx, qy = dx * w, dy * w
    return -(qx + qy) + np.roll(qx, -1, axis=1) + np.roll(qy, 1, axis=0)


def tv_loss(eps) -> float:
    """Isotropic TV of Re(eps) plus that of Im(eps), periodic wrap-around.

    Each term is ``r^2 / sqrt(r^2 + 1e-12)``: smooth at r = 0, exactly 0 on flat
    regions and within 1e-12 / r of the plain gradient magnitude r elsewhere.
    """
    eps = np.asarray(eps)
    return _tv_real(np.real(eps).astype(float)) + _tv_real(np.imag(eps).astype(float))


def tv_grad(eps):
    eps = np.asarray(eps)
    return _tv_real_grad(np.real(eps).astype(float)), _tv_real_grad(np.imag(eps).astype(float))


def total_loss(eps, pred, meas, weights: LossWeights) -> LossBreakdown:
    return LossBreakdown.compose(data_loss(pred, meas), bound_loss(eps), tv_loss(eps), weights)


@dataclass
class Physics:
    """Everything fixed for a given setup: grid, Green's operators, incident fields."""

    setup: Setup
    grid: Grid
    greens: GreensOperators
    E_inc: np.ndarray  # (N, T)

    @classmethod
    def build(cls, setup: Setup, greens: GreensOperators | None = None) -> Physics:
        grid = make_grid(setup)
        greens = greens or assemble_greens(setup, grid)
        return cls(setup, grid, greens, incident_fields(setup, grid))


@dataclass
class Evaluation:
    loss: LossBreakdown
    eps: np.ndarray
    pred: np.ndarray
    grad_re: np.ndarray  # dL/dRe(eps), (n, n)
    grad_im: np.ndarray  # dL/dIm(eps)


def evaluate_map(eps, meas, physics: Physics, mask, weights: LossWeights,
                 with_grad: bool = True) -> Evaluation:
    """Loss at ``eps`` and its gradient w.r.t. the real and imaginary parts.

    The data term is differentiated with one adjoint solve per transmitter that
    reuses the forward LU factorization.
    """
    eps = np.asarray(eps, dtype=complex)
    shape = eps.shape
    solver = StateSolver(eps, physics.greens, mask)
    idx = solver.idx
    E_a = solver.solve(physics.E_inc[idx])
    G_Sa = physics.greens.G_S[:, idx]
    pred = G_Sa @ (solver.chi[:, None] * E_a)
    resid = _samples(meas) - pred
    d = float(np.linalg.norm(resid))
    loss = LossBreakdown.compose(d, bound_loss(eps), tv_loss(eps), weights)
    if not with_grad:
        return Evaluation(loss, eps, pred, None, None)

    g_re = np.zeros(eps.size)
    g_im = np.zeros(eps.size)
    if d >= RESIDUAL_FLOOR:
        w_conj = solver.solve(G_Sa.T @ resid.conj())
        a = np.sum(w_conj * E_a, axis=1)
        g_re[idx] = -a.real / d
        g_im[idx] = a.imag / d
    g_re = g_re.reshape(shape) + weights.alpha * bound_grad(eps)
    tv_re, tv_im = tv_grad(eps)
    g_re += weights.beta * tv_re
    g_im = g_im.reshape(shape) + weights.beta * tv_im
    return Evaluation(loss, eps, pred, g_re, g_im)


def loss_gradient(params: NetworkParams, eps0, meas, physics: Physics, mask,
                  weights: LossWeights):
    """Loss breakdown and exact gradient w.r.t. ``params.arrays()``."""
    state = net_forward_state(params, eps0)
    ev = evaluate_map(state.eps, meas, physics, mask, weights)
    return ev.loss, net_backward(params, state, ev.grad_re, ev.grad_im), ev


def loss_value(params: NetworkParams, eps0, meas, physics: Physics, mask,
               weights: LossWeights) -> LossBreakdown:
    state = net_forward_state(params, eps0)
    return evaluate_map(state.eps, meas, physics, mask, weights, with_grad=False).loss


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)
    _scratch: list = field(default_factory=list, repr=False)

    @classmethod
    def for_params(cls, params: NetworkParams, lr: float = 1e-3, **kw) -> AdamState:
        arrays = params.arrays()
        return cls(lr=lr, m=[np.zeros_like(a) for a in arrays],
                   v=[np.zeros_like(a) for a in arrays], **kw)


def adam_step(params: NetworkParams, grads, state: AdamState) -> None:
    """Bias-corrected Adam update, applied in place to ``params`` and ``state``."""
    arrays = params.arrays()
    if len(grads) != len(arrays) or any(g.shape != a.shape for g, a in zip(grads, arrays)):
        raise ValueError("gradient shapes do not match the parameters")
    if not state._scratch:
        state._scratch = [np.empty_like(a) for a in arrays]
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    # in place: the weight matrix dominates memory traffic
    for a, g, m, v, tmp in zip(arrays, grads, state.m, state.v, state._scratch):
        m *= b1
        np.multiply(g, 1.0 - b1, out=tmp)
        m += tmp
        v *= b2
        np.multiply(g, g, out=tmp)
        tmp *= 1.0 - b2
        v += tmp
        np.multiply(v, 1.0 / c2, out=tmp)
        np.sqrt(tmp, out=tmp)
        tmp += state.eps
        np.divide(m, tmp, out=tmp)
        tmp *= state.lr / c1
        a -= tmp
