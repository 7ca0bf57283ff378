"""GLOW activation and the single-layer two-channel generator network."""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

# imaginary channel maps to -Im(eps): positive activations mean loss under exp(+jwt)
IMAG_SIGN = -1.0
ACTIVATIONS = ("glow", "relu", "leakyrelu", "tanh", "softsign")
LEAKY_SLOPE = 0.01


@dataclass
class GlowParams:
    """Transition point ``c`` and decay scale ``sigma``, stored as logs."""

    log_c: float = 0.0
    log_sigma: float = 0.0

    @property
    def c(self) -> float:
        return float(np.exp(self.log_c))

    @property
    def sigma(self) -> float:
        return float(np.exp(self.log_sigma))

    @classmethod
    def from_values(cls, c: float, sigma: float) -> GlowParams:
        if c <= 0 or sigma <= 0:
            raise ValueError("GLOW parameters must be positive")
        return cls(float(np.log(c)), float(np.log(sigma)))


def glow(x, params: GlowParams):
    """Odd activation: ``x^2/2`` inside ``|x| <= c``, Gaussian-saturating outside.

    The outer branch carries the constant ``c^2/2`` so the function is C1 at
    ``|x| = c`` and tends to ``c^2/2 + sigma^2/2``.
    """
    c, s = params.c, params.sigma
    x = np.asarray(x, dtype=float)
    ax = np.abs(x)
    outer = 0.5 * c * c + 0.5 * s * s * -np.expm1(np.minimum((c * c - ax * ax) / (s * s), 0.0))
    return np.sign(x) * np.where(ax <= c, 0.5 * ax * ax, outer)


def glow_prime(x, params: GlowParams):
    c, s = params.c, params.sigma
    ax = np.abs(np.asarray(x, dtype=float))
    decay = np.exp(np.minimum((c * c - ax * ax) / (s * s), 0.0))
    return np.where(ax <= c, ax, ax * decay)


def glow_param_grads(x, params: GlowParams):
    """Partial derivatives of ``glow`` with respect to ``c`` and ``sigma``."""
    c, s = params.c, params.sigma
    x = np.asarray(x, dtype=float)
    ax = np.abs(x)
    sgn = np.sign(x)
    t = (c * c - ax * ax) / (s * s)
    e = np.exp(np.minimum(t, 0.0))
    outside = ax > c
    d_c = np.where(outside, sgn * c * (1.0 - e), 0.0)
    d_s = np.where(outside, sgn * (s * (1.0 - e) + e * (c * c - ax * ax) / s), 0.0)
    return d_c, d_s


def alt_activation(name: str, x):
    """Value and derivative of one of the comparison activations."""
    x = np.asarray(x, dtype=float)
    if name == "relu":
        return np.maximum(x, 0.0), (x > 0).astype(float)
    if name == "leakyrelu":
        return np.where(x > 0, x, LEAKY_SLOPE * x), np.where(x > 0, 1.0, LEAKY_SLOPE)
    if name == "tanh":
        t = np.tanh(x)
        return t, 1.0 - t * t
    if name == "softsign":
        d = 1.0 + np.abs(x)
        return x / d, 1.0 / (d * d)
    raise ValueError(f"unknown activation {name!r}; choose from {ACTIVATIONS}")


@dataclass
class NetworkParams:
    weight: np.ndarray    # (2N, 2N)
    bias: np.ndarray      # (2N,)
    log_glow: np.ndarray  # [log c, log sigma]
    activation: str = "glow"
    grid_fingerprint: str = ""

    @property
    def glow(self) -> GlowParams:
        return GlowParams(float(self.log_glow[0]), float(self.log_glow[1]))

    @property
    def n_cells(self) -> int:
        return self.bias.size // 2

    def arrays(self) -> list[np.ndarray]:
        """Trainable arrays, in the order gradients are returned."""
        return [self.weight, self.bias, self.log_glow]

    def copy(self) -> NetworkParams:
        return NetworkParams(self.weight.copy(), self.bias.copy(), self.log_glow.copy(),
                             self.activation, self.grid_fingerprint)

    def to_vector(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.arrays()])

    def set_vector(self, v: np.ndarray) -> None:
        start = 0
        for a in self.arrays():
            a[...] = v[start:start + a.size].reshape(a.shape)
            start += a.size

    def save(self, path) -> None:
        """Write an ``.npz`` checkpoint (lossless)."""
        meta = {"version": 1, "activation": self.activation,
                "grid_fingerprint": self.grid_fingerprint}
        with open(path, "wb") as fh:
            np.savez(fh, weight=self.weight, bias=self.bias, log_glow=self.log_glow,
                     meta=np.array(json.dumps(meta)))

    @classmethod
    def load(cls, path) -> NetworkParams:
        with np.load(Path(path), allow_pickle=False) as z:
            meta = json.loads(str(z["meta"]))
            w, b, lg = z["weight"], z["bias"], z["log_glow"]
        if w.shape != (b.size, b.size) or lg.shape != (2,):
            raise ValueError(f"checkpoint {path}: inconsistent array shapes")
        return cls(w.copy(), b.copy(), lg.copy(), meta["activation"],
                   meta["grid_fingerprint"])


def net_init(seed: int, n_side: int, activation: str = "glow",
             grid_fingerprint: str = "") -> NetworkParams:
    if activation not in ACTIVATIONS:
        raise ValueError(f"unknown activation {activation!r}")
    n2 = 2 * n_side * n_side
    rng = np.random.default_rng(seed)
    bound = 1.0 / np.sqrt(n2)
    weight = rng.uniform(-bound, bound, size=(n2, n2))
    return NetworkParams(weight, np.zeros(n2), np.zeros(2), activation, grid_fingerprint)


def map_to_channels(eps: np.ndarray) -> np.ndarray:
    """Two-channel network input: contrast ``[Re(eps) - 1; Im(eps)]``."""
    eps = np.asarray(eps, dtype=complex).ravel()
    return np.concatenate([eps.real - 1.0, eps.imag])


def _activate(params: NetworkParams, z: np.ndarray):
    if params.activation == "glow":
        return glow(z, params.glow), glow_prime(z, params.glow)
    return alt_activation(params.activation, z)


@dataclass
class NetState:
    """Intermediates of one forward pass, kept for backpropagation."""

    x: np.ndarray
    z: np.ndarray
    out: np.ndarray
    dout: np.ndarray
    eps: np.ndarray


def net_forward_state(params: NetworkParams, input_map: np.ndarray) -> NetState:
    x = map_to_channels(input_map)
    if x.size != params.bias.size:
        raise ValueError(f"input has {x.size // 2} cells, network expects {params.n_cells}")
    z = params.weight @ x + params.bias
    out, dout = _activate(params, z)
    n = params.n_cells
    side = int(round(np.sqrt(n)))
    eps = (1.0 + out[:n] + 1j * IMAG_SIGN * out[n:]).reshape(side, side)
    return NetState(x, z, out, dout, eps)


def net_forward(params: NetworkParams, input_map: np.ndarray) -> np.ndarray:
    """Refined permittivity map ``1 + out_re + j*IMAG_SIGN*out_im``."""
    return net_forward_state(params, input_map).eps


def net_backward(params: NetworkParams, state: NetState, grad_eps_re: np.ndarray,
                 grad_eps_im: np.ndarray) -> list[np.ndarray]:
    """Chain a gradient w.r.t. (Re eps, Im eps) back to ``params.arrays()``."""
    g_out = np.concatenate([np.ravel(grad_eps_re), IMAG_SIGN * np.ravel(grad_eps_im)])
    g_z = g_out * state.dout
    grad_glow = np.zeros(2)
    if params.activation == "glow":
        gp = params.glow
        d_c, d_s = glow_param_grads(state.z, gp)
        grad_glow[:] = gp.c * (g_out @ d_c), gp.sigma * (g_out @ d_s)
    return [np.outer(g_z, state.x), g_z, grad_glow]
