"""Training loop: BP seed, masked physics loss, scheduled subregion updates, transfer."""
from __future__ import annotations

import csv
import logging
import time
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np

from .em_core import MeasurementSet, Setup, bp_initializer
from .glow_net import ACTIVATIONS, NetworkParams, net_forward, net_init
from .objective import AdamState, LossWeights, Physics, adam_step, loss_gradient
from .subregion import (Action, StabilityTracker, popcount, schedule, threshold_mask,
                        update_mask)

log = logging.getLogger(__name__)

LOG_FIELDS = ["iter", "data", "bound", "tv", "total", "rel_err", "n_active_cells"]


class NumericalFailure(RuntimeError):
    pass


class FingerprintMismatch(ValueError):
    pass


@dataclass
class InversionConfig:
    max_iters: int = 2000
    lr: float = 1e-3
    alpha: float = 2.0
    beta: float = 0.01
    threshold_period: int = 100
    min_update_iter: int = 500
    stability_window: int = 5
    seed: int = 0
    activation: str = "glow"
    stop_tol: float = 0.0

    def __post_init__(self):
        if self.threshold_period <= 0 or self.stability_window <= 0 or self.max_iters < 0:
            raise ValueError("periods and iteration counts must be positive")
        if self.min_update_iter < self.threshold_period:
            raise ValueError("min_update_iter must be >= threshold_period")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        LossWeights(self.alpha, self.beta)

    @property
    def weights(self) -> LossWeights:
        return LossWeights(self.alpha, self.beta)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> InversionConfig:
        known = cls.__dataclass_fields__.keys()
        unknown = set(d) - set(known)
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class ReconstructionResult:
    eps_hat: np.ndarray         # best map, background outside the final mask
    eps_raw: np.ndarray         # best network output over the whole DOI
    mask: np.ndarray            # mask in force at the end of the run
    initial_mask: np.ndarray
    eps_init: np.ndarray        # BP seed fed to the network
    log: list                   # one dict per iteration (LOG_FIELDS)
    params: NetworkParams       # parameters at the best iteration
    final_params: NetworkParams
    best_iter: int
    iterations: int
    wall_time: float
    mask_history: list = field(default_factory=list)  # (iteration, mask) after each update

    @property
    def best_loss(self) -> float:
        return self.log[self.best_iter - 1]["total"] if self.log else float("nan")


def relative_error(eps_true, eps_hat) -> float:
    eps_true = np.asarray(eps_true)
    return float(np.linalg.norm(eps_true - np.asarray(eps_hat)) / np.linalg.norm(eps_true))


def apply_mask(eps: np.ndarray, mask: np.ndarray) -> np.ndarray:
    return np.where(mask, eps, 1.0 + 0j)


def invert(meas: MeasurementSet, setup: Setup, config: InversionConfig | None = None,
           init_params: NetworkParams | None = None, truth=None,
           physics: Physics | None = None, on_mask_update=None,
           initial_map=None) -> ReconstructionResult:
    """Train the network so its output explains ``meas`` under the MoM forward model.

    ``on_mask_update(k, mask)`` is called after every accepted subregion update.
    ``initial_map`` overrides the backpropagation seed.
    """
    config = config or InversionConfig()
    meas.check_against(setup)
    t0 = time.perf_counter()
    physics = physics or Physics.build(setup)
    weights = config.weights

    eps0 = bp_initializer(meas, setup, physics.greens, physics.grid) if initial_map is None \
        else np.asarray(initial_map, dtype=complex)
    B0 = threshold_mask(eps0)
    if not B0.any():
        warnings.warn("initial mask is empty; using the full DOI", RuntimeWarning)
        B0 = np.ones_like(B0)
    mask = B0.copy()

    if init_params is not None:
        if init_params.grid_fingerprint and init_params.grid_fingerprint != setup.grid_fingerprint():
            raise FingerprintMismatch("checkpoint was trained on a different grid")
        params = init_params.copy()
        params.grid_fingerprint = setup.grid_fingerprint()
    else:
        params = net_init(config.seed, setup.n_side, config.activation, setup.grid_fingerprint())
    adam = AdamState.for_params(params, lr=config.lr)
    tracker = StabilityTracker(config.stability_window)
    first_update = True

    best = params.copy()
    best_total, best_iter = np.inf, 0
    best_raw = best_mask = None
    rows, history = [], []
    prev_total = None
    k = 0
    for k in range(1, config.max_iters + 1):
        loss, grads, ev = loss_gradient(params, eps0, meas, physics, mask, weights)
        if not np.isfinite(loss.total) or not all(np.all(np.isfinite(g)) for g in grads):
            raise NumericalFailure(f"non-finite loss or gradient at iteration {k}: {loss}")
        row = {"iter": k, "data": loss.data, "bound": loss.bound, "tv": loss.tv,
               "total": loss.total,
               "rel_err": relative_error(truth, apply_mask(ev.eps, mask)) if truth is not None else "",
               "n_active_cells": popcount(mask)}
        rows.append(row)
        if loss.total < best_total:
            best_total, best_iter = loss.total, k
            for dst, src in zip(best.arrays(), params.arrays()):
                np.copyto(dst, src)
            best_raw, best_mask = ev.eps, mask.copy()

        adam_step(params, grads, adam)

        action = schedule(k, config.threshold_period, config.min_update_iter)
        if action is not Action.NONE:
            B_k = threshold_mask(ev.eps)
            stable = tracker.update(popcount(B_k))
            if action is Action.THRESHOLD_AND_MAYBE_UPDATE and stable:
                new = update_mask(mask, B_k, B0, first_update)
                first_update = False
                if not np.array_equal(new, mask):
                    log.info("iter %d: subregion %d -> %d cells", k, popcount(mask), popcount(new))
                mask = new
                history.append((k, mask.copy()))
                if on_mask_update is not None:
                    on_mask_update(k, mask)

        if config.stop_tol > 0 and prev_total is not None:
            if abs(prev_total - loss.total) <= config.stop_tol * abs(prev_total):
                break
        prev_total = loss.total

    if best_raw is None:  # zero iterations
        best_raw = net_forward(params, eps0)
        best_mask = mask
    return ReconstructionResult(
        eps_hat=apply_mask(best_raw, best_mask), eps_raw=best_raw, mask=mask,
        initial_mask=B0, eps_init=eps0, log=rows, params=best, final_params=params,
        best_iter=best_iter, iterations=len(rows), wall_time=time.perf_counter() - t0,
        mask_history=history)


def pretrain(sound_meas: MeasurementSet, setup: Setup, config: InversionConfig | None = None,
             **kw):
    """Run on defect-free data; returns (checkpoint params, full result)."""
    result = invert(sound_meas, setup, config, **kw)
    ckpt = result.final_params.copy()
    ckpt.grid_fingerprint = setup.grid_fingerprint()
    return ckpt, result


def finetune(checkpoint: NetworkParams, defect_meas: MeasurementSet, setup: Setup,
             config: InversionConfig | None = None, **kw) -> ReconstructionResult:
    """Continue training from ``checkpoint`` on new measurements of the same grid."""
    if checkpoint.grid_fingerprint != setup.grid_fingerprint():
        raise FingerprintMismatch(
            f"checkpoint grid {checkpoint.grid_fingerprint!r} != setup grid "
            f"{setup.grid_fingerprint()!r}")
    return invert(defect_meas, setup, config, init_params=checkpoint, **kw)


def write_log(rows, path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=LOG_FIELDS, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(float(v)) if isinstance(v, float) else v) for k, v in r.items()})
