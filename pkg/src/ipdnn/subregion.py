"""Dynamic scatter-subregion identification: thresholding, stability, mask policy."""
from __future__ import annotations

import enum
import logging
import math
from collections import deque
from dataclasses import dataclass, field

import numpy as np

log = logging.getLogger(__name__)

LOW_FRACTION = 0.3
N_SIGMA = 3.0


def threshold_mask(eps, low_fraction: float = LOW_FRACTION) -> np.ndarray:
    """Cells whose Re(eps) reaches mu + 3 sigma of the lowest 30% of the map.

    Statistics use the population standard deviation over the whole DOI.
    """
    re = np.real(np.asarray(eps))
    v = np.sort(re, axis=None)
    k = math.ceil(low_fraction * v.size)
    # shift by the minimum so a constant tail gives exactly mu = value, sigma = 0
    low = v[:k] - v[0]
    return re >= v[0] + (low.mean() + N_SIGMA * low.std())


def popcount(mask) -> int:
    return int(np.count_nonzero(mask))


@dataclass
class StabilityTracker:
    """Recent active-cell counts; a count is stable if it lies within one std of their mean."""

    window: int = 5
    history: deque = field(default=None)

    def __post_init__(self):
        if self.window < 1:
            raise ValueError("window must be positive")
        if self.history is None:
            self.history = deque(maxlen=self.window)
        else:
            self.history = deque(self.history, maxlen=self.window)

    @property
    def mean(self) -> float:
        return float(np.mean(self.history)) if self.history else float("nan")

    @property
    def std(self) -> float:
        return float(np.std(self.history)) if self.history else float("nan")

    def update(self, count: int) -> bool:
        """Check ``count`` against the current window, then record it."""
        stable = (len(self.history) == self.window
                  and abs(count - self.mean) <= self.std)
        self.history.append(int(count))
        return stable


def stability_update(tracker: StabilityTracker, count: int):
    return tracker, tracker.update(count)


def update_mask(current, B_k, B_0, is_first_update: bool) -> np.ndarray:
    """Union with the initial mask on the first update, plain replacement afterwards."""
    B_k = np.asarray(B_k, dtype=bool)
    new = (np.asarray(B_0, dtype=bool) | B_k) if is_first_update else B_k.copy()
    if not new.any():
        log.warning("thresholded mask is empty; keeping the current subregion")
        return np.asarray(current, dtype=bool).copy()
    return new


class Action(enum.Enum):
    NONE = "none"
    THRESHOLD_ONLY = "threshold_only"
    THRESHOLD_AND_MAYBE_UPDATE = "threshold_and_maybe_update"


def schedule(k: int, period: int = 100, min_update_iter: int = 500) -> Action:
    if k <= 0 or k % period:
        return Action.NONE
    if k < min_update_iter:
        return Action.THRESHOLD_ONLY
    return Action.THRESHOLD_AND_MAYBE_UPDATE


def write_pbm(mask, path) -> None:
    """Plain (P1) bitmap, row 0 first."""
    m = np.asarray(mask, dtype=bool)
    rows = [" ".join("1" if b else "0" for b in row) for row in m]
    with open(path, "w", encoding="ascii") as fh:
        fh.write(f"P1\n{m.shape[1]} {m.shape[0]}\n" + "\n".join(rows) + "\n")
