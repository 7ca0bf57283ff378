import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from ipdnn.subregion import (Action, StabilityTracker, popcount, schedule, stability_update,
                             threshold_mask, update_mask, write_pbm)

masks = arrays(bool, (6, 6))


@pytest.mark.parametrize("value", [1.0, 1.4, 1.7, 2.3 - 0.1j])
def test_uniform_map_all_active(value):
    # sigma = 0 and every cell equals mu; must survive rounding in the mean
    assert threshold_mask(np.full((8, 8), value)).all()


def test_single_outlier_over_textured_background():
    # lowest 8 of 25 cells spread over [0.9, 1.0]: tau = 0.95 + 3 * 0.0327 ~ 1.048
    eps = np.ones(25, complex)
    eps[:8] = np.linspace(0.9, 1.0, 8)
    eps = eps.reshape(5, 5)
    eps[2, 3] = 2.0
    m = threshold_mask(eps)
    assert popcount(m) == 1 and m[2, 3]


def test_single_outlier_over_flat_background_ties():
    # sigma = 0 puts the threshold on the background value, so ">=" admits every cell
    eps = np.ones((8, 8))
    eps[2, 3] = 2.0
    assert threshold_mask(eps).all()


def test_threshold_hand_trace():
    # lowest ceil(0.3*10)=3 values: 1, 1, 1.3 -> mu = 1.1, sigma = sqrt(0.02)
    eps = np.array([[1.0, 1.0, 1.3, 1.5, 1.5, 1.7, 1.9, 2.0, 2.0, 2.2]])
    tau = 1.1 + 3 * np.sqrt(0.02)
    assert math.ceil(0.3 * 10) == 3
    assert np.array_equal(threshold_mask(eps), eps.real >= tau)
    assert popcount(threshold_mask(eps)) == 5


def test_threshold_uses_real_part_only():
    eps = np.ones((4, 4), complex)
    eps[0, 0] = 1 - 5j
    assert threshold_mask(eps).all()


@settings(max_examples=100, deadline=None)
@given(masks, masks, masks)
def test_first_update_superset(current, B_k, B_0):
    new = update_mask(current, B_k, B_0, True)
    if (B_0 | B_k).any():
        assert np.all(new >= B_0) and np.all(new >= B_k)
    later = update_mask(current, B_k, B_0, False)
    if B_k.any():
        assert np.array_equal(later, B_k)


def test_empty_update_keeps_current(caplog):
    cur = np.eye(3, dtype=bool)
    z = np.zeros((3, 3), bool)
    assert np.array_equal(update_mask(cur, z, z, False), cur)
    assert "empty" in caplog.text


def test_schedule():
    for k in range(1, 2001):
        a = schedule(k)
        if k % 100:
            assert a is Action.NONE
        elif k < 500:
            assert a is Action.THRESHOLD_ONLY
        else:
            assert a is Action.THRESHOLD_AND_MAYBE_UPDATE
    assert schedule(0) is Action.NONE


def test_stability_closed_interval_fixtures():
    def run(history, count):
        t = StabilityTracker(5)
        for h in history:
            t.update(h)
        return t.update(count)

    # constant history: sigma = 0, closed interval accepts an exact repeat
    assert run([100] * 5, 100)
    assert not run([100] * 5, 101)
    # mean 102, population std 2*sqrt(2) ~= 2.83
    hist = [98, 100, 102, 104, 106]
    assert run(hist, 102)
    assert run(hist, 104)
    assert not run(hist, 105)
    assert not run(hist, 98)
    # window not yet full
    assert not run([100] * 4, 100)


def test_stability_window_rolls():
    t = StabilityTracker(3)
    for c in [10, 500, 500, 500]:
        t.update(c)
    assert list(t.history) == [500, 500, 500]
    _, ok = stability_update(t, 500)
    assert ok
    with pytest.raises(ValueError):
        StabilityTracker(0)


def test_write_pbm(tmp_path):
    m = np.array([[True, False, False], [False, True, True]])
    write_pbm(m, tmp_path / "m.pbm")
    assert (tmp_path / "m.pbm").read_text() == "P1\n3 2\n1 0 0\n0 1 1\n"
