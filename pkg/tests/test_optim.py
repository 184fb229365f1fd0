"""Warmup schedule and Adam update tests against hand-computed values."""

import numpy as np
import pytest

from natmt.optim import AdamWarmup, warmup_rate
from natmt.tensor import Tensor


def test_rate_warmup_monotone_up():
    w = 746
    rates = [warmup_rate(t, 1.0, w) for t in range(1, w + 1)]
    assert rates[0] < rates[-1]
    assert all(b >= a for a, b in zip(rates, rates[1:]))


def test_rate_decays_after_warmup():
    w = 746
    rates = [warmup_rate(t, 1.0, w) for t in range(w, w + 500)]
    assert all(b <= a for a, b in zip(rates, rates[1:]))


def test_rate_peak_at_warmup():
    w = 100
    assert warmup_rate(w, 2.0, w) == pytest.approx(2.0 * w ** -0.5)


def test_adam_single_step_hand_value():
    # p0=0.5, g=1, defaults beta1=0.9, beta2=0.98, eps=1e-9, warmup=4000:
    # t=1: lr = 4000^-1.5 = 3.952847e-06, mhat = 1, vhat = 1,
    # p1 = 0.5 - lr/(1+1e-9) = 0.4999960471529287
    p = Tensor(np.array([0.5]), requires_grad=True)
    p.grad = np.array([1.0], dtype=np.float32)
    opt = AdamWarmup([("p", p)], scale=1.0, warmup=4000)
    lr = opt.step()
    assert lr == pytest.approx(3.952847075210474e-06)
    assert p.data[0] == pytest.approx(0.4999960471529287, abs=1e-7)
    assert opt.m["p"][0] == pytest.approx(0.1, abs=1e-7)
    assert opt.v["p"][0] == pytest.approx(0.02, abs=1e-8)


def test_adam_two_steps_match_reference_loop():
    rng = np.random.default_rng(0)
    p0 = rng.normal(0, 1, 5).astype(np.float32)
    grads = [rng.normal(0, 1, 5).astype(np.float32) for _ in range(2)]

    p = Tensor(p0.copy(), requires_grad=True)
    opt = AdamWarmup([("p", p)], scale=0.5, warmup=10)
    for g in grads:
        p.grad = g.copy()
        opt.step()

    # independent reference in float64
    ref = p0.astype(np.float64).copy()
    m = np.zeros(5)
    v = np.zeros(5)
    for t, g in enumerate(grads, start=1):
        lr = 0.5 * min(t ** -0.5, t * 10 ** -1.5)
        m = 0.9 * m + 0.1 * g
        v = 0.98 * v + 0.02 * g * g
        ref -= lr * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.98 ** t)) + 1e-9)
    np.testing.assert_allclose(p.data, ref, atol=1e-6)


def test_adam_shape_mismatch_errors():
    p = Tensor(np.zeros(3), requires_grad=True)
    p.grad = np.zeros(4, dtype=np.float32)
    opt = AdamWarmup([("p", p)], scale=1.0)
    with pytest.raises(ValueError):
        opt.step()
