"""Optimizer tests against a plain-numpy reference implementation."""

import numpy as np
import pytest

from sardino import autograd as ag
from sardino.errors import ConfigError, NumericError
from sardino.nn import Parameter
from sardino.optim import SGD, Adam, make_optimizer

F64 = np.float64


def reference_adam(p, grads, lr, b1=0.9, b2=0.999, eps=1e-8):
    """Textbook Adam trace over a list of gradients."""
    p = p.copy()
    m = np.zeros_like(p)
    v = np.zeros_like(p)
    for t, g in enumerate(grads, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        mhat = m / (1 - b1 ** t)
        vhat = v / (1 - b2 ** t)
        p = p - lr * mhat / (np.sqrt(vhat) + eps)
    return p


def test_adam_single_step_closed_form():
    p = Parameter(np.zeros(3, dtype=F64), dtype=F64)
    p.grad = np.array([1.0, -2.0, 0.5])
    opt = Adam([("p", p)], lr=0.1)
    opt.step()
    # first step: mhat = g, vhat = g^2, so the update is -lr * sign(g) up to eps
    expected = -0.1 * np.array([1.0, -2.0, 0.5]) / (np.array([1.0, 2.0, 0.5]) + 1e-8)
    np.testing.assert_allclose(p.data, expected, rtol=1e-12)


def test_adam_matches_reference_over_steps(rng):
    init = rng.normal(size=(4, 5))
    grads = [rng.normal(size=(4, 5)) for _ in range(7)]
    p = Parameter(init.copy(), dtype=F64)
    opt = Adam([("w", p)], lr=0.05)
    for g in grads:
        p.grad = g.copy()
        opt.step()
    np.testing.assert_allclose(p.data, reference_adam(init, grads, 0.05), rtol=1e-10)


def test_adam_lr_zero_is_identity(rng):
    init = rng.normal(size=(6,))
    p = Parameter(init.copy(), dtype=F64)
    opt = Adam([("w", p)], lr=0.0)
    for _ in range(3):
        p.grad = rng.normal(size=(6,))
        opt.step()
    assert np.array_equal(p.data, init)


def test_adam_zero_gradient_leaves_params():
    p = Parameter(np.array([1.0, 2.0]), dtype=F64)
    opt = Adam([("w", p)], lr=0.3)
    p.grad = np.ones(2)
    opt.step()
    after_real_step = p.data.copy()
    p.grad = np.zeros(2)
    opt.step()
    # mhat becomes (decayed m)/(bias corr), nonzero, so params still move;
    # but with moments never populated the update is exactly zero
    q = Parameter(np.array([1.0, 2.0]), dtype=F64)
    opt2 = Adam([("w", q)], lr=0.3)
    q.grad = np.zeros(2)
    opt2.step()
    np.testing.assert_array_equal(q.data, np.array([1.0, 2.0]))
    assert not np.array_equal(p.data, after_real_step)  # momentum keeps moving


def test_missing_gradient_skips_param():
    p = Parameter(np.array([1.0]), dtype=F64)
    opt = Adam([("w", p)], lr=0.5)
    opt.step()
    np.testing.assert_array_equal(p.data, [1.0])


def test_frozen_param_not_updated():
    p = Parameter(np.array([1.0]), dtype=F64)
    p.requires_grad = False
    p.grad = np.array([5.0])
    Adam([("w", p)], lr=0.5).step()
    np.testing.assert_array_equal(p.data, [1.0])


def test_nan_gradient_raises_with_name():
    p = Parameter(np.array([1.0]), dtype=F64)
    p.grad = np.array([np.nan])
    opt = Adam([("encoder.blocks.0.weight", p)], lr=0.1)
    with pytest.raises(NumericError, match="encoder.blocks.0.weight"):
        opt.step()


def test_step_clears_gradients():
    p = Parameter(np.array([1.0]), dtype=F64)
    p.grad = np.array([1.0])
    Adam([("w", p)], lr=0.1).step()
    assert p.grad is None


def test_sgd_matches_reference(rng):
    init = rng.normal(size=(5,))
    grads = [rng.normal(size=(5,)) for _ in range(4)]
    p = Parameter(init.copy(), dtype=F64)
    opt = SGD([("w", p)], lr=0.1, momentum=0.9)
    ref = init.copy()
    vel = np.zeros(5)
    for g in grads:
        p.grad = g.copy()
        opt.step()
        vel = 0.9 * vel + g
        ref = ref - 0.1 * vel
    np.testing.assert_allclose(p.data, ref, rtol=1e-12)


def test_adam_end_to_end_descends(rng):
    """A few steps on a quadratic through the tape should reduce the loss."""
    target = rng.normal(size=(4,))
    p = Parameter(np.zeros(4, dtype=F64), dtype=F64)
    opt = Adam([("w", p)], lr=0.1)
    losses = []
    for _ in range(30):
        with ag.Tape() as tape:
            diff = p - ag.Tensor(target, dtype=F64)
            loss = ag.reduce_sum(diff * diff)
        losses.append(loss.item())
        ag.backward(loss, tape)
        opt.step()
    assert losses[-1] < 0.1 * losses[0]


def test_make_optimizer_rejects_unknown_kind():
    with pytest.raises(ConfigError):
        make_optimizer("rmsprop", [], lr=0.1)
