"""Tests for the learning-rate schedule, clipping and Adam."""

import numpy as np
import pytest

from src.modules.optimizer import (
    AdamState,
    adam_step,
    check_gradients_finite,
    clip_gradients,
    gradient_norm,
    learning_rate,
)
from src.utils.exceptions import ContractError, NumericError


def _fill_grads(params, value):
    for _, t in params:
        t.grad = np.full(t.shape, value)


def test_learning_rate_peaks_at_warmup():
    d, warmup = 256, 4000
    peak = learning_rate(warmup, d, warmup)
    assert peak == pytest.approx(d ** -0.5 * warmup ** -0.5)
    assert learning_rate(warmup // 2, d, warmup) < peak
    assert learning_rate(warmup * 4, d, warmup) == pytest.approx(peak / 2)


def test_learning_rate_is_linear_during_warmup():
    a = learning_rate(10, 64, 100)
    b = learning_rate(20, 64, 100)
    assert b == pytest.approx(2 * a)
    assert learning_rate(10, 64, 100, scale=3.0) == pytest.approx(3 * a)


@pytest.mark.parametrize("step", [0, -3])
def test_learning_rate_rejects_step_before_one(step):
    with pytest.raises(ContractError):
        learning_rate(step, 64, 100)


def test_first_adam_step_moves_by_lr_times_sign(tiny_params):
    before = {name: t.data.copy() for name, t in tiny_params}
    state = AdamState.for_params(tiny_params)
    _fill_grads(tiny_params, 0.25)

    adam_step(tiny_params, state, lr=0.01)

    expected_delta = 0.01 * 0.25 / (0.25 + state.eps)
    for name, t in tiny_params:
        assert np.allclose(before[name] - t.data, expected_delta, rtol=1e-9)
        assert t.grad is None
    assert state.step == 1


def test_zero_gradient_leaves_parameters_unchanged(tiny_params):
    before = tiny_params.copy()
    state = AdamState.for_params(tiny_params)
    _fill_grads(tiny_params, 0.0)
    adam_step(tiny_params, state, lr=0.1)
    assert tiny_params.equals(before)


def test_non_finite_gradient_is_refused_before_update(tiny_params):
    before = tiny_params.copy()
    state = AdamState.for_params(tiny_params)
    _fill_grads(tiny_params, 1.0)
    tiny_params["output.bias"].grad[0] = np.nan

    with pytest.raises(NumericError):
        check_gradients_finite(tiny_params)
    with pytest.raises(NumericError):
        adam_step(tiny_params, state, lr=0.1)
    assert tiny_params.equals(before)
    assert state.step == 0


def test_clip_rescales_to_max_norm(tiny_params):
    _fill_grads(tiny_params, 1.0)
    total = sum(t.data.size for _, t in tiny_params)

    norm, clipped = clip_gradients(tiny_params, max_norm=1.0)

    assert clipped
    assert norm == pytest.approx(np.sqrt(total))
    assert gradient_norm(tiny_params) == pytest.approx(1.0)


def test_clip_leaves_small_gradients_alone(tiny_params):
    _fill_grads(tiny_params, 1e-6)
    norm, clipped = clip_gradients(tiny_params, max_norm=5.0)
    assert not clipped
    assert gradient_norm(tiny_params) == pytest.approx(norm)
