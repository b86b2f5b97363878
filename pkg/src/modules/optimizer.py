"""Adam with a warmup/inverse-sqrt learning-rate schedule and global-norm clipping."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .model import ModelParams
from ..utils.exceptions import ContractError, NumericError

logger = logging.getLogger(__name__)


def learning_rate(step: int, model_dim: int, warmup_steps: int, scale: float = 1.0) -> float:
    """scale · d^-0.5 · min(step^-0.5, step · warmup^-1.5); steps count from 1."""
    if step < 1:
        raise ContractError(f"learning-rate step must be >= 1, got {step}")
    if warmup_steps < 1:
        raise ContractError(f"warmup_steps must be >= 1, got {warmup_steps}")
    return scale * model_dim ** -0.5 * min(step ** -0.5, step * warmup_steps ** -1.5)


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-9
    step: int = 0
    first_moment: dict[str, np.ndarray] = field(default_factory=dict)
    second_moment: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def for_params(cls, params: ModelParams, beta1: float = 0.9, beta2: float = 0.98, eps: float = 1e-9) -> "AdamState":
        return cls(
            beta1=beta1,
            beta2=beta2,
            eps=eps,
            first_moment={name: np.zeros_like(t.data) for name, t in params},
            second_moment={name: np.zeros_like(t.data) for name, t in params},
        )


def gradient_norm(params: ModelParams) -> float:
    total = 0.0
    for _, t in params:
        if t.grad is not None:
            total += float(np.sum(t.grad * t.grad))
    return math.sqrt(total)


def clip_gradients(params: ModelParams, max_norm: float) -> tuple[float, bool]:
    """Rescale gradients so their global L2 norm is at most `max_norm`.

    Returns the norm before clipping and whether clipping happened.
    """
    norm = gradient_norm(params)
    if max_norm <= 0 or norm <= max_norm:
        return norm, False
    factor = max_norm / norm
    for _, t in params:
        if t.grad is not None:
            t.grad = t.grad * factor
    return norm, True


def check_gradients_finite(params: ModelParams) -> None:
    for name, t in params:
        if t.grad is not None and not np.isfinite(t.grad).all():
            raise NumericError(f"non-finite gradient in {name}")


def adam_step(params: ModelParams, state: AdamState, lr: float) -> None:
    """One bias-corrected Adam update; gradients are consumed and cleared."""
    check_gradients_finite(params)
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    correction1 = 1.0 - b1 ** state.step
    correction2 = 1.0 - b2 ** state.step
    for name, t in params:
        g = t.grad if t.grad is not None else np.zeros_like(t.data)
        m = state.first_moment.setdefault(name, np.zeros_like(t.data))
        v = state.second_moment.setdefault(name, np.zeros_like(t.data))
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        state.first_moment[name] = m
        state.second_moment[name] = v
        t.data = t.data - lr * (m / correction1) / (np.sqrt(v / correction2) + state.eps)
        t.zero_grad()
