"""Adam optimizer and hard weight clamping."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .tensor import Tensor


@dataclass
class AdamState:
    """Adam moments and hyperparameters for one parameter group."""

    lr: float = 1e-4
    beta1: float = 0.5
    beta2: float = 0.999
    epsilon: float = 1e-8
    decay: float = 0.0  # decoupled per-step multiplicative weight shrink
    step_count: int = 0
    first_moment: list = field(default_factory=list)
    second_moment: list = field(default_factory=list)


def adam_step(params: list[Tensor], state: AdamState) -> None:
    """One bias-corrected Adam update on every param; grads are then cleared."""
    if not state.first_moment:
        state.first_moment = [np.zeros_like(p.data) for p in params]
        state.second_moment = [np.zeros_like(p.data) for p in params]
    if len(state.first_moment) != len(params):
        raise ValueError("AdamState bound to a different parameter group")
    for i, p in enumerate(params):
        if p.grad is None:
            raise ValueError(f"param {i} has no gradient; run backward() first")
        if state.first_moment[i].shape != p.data.shape:
            raise ValueError(f"moment buffer shape {state.first_moment[i].shape} "
                             f"does not match param shape {p.data.shape}")
    state.step_count += 1
    bc1 = 1.0 - state.beta1 ** state.step_count
    bc2 = 1.0 - state.beta2 ** state.step_count
    for p, m, v in zip(params, state.first_moment, state.second_moment):
        kernels.adam_update(p.data, p.grad, m, v,
                            state.lr, state.beta1, state.beta2, state.epsilon,
                            bc1, bc2)
        if state.decay:
            p.data *= 1.0 - state.decay
        p.grad = None


def clamp_weights(params: list[Tensor], limit: float) -> None:
    """Clamp every parameter value to [-limit, limit], in place."""
    if limit <= 0:
        raise ValueError(f"clamp limit must be positive, got {limit}")
    for p in params:
        kernels.clip_inplace(p.data, limit)
