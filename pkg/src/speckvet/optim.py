"""Adam optimizer over named parameter dictionaries."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Mapping

import numpy as np

from .tensor import Tensor


@dataclass
class AdamState:
    """Moment buffers and hyperparameters for one optimization run."""

    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step_count: int = 0
    first_moment: Dict[str, np.ndarray] = field(default_factory=dict)
    second_moment: Dict[str, np.ndarray] = field(default_factory=dict)


def init_adam(params: Mapping[str, Tensor], learning_rate: float = 1e-3,
              beta1: float = 0.9, beta2: float = 0.999, epsilon: float = 1e-8) -> AdamState:
    state = AdamState(learning_rate=learning_rate, beta1=beta1, beta2=beta2, epsilon=epsilon)
    for name, p in params.items():
        state.first_moment[name] = np.zeros_like(p.data)
        state.second_moment[name] = np.zeros_like(p.data)
    return state


def adam_step(params: Mapping[str, Tensor], grads: Mapping[str, np.ndarray], state: AdamState) -> AdamState:
    """One bias-corrected Adam update, in place on ``params``. Increments step_count by 1."""
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    lr = state.learning_rate
    corr1 = 1.0 - b1 ** t
    corr2 = 1.0 - b2 ** t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != p.data.shape:
            raise ValueError(f"adam_step: gradient shape {g.shape} does not match parameter '{name}' shape {p.data.shape}")
        m = state.first_moment[name]
        v = state.second_moment[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * np.square(g)
        m_hat = m / corr1
        v_hat = v / corr2
        p.data -= (lr * m_hat / (np.sqrt(v_hat) + state.epsilon)).astype(p.data.dtype)
    return state
