"""Inverse-square-root warmup schedule and Adam with bias correction."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


def lr_schedule(step: int, d_model: int, warmup: int) -> float:
    if step < 1:
        raise ValueError("step must be >= 1")
    return d_model ** -0.5 * min(step ** -0.5, step * warmup ** -1.5)


@dataclass
class AdamConfig:
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-9


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def adam_step(tensors: dict[str, np.ndarray], grads: dict[str, np.ndarray], lr: float,
              config: AdamConfig, state: AdamState) -> None:
    """Update ``tensors`` in place."""
    state.t += 1
    b1, b2 = config.beta1, config.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for name, g in grads.items():
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(g)
            state.v[name] = np.zeros_like(g)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        tensors[name] -= lr * (m / c1) / (np.sqrt(v / c2) + config.eps)
