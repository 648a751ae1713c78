"""Adam with bias correction over named parameter collections."""

from __future__ import annotations

import numpy as np

from ..errors import ConfigError, ShapeError


class AdamState:
    """First/second moment buffers for a fixed parameter list; step starts at 0."""

    def __init__(self, params):
        self.m = {p.name: np.zeros_like(p.data) for p in params}
        self.v = {p.name: np.zeros_like(p.data) for p in params}
        self.step = 0


def adam_step(params, state: AdamState, lr: float = 0.001, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8):
    """One in-place Adam update from each parameter's .grad.

    Pure function of (params, grads, moments, step): identical inputs produce
    bit-identical outputs.
    """
    if lr <= 0:
        raise ConfigError(f"learning rate must be positive, got {lr}")
    state.step += 1
    t = state.step
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for p in params:
        g = p.grad
        if g.shape != p.data.shape:
            raise ShapeError(f"grad shape {g.shape} mismatches param {p.name} {p.data.shape}")
        m = state.m[p.name]
        v = state.v[p.name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
