"""Adam, as a pure function and as a small stateful wrapper."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import TrainingError, UsageError


@dataclass
class AdamState:
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)
    step: int = 0


def adam_step(params, grads, state=None, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8,
              names=None):
    """One bias-corrected Adam update; returns ``(new_params, new_state)``."""
    if len(params) != len(grads):
        raise UsageError("params and grads differ in length")
    if state is None or not state.m:
        state = AdamState([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params], 0)
    for i, (p, g) in enumerate(zip(params, grads)):
        if np.shape(p) != np.shape(g):
            raise UsageError(f"shape mismatch for parameter {i}")
        if not np.all(np.isfinite(g)):
            name = names[i] if names else f"param[{i}]"
            raise TrainingError(f"non-finite gradient for {name}")
    t = state.step + 1
    m = [beta1 * mi + (1 - beta1) * g for mi, g in zip(state.m, grads)]
    v = [beta2 * vi + (1 - beta2) * g * g for vi, g in zip(state.v, grads)]
    c1 = 1 - beta1 ** t
    c2 = 1 - beta2 ** t
    new = [p - lr * (mi / c1) / (np.sqrt(vi / c2) + eps) for p, mi, vi in zip(params, m, v)]
    return new, AdamState(m, v, t)


class Adam:
    """Applies ``adam_step`` to autodiff tensors using their ``.grad`` slots."""

    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.state = None

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        grads = [np.zeros_like(p.value) if p.grad is None else p.grad for p in self.params]
        new, self.state = adam_step([p.value for p in self.params], grads, self.state, self.lr,
                                    self.beta1, self.beta2, self.eps,
                                    names=[p.name or f"param[{i}]" for i, p in enumerate(self.params)])
        for p, v in zip(self.params, new):
            p.value = v
