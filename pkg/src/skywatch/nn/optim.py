"""Adam with bias correction."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..exceptions import DimensionError


@dataclass
class AdamState:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)
    step: int = 0


def adam_step(state: AdamState, params: list[np.ndarray], grads: list[np.ndarray]) -> list[np.ndarray]:
    """Apply one Adam update to ``params`` in place and return them."""
    if len(params) != len(grads):
        raise DimensionError(f"{len(params)} parameters but {len(grads)} gradients")
    for p, g in zip(params, grads):
        if p.shape != np.shape(g):
            raise DimensionError(f"parameter {p.shape} vs gradient {np.shape(g)}")
    if not state.m:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    elif len(state.m) != len(params) or any(m.shape != p.shape for m, p in zip(state.m, params)):
        raise DimensionError("Adam moments do not match the parameter list")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    lr_t = state.learning_rate
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * np.square(g)
        p -= lr_t * (m / c1) / (np.sqrt(v / c2) + state.epsilon)
    return params


class Adam:
    """Adam bound to a ``Sequential``-style model exposing ``parameters()``."""

    def __init__(self, model, learning_rate: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, epsilon: float = 1e-8):
        self.model = model
        self.state = AdamState(learning_rate, beta1, beta2, epsilon)

    def step(self, max_grad_norm: float | None = None) -> float:
        pairs = list(self.model.parameters())
        params = [layer.params[name] for layer, name in pairs]
        grads = [layer.grads[name] for layer, name in pairs]
        norm = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads)))
        if max_grad_norm is not None and norm > max_grad_norm:
            grads = [g * (max_grad_norm / (norm + 1e-6)) for g in grads]
        adam_step(self.state, params, grads)
        return norm
