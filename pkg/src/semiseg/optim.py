"""AdamW with decoupled weight decay."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionError


@dataclass
class AdamWState:
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    weight_decay: float = 0.05
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def total_size(self) -> int:
        return sum(a.size for a in self.m.values())


def adamw_step(params: dict, grads: dict, state: AdamWState) -> None:
    """Apply one AdamW update in place to ``params`` (name -> ndarray).

    Parameters whose gradient is missing are treated as having zero
    gradient, so their moments still decay and weight decay still applies.
    """
    for name, p in params.items():
        g = grads.get(name)
        if g is not None and g.shape != p.shape:
            raise DimensionError(f"gradient for {name!r} has shape {g.shape}, parameter has {p.shape}")
        if name in state.m and state.m[name].shape != p.shape:
            raise DimensionError(f"optimizer state for {name!r} has shape {state.m[name].shape}, parameter has {p.shape}")
    state.step += 1
    t = state.step
    lr = state.learning_rate
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1 ** t
    bc2 = 1.0 - b2 ** t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p)
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        if state.weight_decay:
            p *= 1.0 - lr * state.weight_decay
        update = (m / bc1) / (np.sqrt(v / bc2) + state.epsilon)
        p -= (lr * update).astype(p.dtype)
