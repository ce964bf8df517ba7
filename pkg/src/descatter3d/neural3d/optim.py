"""Bias-corrected Adam."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import NonFiniteGradient, ShapeError


@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState) -> None:
    """Update ``params`` in place. The whole step is skipped if any gradient is non-finite."""
    for name, g in grads.items():
        if name not in params or params[name].shape != g.shape:
            raise ShapeError(f"gradient {name} does not match a parameter")
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradient(name)
    state.t += 1
    bc1 = 1.0 - state.beta1 ** state.t
    bc2 = 1.0 - state.beta2 ** state.t
    for name, p in params.items():
        g = grads[name]
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        m, v = state.m[name], state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p -= state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
