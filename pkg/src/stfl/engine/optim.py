"""SGD and Adam updates over :class:`ParamVector` blocks."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from stfl.engine.params import ParamVector
from stfl.errors import ConfigError, NumericFault, ShapeError


@dataclass
class OptimizerState:
    kind: str = "adam"
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step_count: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in ("sgd", "adam"):
            raise ConfigError(f"optimizer kind must be 'sgd' or 'adam', got {self.kind!r}")
        if self.learning_rate < 0:
            raise ConfigError(f"learning_rate must be >= 0, got {self.learning_rate}")


def optimizer_step(state: OptimizerState, params: ParamVector,
                   grads: Mapping[str, np.ndarray]) -> ParamVector:
    """Return updated parameters; ``state`` moments and step count advance in place."""
    for name in params:
        g = grads[name]
        if g.shape != params[name].shape:
            raise ShapeError(f"gradient for {name!r} has shape {g.shape}, parameter {params[name].shape}")
        if not np.isfinite(g).all():
            raise NumericFault(f"non-finite gradient in parameter block {name!r}")
    state.step_count += 1
    lr = state.learning_rate
    if state.kind == "sgd":
        return params.map(lambda k, p: (p - lr * grads[k]).astype(p.dtype))

    b1, b2, eps, t = state.beta1, state.beta2, state.epsilon, state.step_count
    c1 = 1 - b1 ** t
    c2 = 1 - b2 ** t

    def upd(k, p):
        g = grads[k]
        m = state.m.get(k)
        v = state.v.get(k)
        m = (1 - b1) * g if m is None else b1 * m + (1 - b1) * g
        v = (1 - b2) * g * g if v is None else b2 * v + (1 - b2) * g * g
        state.m[k], state.v[k] = m, v
        return (p - lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(p.dtype)

    return params.map(upd)
