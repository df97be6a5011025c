"""SGD with momentum and coupled weight decay."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .autodiff import ShapeError, Tensor


@dataclass
class SgdState:
    learning_rate: float
    momentum: float = 0.9
    weight_decay: float = 2e-4
    velocity: list[np.ndarray] = field(default_factory=list)

    def __post_init__(self):
        if not self.learning_rate >= 0:
            raise ValueError(f"learning_rate must be >= 0, got {self.learning_rate}")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.weight_decay < 0:
            raise ValueError(f"weight_decay must be >= 0, got {self.weight_decay}")


def sgd_step(state: SgdState, params: Sequence[Tensor], grads: Sequence[np.ndarray]) -> None:
    """One momentum step, in place on ``params``.

    v <- momentum * v + grad + weight_decay * param
    param <- param - lr * v
    """
    if len(params) != len(grads):
        raise ValueError(f"sgd_step: {len(params)} params but {len(grads)} grads")
    if not state.velocity:
        state.velocity = [np.zeros(p.shape) for p in params]
    elif len(state.velocity) != len(params):
        raise ValueError("sgd_step: parameter list changed size since the first step")
    for i, (p, g) in enumerate(zip(params, grads)):
        g = np.asarray(g, dtype=np.float64)
        if g.shape != p.shape:
            raise ShapeError("sgd_step", p.shape, g.shape)
        v = state.velocity[i]
        if v.shape != p.shape:
            raise ShapeError("sgd_step", p.shape, v.shape)
        v = state.momentum * v + g
        if state.weight_decay:
            v = v + state.weight_decay * p.data
        state.velocity[i] = v
        # rebind rather than write in place: snapshots may share the old array
        p.data = p.data - state.learning_rate * v
