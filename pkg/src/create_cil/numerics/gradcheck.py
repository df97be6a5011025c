"""Central finite-difference gradient checking."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .autodiff import Tensor, backward, no_grad

# Central differences at step h carry roundoff near u*|L|/h (about 1e-11 for
# O(1) losses); entries far below that can only be compared with a larger floor.
ABS_FLOOR = 1e-12


class GradientCheckError(RuntimeError):
    pass


@dataclass
class GradCheckResult:
    max_rel_error: float
    worst_param: int
    worst_index: tuple[int, ...]
    analytic: float
    numeric: float

    def describe(self, names: Sequence[str] | None = None) -> str:
        pname = names[self.worst_param] if names else f"param[{self.worst_param}]"
        return (
            f"{pname}{list(self.worst_index)}: analytic={self.analytic:.6e} "
            f"numeric={self.numeric:.6e} rel_err={self.max_rel_error:.3e}"
        )


def check_gradients(
    loss_fn: Callable[[], Tensor], params: Sequence[Tensor], step: float = 1e-5, floor: float = ABS_FLOOR
) -> GradCheckResult:
    """Worst entry of |analytic - numeric| / max(|analytic|, |numeric|, floor)."""
    if not step > 0:
        raise ValueError(f"step must be positive, got {step}")
    loss = loss_fn()
    analytic = [g.copy() for g in backward(loss, params)]

    worst = GradCheckResult(0.0, 0, (), 0.0, 0.0)
    for k, p in enumerate(params):
        base = p.data
        for idx in np.ndindex(*base.shape):
            values = []
            for sign in (1.0, -1.0):
                probe = base.copy()
                probe[idx] += sign * step
                p.data = probe
                try:
                    with no_grad():
                        val = loss_fn().item()
                except FloatingPointError as exc:
                    p.data = base
                    raise GradientCheckError(f"non-finite loss probing param[{k}]{list(idx)}: {exc}") from exc
                if not math.isfinite(val):
                    p.data = base
                    raise GradientCheckError(f"non-finite loss probing param[{k}]{list(idx)}")
                values.append(val)
            p.data = base
            numeric = (values[0] - values[1]) / (2.0 * step)
            a = float(analytic[k][idx])
            rel = abs(a - numeric) / max(abs(a), abs(numeric), floor)
            if rel > worst.max_rel_error:
                worst = GradCheckResult(rel, k, tuple(int(i) for i in idx), a, numeric)
    return worst


def gradient_check(
    loss_fn: Callable[[], Tensor], params: Sequence[Tensor], step: float = 1e-5, floor: float = ABS_FLOOR
) -> float:
    return check_gradients(loss_fn, params, step, floor).max_rel_error
