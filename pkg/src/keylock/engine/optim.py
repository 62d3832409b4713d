"""SGD with classic momentum and the one-cycle triangular learning rate."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

WARMUP_FRACTION = 0.3  # share of total steps spent ramping up to max_lr


@dataclass
class SgdHyper:
    """Optimizer settings; defaults follow the reference recipe, desk runs may override."""

    momentum: float = 0.9
    weight_decay: float = 5e-4
    max_lr: float = 0.2
    epochs: int = 30
    batch_size: int = 128


class SgdState:
    """Per-parameter velocity buffers, created lazily on first update."""

    def __init__(self):
        self.velocity: dict[str, np.ndarray] = {}


def sgd_update(params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
               state: SgdState, hyper: SgdHyper, lr: float) -> None:
    """In-place step: v <- momentum*v + (grad + wd*param); param <- param - lr*v."""
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} != param shape {p.shape} for {name!r}")
        v = state.velocity.get(name)
        if v is None:
            v = state.velocity.setdefault(name, np.zeros_like(p))
        v *= hyper.momentum
        v += g
        if hyper.weight_decay:
            v += hyper.weight_decay * p
        p -= lr * v


def cyclic_lr(step: int, total_steps: int, max_lr: float) -> float:
    """One-cycle triangle: linear 0 -> max_lr over the first 30% of steps, then linear decay to 0."""
    if not 0 <= step < total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps})")
    peak = WARMUP_FRACTION * total_steps
    if step <= peak:
        return max_lr * step / peak
    return max_lr * (total_steps - step) / (total_steps - peak)
