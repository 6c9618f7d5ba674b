from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .params import ParamSet, owner_of


@dataclass
class OptimState:
    """Momentum SGD state.

    The learning rate is ``lr`` until ``epoch`` reaches ``decay_epoch``,
    then ``lr * decay_factor``. ``decay_epoch=None`` disables the drop.
    """

    lr: float = 0.001
    momentum: float = 0.9
    weight_decay: float = 1e-4
    decay_epoch: int | None = None
    decay_factor: float = 0.1
    epoch: int = 0
    velocity: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError(f"learning rate must be positive, got {self.lr}")

    @property
    def current_lr(self) -> float:
        if self.decay_epoch is not None and self.epoch >= self.decay_epoch:
            return self.lr * self.decay_factor
        return self.lr


def sgd_momentum_step(params: ParamSet, state: OptimState, frozen: tuple[str, ...] = ()) -> ParamSet:
    """One in-place update: v <- m*v + g + wd*p ; p <- p - lr*v.

    Parameters whose owner is in ``frozen`` are left untouched.
    """
    lr = state.current_lr
    for name, p in params.items():
        if owner_of(name) in frozen:
            continue
        if p.grad is None:
            raise ValueError(f"parameter {name!r} has no gradient; run backward first")
        v = state.velocity.get(name)
        if v is None:
            v = np.zeros_like(p.data)
        elif v.shape != p.shape:
            raise ValueError(f"velocity for {name!r} has shape {v.shape}, parameter {p.shape}")
        v = state.momentum * v + p.grad + state.weight_decay * p.data
        state.velocity[name] = v.astype(p.dtype, copy=False)
        p.data = (p.data - lr * state.velocity[name]).astype(p.dtype, copy=False)
    return params
