"""Adam and the warmup + cosine learning-rate schedule."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .diffcore import ParamStore


@dataclass
class Schedule:
    base_lr: float = 5e-5
    warmup_epochs: float = 10
    total_epochs: float = 200

    def __post_init__(self):
        if not 0 <= self.warmup_epochs < self.total_epochs:
            raise ValueError("need 0 <= warmup_epochs < total_epochs")

    def to_dict(self):
        return asdict(self)


def lr_at(epoch: float, sched: Schedule) -> float:
    """Linear warmup from 0, then half-cosine decay to 0 at ``total_epochs``."""
    w, T = sched.warmup_epochs, sched.total_epochs
    if epoch < w:
        return sched.base_lr * epoch / w
    t = min(max((epoch - w) / (T - w), 0.0), 1.0)
    return sched.base_lr * 0.5 * (1.0 + math.cos(math.pi * t))


@dataclass
class OptimState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_init(store: ParamStore, names=None) -> OptimState:
    names = list(store.params) if names is None else list(names)
    return OptimState({k: np.zeros_like(store.params[k]) for k in names},
                      {k: np.zeros_like(store.params[k]) for k in names})


def adam_step(params: dict, grads: dict, state: OptimState, lr: float) -> OptimState:
    """In-place Adam update of ``params`` over the names tracked in ``state``."""
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for k in state.m:
        g = grads[k]
        m, v = state.m[k], state.v[k]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        mhat = m / c1
        vhat = v / c2
        params[k] -= (lr * mhat / (np.sqrt(vhat) + state.eps)).astype(params[k].dtype)
    return state
