"""AdamW with decoupled weight decay and the cyclic cosine learning-rate schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .tensor import ShapeError


@dataclass
class OptimizerState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adamw_step(params: dict, grads: dict, state: OptimizerState, lr: float,
               no_decay=frozenset()) -> dict:
    """One AdamW update; returns a new ``{name: array}`` dict and advances ``state``.

    ``no_decay`` names the parameters excluded from weight decay.
    """
    if lr <= 0:
        raise ValueError(f"learning rate must be positive, got {lr}")
    for name, p in params.items():
        g = grads[name]
        if np.shape(g) != np.shape(p):
            raise ShapeError(f"adamw: grad for {name!r} has shape {np.shape(g)}, param {np.shape(p)}")

    state.step += 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1 ** state.step
    bc2 = 1.0 - b2 ** state.step
    out = {}
    for name in params:
        p = np.asarray(params[name], dtype=np.float64)
        g = np.asarray(grads[name], dtype=np.float64)
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(p)
            v = np.zeros_like(p)
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * (g * g)
        state.m[name] = m
        state.v[name] = v
        if state.weight_decay and name not in no_decay:
            p = p * (1.0 - lr * state.weight_decay)
        out[name] = p - lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
    return out


@dataclass(frozen=True)
class LrSchedule:
    lr_max: float = 1e-4
    lr_min: float = 5e-7
    period: int = 7200
    cycle_decay: float = 0.5

    def __post_init__(self):
        if self.period < 1:
            raise ValueError("period must be >= 1")
        if not 0.0 < self.cycle_decay <= 1.0:
            raise ValueError("cycle_decay must lie in (0, 1]")
        if not 0.0 <= self.lr_min <= self.lr_max:
            raise ValueError("need 0 <= lr_min <= lr_max")


def lr_at(step: int, sched: LrSchedule) -> float:
    """Cosine decay from a per-cycle peak to ``lr_min``, peak halving (by default) each cycle.

    The peak is floored at ``lr_min`` so late cycles stay flat rather than
    dipping below the floor.
    """
    if step < 0:
        raise ValueError("step must be >= 0")
    cycle, pos = divmod(step, sched.period)
    peak = max(sched.lr_max * sched.cycle_decay ** cycle, sched.lr_min)
    phase = pos / sched.period
    return sched.lr_min + (peak - sched.lr_min) * (1.0 + math.cos(math.pi * phase)) / 2.0
