"""Adam with bias correction and an exponential learning-rate decay."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import ShapeError, Tensor


@dataclass
class ExponentialDecay:
    initial: float = 0.01
    decay_rate: float = 0.96
    decay_steps: int = 1000

    def __call__(self, step: int) -> float:
        if step < 0:
            raise ValueError(f"step must be >= 0, got {step}")
        return self.initial * self.decay_rate ** (step / self.decay_steps)


def lr_schedule(step: int, initial: float = 0.01, decay_rate: float = 0.96,
                decay_steps: int = 1000) -> float:
    return ExponentialDecay(initial, decay_rate, decay_steps)(step)


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray], state: AdamState,
              lr: float) -> AdamState:
    """One in-place Adam update of every tensor in ``params``.

    Moments are created lazily (zeros) the first time a path is seen. The
    step counter advances once per call.
    """
    if not lr > 0:
        raise ValueError(f"learning rate must be positive, got {lr}")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for path, p in params.items():
        g = grads[path]
        if g.shape != p.data.shape:
            raise ShapeError(f"gradient for {path} has shape {g.shape}, parameter {p.data.shape}")
        m = state.m.get(path)
        if m is None:
            m = state.m[path] = np.zeros_like(p.data)
            state.v[path] = np.zeros_like(p.data)
        v = state.v[path]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return state
