"""Adam with bias correction over a ParamStore."""
from __future__ import annotations

from dataclasses import dataclass, field
from collections.abc import Iterable

import numpy as np

from .nn import ParamStore


class DivergenceError(FloatingPointError):
    """Non-finite gradient or loss during training."""


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: AdamState,
    lr: float,
) -> tuple[dict[str, np.ndarray], AdamState]:
    """One functional Adam update; returns new parameter arrays and the (mutated) state."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise DivergenceError(f"non-finite gradient for parameter {name!r}")
        if g.shape != params[name].shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {name!r} {params[name].shape}")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1**state.step
    bc2 = 1.0 - b2**state.step
    out = dict(params)
    for name, g in grads.items():
        g = g.astype(np.float64)
        m = state.m.get(name, np.zeros_like(g))
        v = state.v.get(name, np.zeros_like(g))
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        state.m[name], state.v[name] = m, v
        upd = lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
        p = params[name]
        out[name] = (p.astype(np.float64) - upd).astype(p.dtype)
    return out, state


class Adam:
    """Stateful wrapper: reads ``.grad`` off the store's tensors and updates in place."""

    def __init__(self, params: ParamStore, lr: float = 1e-3, names: Iterable[str] | None = None):
        self.params = params
        self.lr = lr
        self.names = list(names) if names is not None else list(params)
        self.state = AdamState()

    def step(self) -> None:
        cur = {n: self.params[n].data for n in self.names}
        grads = {}
        for n in self.names:
            g = self.params[n].grad
            grads[n] = g if g is not None else np.zeros_like(cur[n])
        new, self.state = adam_step(cur, grads, self.state, self.lr)
        if self.lr == 0:
            return
        for n in self.names:
            self.params[n].data = new[n]
