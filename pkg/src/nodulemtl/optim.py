"""Adam with bias correction."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray | None], state: AdamState) -> None:
    """One bias-corrected Adam update, in place on ``params`` and ``state``.

    A missing gradient counts as zero. Non-finite gradients abort the step
    before anything is modified.
    """
    for name in params:
        g = grads.get(name)
        if g is not None and not np.all(np.isfinite(g)):
            bad = int(np.size(g) - np.isfinite(g).sum())
            raise FloatingPointError(f"adam: {bad} non-finite gradient value(s) in {name!r}; step aborted")
    state.t += 1
    t = state.t
    c1 = 1 - state.beta1 ** t
    c2 = 1 - state.beta2 ** t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p)
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        m *= state.beta1
        m += (1 - state.beta1) * g
        v *= state.beta2
        v += (1 - state.beta2) * (g * g)
        p -= (state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.dtype)


class Adam:
    """Adam over named tensors, reading gradients from ``Tensor.grad``."""

    def __init__(self, params: dict[str, Tensor], lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.state = AdamState(lr, beta1, beta2, eps)

    @property
    def t(self) -> int:
        return self.state.t

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def step(self) -> None:
        adam_step({k: p.data for k, p in self.params.items()},
                  {k: p.grad for k, p in self.params.items()}, self.state)

    def state_tensors(self) -> dict[str, np.ndarray]:
        out = {}
        for name in self.params:
            if name in self.state.m:
                out[f"m/{name}"] = self.state.m[name]
                out[f"v/{name}"] = self.state.v[name]
        return out

    def load_state_tensors(self, tensors: dict[str, np.ndarray], step: int) -> None:
        self.state.t = int(step)
        self.state.m = {k[2:]: v.copy() for k, v in tensors.items() if k.startswith("m/")}
        self.state.v = {k[2:]: v.copy() for k, v in tensors.items() if k.startswith("v/")}
