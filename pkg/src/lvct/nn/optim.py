from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .layers import Param

__all__ = ["AdamState", "adam_step", "Adam"]


@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: np.ndarray | None = field(default=None, repr=False)
    v: np.ndarray | None = field(default=None, repr=False)


def adam_step(p: Param, s: AdamState) -> None:
    """Bias-corrected Adam update of ``p`` in place, then zero its gradient."""
    g = p.grad
    if not np.all(np.isfinite(g)):
        bad = int(np.size(g) - np.count_nonzero(np.isfinite(g)))
        raise FloatingPointError(f"non-finite gradient in {p.name or 'param'}: {bad} bad entries")
    if s.m is None:
        s.m = np.zeros_like(p.value)
        s.v = np.zeros_like(p.value)
    s.t += 1
    s.m *= s.beta1
    s.m += (1 - s.beta1) * g
    s.v *= s.beta2
    s.v += (1 - s.beta2) * g * g
    m_hat = s.m / (1 - s.beta1 ** s.t)
    v_hat = s.v / (1 - s.beta2 ** s.t)
    p.value -= (s.lr * m_hat / (np.sqrt(v_hat) + s.eps)).astype(p.value.dtype, copy=False)
    p.zero_grad()


class Adam:
    def __init__(self, params, lr=1e-4, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.states = [AdamState(lr, beta1, beta2, eps) for _ in self.params]

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()

    def step(self):
        for p, s in zip(self.params, self.states):
            adam_step(p, s)
