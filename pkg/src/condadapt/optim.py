"""Adam optimizer with bias correction."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeError
from .params import ParamSet


@dataclass
class AdamState:
    """Per-parameter moment estimates plus the shared step counter."""

    lr: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    t: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


class Adam:
    """Standard Adam update: p -= lr * mhat / (sqrt(vhat) + eps)."""

    def __init__(self, params: ParamSet, lr: float = 5e-4, beta1: float = 0.9,
                 beta2: float = 0.999, epsilon: float = 1e-8):
        self.params = params
        self.state = AdamState(lr=lr, beta1=beta1, beta2=beta2, epsilon=epsilon)
        self.state.m = [np.zeros_like(t.data) for t in params.tensors()]
        self.state.v = [np.zeros_like(t.data) for t in params.tensors()]

    def step(self, grads: list) -> None:
        s = self.state
        tensors = self.params.tensors()
        if len(grads) != len(tensors):
            raise ShapeError("gradient list does not match parameter list")
        s.t += 1
        bc1 = 1.0 - s.beta1 ** s.t
        bc2 = 1.0 - s.beta2 ** s.t
        for p, g, m, v in zip(tensors, grads, s.m, s.v):
            if g.shape != p.data.shape:
                raise ShapeError("gradient shape does not match parameter shape")
            m *= s.beta1
            m += (1.0 - s.beta1) * g
            v *= s.beta2
            v += (1.0 - s.beta2) * (g * g)
            p.data -= (s.lr * (m / bc1) / (np.sqrt(v / bc2) + s.epsilon)).astype(p.data.dtype)
