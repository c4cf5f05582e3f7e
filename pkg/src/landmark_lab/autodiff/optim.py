"""Adam optimizer."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor


@dataclass
class AdamState:
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)

    @classmethod
    def zeros_like(cls, params: list[np.ndarray]) -> "AdamState":
        return cls(0, [np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params])


def adam_step(params, grads, state: AdamState, lr: float = 1e-4, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8):
    """One bias-corrected Adam update.

    ``params`` and ``grads`` are lists of arrays; params and the moment buffers
    in ``state`` are updated in place. Returns ``(params, state)``.
    """
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ValueError("adam_step: params, grads and state disagree in length")
    state.step += 1
    t = state.step
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.shape != g.shape:
            raise ValueError(f"adam_step: grad shape {g.shape} != param shape {p.shape}")
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        p -= (lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(p.dtype, copy=False)
    return params, state


class Adam:
    """Adam over a fixed list of parameter tensors.

    ``updates`` counts :meth:`step` calls; ``last_update`` holds the ids of the
    tensors touched by the most recent call.
    """

    def __init__(self, params: list[Tensor], lr: float = 1e-4, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.state = AdamState.zeros_like([p.data for p in self.params])
        self.updates = 0
        self.last_update: frozenset[int] = frozenset()

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in self.params]
        adam_step([p.data for p in self.params], grads, self.state, self.lr, self.beta1, self.beta2, self.eps)
        self.updates += 1
        self.last_update = frozenset(id(p) for p in self.params)

    def state_dict(self) -> dict[str, np.ndarray]:
        out = {"step": np.array([self.state.step], dtype=np.float64)}
        for i, (m, v) in enumerate(zip(self.state.m, self.state.v)):
            out[f"m.{i}"] = m
            out[f"v.{i}"] = v
        return out

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        self.state.step = int(state["step"][0])
        for i in range(len(self.params)):
            self.state.m[i][...] = state[f"m.{i}"]
            self.state.v[i][...] = state[f"v.{i}"]
