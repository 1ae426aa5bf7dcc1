from __future__ import annotations

import numpy as np

from .model import ModelParams


def sgd_step(params: ModelParams, gradients: dict[str, np.ndarray], lr: float,
             frozen: set[str] | frozenset = frozenset(), momentum: float = 0.0,
             velocity: dict[str, np.ndarray] | None = None) -> ModelParams:
    """Update ``params`` in place by -lr * grad (heavy-ball if momentum > 0).

    Tensors named in ``frozen`` are never touched. ``velocity`` is the
    caller-owned momentum buffer.
    """
    if lr <= 0:
        raise ValueError("lr must be positive")
    arrays = params.named_arrays()
    for name, grad in gradients.items():
        if name in frozen:
            continue
        if name not in arrays:
            raise KeyError(f"no parameter named {name}")
        p = arrays[name]
        if p.shape != grad.shape:
            raise ValueError(f"gradient shape {grad.shape} != parameter shape {p.shape} for {name}")
        step = grad
        if momentum:
            if velocity is None:
                raise ValueError("momentum requires a velocity buffer")
            v = velocity.get(name)
            v = grad.copy() if v is None else momentum * v + grad
            velocity[name] = v
            step = v
        p -= lr * step
    return params


class SGD:
    """Minimal SGD+momentum optimiser over arbitrary named arrays."""

    def __init__(self, lr: float, momentum: float = 0.9):
        if lr <= 0:
            raise ValueError("lr must be positive")
        self.lr = lr
        self.momentum = momentum
        self.velocity: dict[str, np.ndarray] = {}

    def step(self, arrays: dict[str, np.ndarray], grads: dict[str, np.ndarray], lr: float | None = None):
        lr = self.lr if lr is None else lr
        for name, g in grads.items():
            v = self.velocity.get(name)
            v = g.copy() if v is None else self.momentum * v + g
            self.velocity[name] = v
            arrays[name] -= lr * v
