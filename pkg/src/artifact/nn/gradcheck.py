from __future__ import annotations

from typing import Callable

import numpy as np

from .model import ModelParams, taped_extract, taped_head, watch_params
from .tensor import GradientTape, Tensor, cross_entropy

LossFn = Callable[[ModelParams, dict, np.ndarray], Tensor]


def default_loss(params: ModelParams, leaves: dict, batch: np.ndarray, targets: np.ndarray) -> Tensor:
    feats = taped_extract(params, Tensor(batch), leaves)
    return cross_entropy(taped_head(params.head, feats, leaves), targets)


def extended_ce(params: ModelParams, batch: np.ndarray, targets: np.ndarray):
    """Cross-entropy evaluated in extended precision, independent of the tape."""
    h = batch.astype(np.longdouble)
    layers = params.extractor + params.head
    for i, layer in enumerate(layers):
        h = h @ layer.weight.astype(np.longdouble).T + layer.bias.astype(np.longdouble)
        if i < len(layers) - 1:
            h = np.maximum(h, 0)
    h = h - h.max(axis=1, keepdims=True)
    lse = np.log(np.exp(h).sum(axis=1))
    return (lse - h[np.arange(len(targets)), targets]).mean()


def grad_check(params: ModelParams, batch, step: float = 1e-5, targets=None, loss_fn=None,
               oracle_fn=None, max_per_tensor: int = 256, rng: np.random.Generator | None = None,
               gradients: dict[str, np.ndarray] | None = None) -> float:
    """Max relative error between autodiff and central finite differences.

    Relative error is |ad - fd| / max(|fd|, 1e-8), maximised over at most
    ``max_per_tensor`` sampled entries of every parameter tensor.
    ``gradients`` overrides the autodiff side (used for fault injection).
    The finite differences use the 4-point central stencil on ``oracle_fn``
    (extended-precision cross-entropy by default) so that rounding noise stays
    far below the 1e-8 denominator floor.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    if loss_fn is None:
        loss_fn, oracle_fn = default_loss, oracle_fn or extended_ce
    if oracle_fn is None:
        def oracle_fn(p, b, t):
            return float(loss_fn(p, {}, b, t).data)
    batch = np.asarray(batch, dtype=np.float64)
    if targets is None:
        targets = np.zeros(batch.shape[0], dtype=np.int64)
    rng = rng or np.random.default_rng(0)
    if gradients is None:
        with GradientTape() as tape:
            leaves = watch_params(tape, params)
            loss = loss_fn(params, leaves, batch, targets)
        gradients = dict(zip(leaves, tape.gradient(loss, list(leaves.values()))))

    arrays = params.named_arrays()
    worst = 0.0
    for name, arr in arrays.items():
        flat = arr.reshape(-1)
        idx = np.arange(flat.size)
        if flat.size > max_per_tensor:
            idx = rng.choice(flat.size, size=max_per_tensor, replace=False)
        g = gradients[name].reshape(-1)
        for i in idx:
            orig = flat[i]
            vals = []
            for k in (2, 1, -1, -2):
                flat[i] = orig + k * step
                vals.append(oracle_fn(params, batch, targets))
            flat[i] = orig
            # pairwise differences first, so a loss that ignores this entry gives exactly 0
            fd = float((8 * (vals[1] - vals[2]) - (vals[0] - vals[3])) / (12.0 * step))
            err = abs(g[i] - fd) / max(abs(fd), 1e-8)
            worst = max(worst, err)
    return worst
