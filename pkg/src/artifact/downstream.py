"""Victim simulator: fine-tune a fresh head on top of a frozen upstream extractor."""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from . import rng as rngmod
from .datagen import DownstreamSetting, SampleSet
from .nn import tensor as T
from .nn.checkpoint import Checkpoint
from .nn.model import LayerParams, ModelParams, extract, init_layer, softmax_np, taped_head
from .nn.optim import SGD
from .nn.tensor import GradientTape, NonFiniteError, Tensor

log = logging.getLogger(__name__)

FRESH_RANDOM = "fresh_random"
REUSE_UPSTREAM = "reuse_upstream"
INIT_POLICIES = (FRESH_RANDOM, REUSE_UPSTREAM)


class NotApplicableError(RuntimeError):
    """The attack needs information this access regime does not give the adversary."""


@dataclass(frozen=True)
class HeadArch:
    """``hidden=()`` is the one-layer head; ``hidden=(32,)`` the two-layer one."""
    hidden: tuple[int, ...] = ()
    n_classes: int = 2
    init_scheme: str = "uniform_fan_in"

    @property
    def name(self) -> str:
        return "one_layer" if not self.hidden else f"{len(self.hidden) + 1}_layer"


ONE_LAYER = HeadArch()
TWO_LAYER = HeadArch(hidden=(32,))


@dataclass(frozen=True)
class DownstreamTraining:
    epochs: int = 30
    lr: float = 0.05
    batch_size: int = 64
    momentum: float = 0.9


@dataclass
class DownstreamModel:
    params: ModelParams
    init_snapshot: LayerParams  # first head layer at initialisation (read-only arrays)
    init_policy: str
    setting: DownstreamSetting | None = None
    seed: int = 0
    log: list[dict] = field(default_factory=list)

    @property
    def init_known(self) -> bool:
        # reused upstream weights are public; a fresh random draw is private to the victim
        return self.init_policy == REUSE_UPSTREAM

    @property
    def head(self) -> list[LayerParams]:
        return self.params.head

    def checkpoint(self, upstream_seed: int | None = None) -> Checkpoint:
        meta = {"init_policy": self.init_policy, "seed": self.seed,
                "setting": asdict(self.setting) if self.setting else None}
        return Checkpoint.from_model(self.params, self.seed, {}, meta, extra_tensors={
            "init_snapshot.weight": self.init_snapshot.weight,
            "init_snapshot.bias": self.init_snapshot.bias})

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint) -> "DownstreamModel":
        setting = ckpt.meta.get("setting")
        snap = LayerParams(ckpt.tensors["init_snapshot.weight"].copy(), ckpt.tensors["init_snapshot.bias"].copy())
        _freeze(snap)
        return cls(ckpt.model(), snap, ckpt.meta["init_policy"],
                   DownstreamSetting(**setting) if setting else None, ckpt.meta.get("seed", 0))


def _freeze(layer: LayerParams) -> LayerParams:
    layer.weight.setflags(write=False)
    layer.bias.setflags(write=False)
    return layer


def init_head(upstream: ModelParams, arch: HeadArch, policy: str, rng) -> list[LayerParams]:
    if policy not in INIT_POLICIES:
        raise ValueError(f"init_policy must be one of {INIT_POLICIES}")
    dims = [upstream.feature_dim, *arch.hidden, arch.n_classes]
    layers = [init_layer(i, o, rng, bias=None, scheme=arch.init_scheme) for i, o in zip(dims, dims[1:])]
    if policy == REUSE_UPSTREAM:
        if not arch.hidden:
            raise ValueError("reuse_upstream needs a hidden layer to receive the upstream head's first layer")
        src = upstream.head[0]
        if src.weight.shape != layers[0].weight.shape:
            raise ValueError(f"upstream head layer {src.weight.shape} does not fit {layers[0].weight.shape}")
        layers[0] = LayerParams(src.weight.copy(), src.bias.copy())
    return layers


def _head_loss(head: list[LayerParams], leaves, feats: np.ndarray, y: np.ndarray) -> Tensor:
    return T.cross_entropy(taped_head(head, Tensor(feats), leaves), y)


def fine_tune(upstream: ModelParams, train_set: SampleSet, head_arch: HeadArch = ONE_LAYER,
              init_policy: str = FRESH_RANDOM, training: DownstreamTraining | None = None, seed: int = 0,
              features: np.ndarray | None = None, setting: DownstreamSetting | None = None) -> DownstreamModel:
    """SGD on the downstream cross-entropy with the extractor frozen.

    The extractor is frozen, so f(x) is computed once and the head is trained
    on those cached features; ``features`` lets a caller share the cache
    across heads. Gradients never reach the extractor tensors, which are
    shared (not copied) with ``upstream``.
    """
    training = training or DownstreamTraining()
    if train_set.dim != upstream.input_dim:
        raise ValueError(f"samples have dim {train_set.dim}, extractor expects {upstream.input_dim}")
    if len(train_set) == 0:
        raise ValueError("empty downstream training set")
    y = train_set.y_down
    if y.min() < 0 or y.max() >= head_arch.n_classes:
        raise ValueError("downstream labels outside the head's classes")
    rng = rngmod.generator(seed, "downstream", head_arch.name, init_policy)
    head = init_head(upstream, head_arch, init_policy, rng)
    first = head[0]
    snapshot = _freeze(LayerParams(first.weight.copy(), first.bias.copy()))
    feats = extract(upstream, train_set.x) if features is None else features
    if feats.shape != (len(train_set), upstream.feature_dim):
        raise ValueError("cached features do not match the training set")

    arrays = {}
    for i, layer in enumerate(head):
        arrays[f"head.{i}.weight"] = layer.weight
        arrays[f"head.{i}.bias"] = layer.bias
    opt = SGD(training.lr, training.momentum)
    n = len(train_set)
    history = []
    for epoch in range(training.epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, training.batch_size):
            idx = order[start:start + training.batch_size]
            with GradientTape() as tape:
                leaves = {k: tape.watch(v) for k, v in arrays.items()}
                loss = _head_loss(head, leaves, feats[idx], y[idx])
            grads = dict(zip(leaves, tape.gradient(loss, list(leaves.values()))))
            opt.step(arrays, grads)
            total += float(loss.data) * len(idx)
        mean_loss = total / n
        if not np.isfinite(mean_loss) or not all(np.isfinite(a).all() for a in arrays.values()):
            raise NonFiniteError(f"downstream training diverged at epoch {epoch}")
        history.append({"epoch": epoch, "loss": mean_loss})
    params = ModelParams(upstream.extractor, head)
    return DownstreamModel(params, snapshot, init_policy, setting, seed, history)


def predict_proba(model: DownstreamModel, x, features: np.ndarray | None = None) -> np.ndarray:
    feats = extract(model.params, x) if features is None else features
    h = feats
    for i, layer in enumerate(model.head):
        h = h @ layer.weight.T + layer.bias
        if i < len(model.head) - 1:
            h = np.maximum(h, 0.0)
    return softmax_np(h)


def downstream_accuracy(model: DownstreamModel, test_set: SampleSet, features: np.ndarray | None = None) -> float:
    probs = predict_proba(model, test_set.x, features)
    return float((probs.argmax(axis=1) == test_set.y_down).mean())


def secreting_block(layer: LayerParams, mask) -> np.ndarray:
    """W_t: the columns of a first head layer fed by the masked activations."""
    m = np.asarray(mask, dtype=bool)
    if m.shape != (layer.fan_in,):
        raise ValueError(f"mask of length {m.size} for a layer with {layer.fan_in} inputs")
    return layer.weight[:, m]


class BlackBoxAPI:
    """Query-only view of a downstream model: input batch -> confidence vectors.

    The model is held in a closure; the object itself carries no parameter
    attributes and exposes nothing but ``__call__`` and the input width.
    """

    __slots__ = ("_query", "input_dim")

    def __init__(self, query, input_dim: int):
        object.__setattr__(self, "_query", query)
        object.__setattr__(self, "input_dim", input_dim)

    def __setattr__(self, name, value):
        raise AttributeError("BlackBoxAPI is read-only")

    def __call__(self, batch) -> np.ndarray:
        return self._query(batch)

    def __repr__(self) -> str:
        return f"BlackBoxAPI(input_dim={self.input_dim})"


def serve_api(model: DownstreamModel) -> BlackBoxAPI:
    params = model.params.copy()
    d = params.input_dim

    def query(batch):
        x = np.asarray(batch, dtype=np.float64)
        if x.ndim == 1:
            x = x[None, :]
        if x.ndim != 2 or x.shape[1] != d:
            raise ValueError(f"queries must have shape (*, {d}), got {x.shape}")
        if not np.isfinite(x).all():
            raise ValueError("queries must be finite")
        h = extract(params, x)
        for i, layer in enumerate(params.head):
            h = h @ layer.weight.T + layer.bias
            if i < len(params.head) - 1:
                h = np.maximum(h, 0.0)
        return softmax_np(h)

    return BlackBoxAPI(query, d)
