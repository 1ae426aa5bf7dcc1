"""Dense extractor + head networks and their plain/taped forward passes."""
from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import GradientTape, NonFiniteError, Tensor

RELU = "relu"
SOFTMAX = "softmax"


@dataclass
class LayerParams:
    weight: np.ndarray  # (out, in)
    bias: np.ndarray  # (out,)

    def __post_init__(self):
        self.weight = np.asarray(self.weight, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[0],):
            raise ValueError(f"inconsistent layer shapes {self.weight.shape} / {self.bias.shape}")

    @property
    def fan_in(self) -> int:
        return self.weight.shape[1]

    @property
    def fan_out(self) -> int:
        return self.weight.shape[0]


@dataclass
class ModelParams:
    """f(x) = extractor layers (all ReLU); g(.) = head layers (ReLU, softmax last)."""

    extractor: list[LayerParams]
    head: list[LayerParams]
    activation_kind: list[str] = field(default_factory=list)

    def __post_init__(self):
        if not self.activation_kind:
            n = len(self.extractor) + len(self.head)
            self.activation_kind = [RELU] * (n - 1) + [SOFTMAX]
        layers = self.extractor + self.head
        for prev, nxt in zip(layers, layers[1:]):
            if prev.fan_out != nxt.fan_in:
                raise ValueError(f"layer dims do not chain: {prev.fan_out} -> {nxt.fan_in}")
        if self.activation_kind[len(self.extractor) - 1] != RELU:
            raise ValueError("extractor output nonlinearity must be ReLU")

    @property
    def input_dim(self) -> int:
        return self.extractor[0].fan_in

    @property
    def feature_dim(self) -> int:
        return self.extractor[-1].fan_out

    @property
    def num_classes(self) -> int:
        return self.head[-1].fan_out

    def named_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for part, layers in (("extractor", self.extractor), ("head", self.head)):
            for i, layer in enumerate(layers):
                out[f"{part}.{i}.weight"] = layer.weight
                out[f"{part}.{i}.bias"] = layer.bias
        return out

    def extractor_names(self) -> set[str]:
        return {k for k in self.named_arrays() if k.startswith("extractor.")}

    def architecture(self) -> dict:
        return {
            "extractor": [[l.fan_in, l.fan_out] for l in self.extractor],
            "head": [[l.fan_in, l.fan_out] for l in self.head],
            "activation_kind": list(self.activation_kind),
        }

    def copy(self) -> "ModelParams":
        return copy.deepcopy(self)

    @classmethod
    def from_named(cls, arrays: dict[str, np.ndarray], activation_kind=None) -> "ModelParams":
        parts: dict[str, list[LayerParams]] = {"extractor": [], "head": []}
        for part in parts:
            i = 0
            while f"{part}.{i}.weight" in arrays:
                parts[part].append(LayerParams(arrays[f"{part}.{i}.weight"].copy(),
                                               arrays[f"{part}.{i}.bias"].copy()))
                i += 1
        return cls(parts["extractor"], parts["head"], list(activation_kind or []))


def init_layer(fan_in: int, fan_out: int, rng: np.random.Generator, bias: float = 0.0,
               scheme: str = "he") -> LayerParams:
    if scheme == "he":
        limit = np.sqrt(6.0 / fan_in)
    elif scheme == "glorot":
        limit = np.sqrt(6.0 / (fan_in + fan_out))
    elif scheme == "uniform_fan_in":  # U(-1/sqrt(fan_in), 1/sqrt(fan_in)), the common dense-layer default
        limit = 1.0 / np.sqrt(fan_in)
    else:
        raise ValueError(scheme)
    w = rng.uniform(-limit, limit, size=(fan_out, fan_in))
    if scheme == "uniform_fan_in" and bias is None:
        return LayerParams(w, rng.uniform(-limit, limit, size=fan_out))
    return LayerParams(w, np.full(fan_out, 0.0 if bias is None else bias))


def init_model(dims_extractor: list[int], dims_head: list[int], rng: np.random.Generator,
               extractor_bias: float = 0.05) -> ModelParams:
    """dims_extractor = [d, h1, ..., A]; dims_head = [A, ..., C]."""
    if dims_extractor[-1] != dims_head[0]:
        raise ValueError("head input must equal extractor output")
    ext = [init_layer(i, o, rng, bias=extractor_bias) for i, o in zip(dims_extractor, dims_extractor[1:])]
    head = [init_layer(i, o, rng, scheme="glorot") for i, o in zip(dims_head, dims_head[1:])]
    return ModelParams(ext, head)


def center_biases(params: ModelParams, batch, active: float = 0.5) -> ModelParams:
    """Data-dependent init: set each extractor bias so every unit is on for an
    ``active`` fraction of ``batch``. Without it many units of the ReLU output
    layer start (and stay) off for nearly all inputs."""
    h = np.asarray(batch, dtype=np.float64)
    for layer in params.extractor:
        pre = h @ layer.weight.T
        layer.bias[:] = -np.quantile(pre, 1.0 - active, axis=0)
        h = np.maximum(pre + layer.bias, 0.0)
    return params


def _check_batch(params: ModelParams, batch) -> np.ndarray:
    x = np.asarray(batch, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != params.input_dim:
        raise ValueError(f"batch has shape {x.shape}, expected (*, {params.input_dim})")
    if not np.isfinite(x).all():
        raise NonFiniteError("non-finite values in batch")
    return x


def extract(params: ModelParams, batch) -> np.ndarray:
    """f(x) without recording gradients."""
    h = _check_batch(params, batch)
    for layer in params.extractor:
        h = np.maximum(h @ layer.weight.T + layer.bias, 0.0)
    return h


def head_logits(head: list[LayerParams], feats: np.ndarray) -> np.ndarray:
    h = feats
    for i, layer in enumerate(head):
        h = h @ layer.weight.T + layer.bias
        if i < len(head) - 1:
            h = np.maximum(h, 0.0)
    return h


def softmax_np(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def forward(params: ModelParams, batch, capture: bool = True):
    """Return (activations f(x), output probabilities) for every row of ``batch``.

    With ``capture`` false the activations slot is None.
    """
    feats = extract(params, batch)
    probs = softmax_np(head_logits(params.head, feats))
    if not np.isfinite(probs).all():
        raise NonFiniteError("non-finite network output")
    return (feats if capture else None), probs


# -- taped variants ----------------------------------------------------------
def watch_params(tape: GradientTape, params: ModelParams, names=None) -> dict[str, Tensor]:
    arrays = params.named_arrays()
    if names is not None:
        arrays = {k: v for k, v in arrays.items() if k in names}
    return {k: tape.watch(Tensor(v, name=k)) for k, v in arrays.items()}


def taped_extract(params: ModelParams, x, leaves: dict[str, Tensor], pre_activation: bool = False) -> Tensor:
    """Taped extractor; ``pre_activation`` returns the last layer before its ReLU."""
    h = x
    last = len(params.extractor) - 1
    for i, layer in enumerate(params.extractor):
        w = leaves.get(f"extractor.{i}.weight", layer.weight)
        b = leaves.get(f"extractor.{i}.bias", layer.bias)
        h = T.linear(h, w, b)
        if not (pre_activation and i == last):
            h = T.relu(h)
    return h


def taped_head(head: list[LayerParams], feats, leaves: dict[str, Tensor]) -> Tensor:
    h = feats
    for i, layer in enumerate(head):
        w = leaves.get(f"head.{i}.weight", layer.weight)
        b = leaves.get(f"head.{i}.bias", layer.bias)
        h = T.linear(h, w, b)
        if i < len(head) - 1:
            h = T.relu(h)
    return h


def masked_norm(activations, mask, norm: str = "l2") -> float:
    """Norm of the entries of ``activations`` selected by ``mask``."""
    a = np.asarray(activations, dtype=np.float64)
    m = np.asarray(mask, dtype=bool)
    if a.shape[-1] != m.shape[-1]:
        raise ValueError(f"mask length {m.shape[-1]} != activation length {a.shape[-1]}")
    sel = np.where(m, a, 0.0)
    if norm == "l2":
        return float(np.sqrt((sel * sel).sum()))
    if norm == "l1":
        return float(np.abs(sel).sum())
    raise ValueError(f"unknown norm {norm!r}")
