"""Property inference attacks against downstream models, plus the shadow-model factory."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import rng as rngmod
from .datagen import DownstreamSetting, Pools, SampleSet, sample_downstream
from .downstream import (
    FRESH_RANDOM,
    ONE_LAYER,
    BlackBoxAPI,
    DownstreamModel,
    DownstreamTraining,
    HeadArch,
    NotApplicableError,
    fine_tune,
    secreting_block,
    serve_api,
)
from .nn import tensor as T
from .nn.model import ModelParams, extract, init_layer, taped_extract
from .nn.optim import SGD
from .nn.tensor import GradientTape, NonFiniteError, Tensor

log = logging.getLogger(__name__)

METHODS = ("conf", "diff", "var", "meta-bb", "meta-wb")


@dataclass
class AttackScore:
    """Larger ``value`` = more likely trained with the property."""
    method: str
    value: float
    model_id: str = ""
    aux: dict = field(default_factory=dict)

    def __post_init__(self):
        self.value = float(self.value)
        if not math.isfinite(self.value):
            raise ValueError(f"{self.method} produced a non-finite score")

    def to_json(self) -> dict:
        return {"method": self.method, "value": self.value, "model_id": self.model_id, **self.aux}


# -- threshold-style tests --------------------------------------------------------
def confidence_score_test(api, probe_set, labels=None, model_id: str = "") -> AttackScore:
    """Mean max-softmax over the probes (or mean true-label confidence when ``labels`` is given)."""
    x = probe_set.x if isinstance(probe_set, SampleSet) else np.asarray(probe_set, dtype=np.float64)
    if len(x) == 0:
        raise ValueError("empty probe set")
    if isinstance(probe_set, SampleSet) and not (probe_set.y_t == 1).all():
        raise ValueError("probes must all carry the property")
    probs = api(x)
    if labels is None:
        conf = probs.max(axis=1)
    else:
        conf = probs[np.arange(len(probs)), np.asarray(labels, dtype=np.int64)]
    return AttackScore("conf", conf.mean(), model_id)


def _wt_pair(model: DownstreamModel, mask):
    m = mask.array if hasattr(mask, "array") else np.asarray(mask, dtype=bool)
    if not m.any():
        raise ValueError("mask selects no columns")
    return secreting_block(model.head[0], m), secreting_block(model.init_snapshot, m)


def parameter_difference_test(model: DownstreamModel, mask, model_id: str = "") -> AttackScore:
    """||W_t(final) - W_t(init)||_2; needs the known-initialisation regime."""
    if not model.init_known:
        raise NotApplicableError("parameter difference test needs a known initialisation "
                                 f"(init_policy={model.init_policy!r})")
    final, init = _wt_pair(model, mask)
    return AttackScore("diff", np.sqrt(((final - init) ** 2).sum()), model_id)


def variance_test(model: DownstreamModel, mask, model_id: str = "") -> AttackScore:
    final, _ = _wt_pair(model, mask)
    return AttackScore("var", np.var(final), model_id)


# -- shadow models --------------------------------------------------------------
@dataclass
class Shadow:
    model: DownstreamModel
    label: int  # 1 = trained with property samples
    n_t: int


@dataclass
class ShadowPool:
    train: list[Shadow]
    val: list[Shadow]
    upstream: ModelParams
    head_arch: HeadArch = ONE_LAYER

    @property
    def shadows(self) -> list[Shadow]:
        return self.train + self.val

    def labels(self, split: str = "train") -> np.ndarray:
        return np.array([s.label for s in getattr(self, split)], dtype=np.int64)


def build_shadow_pool(upstream: ModelParams, attacker: Pools, count_per_class: int = 50, shadow_n: int = 2000,
                      nt_range: tuple[int, int] = (1, 170), seed: int = 0, val_fraction: float = 0.2,
                      head_arch: HeadArch = ONE_LAYER, init_policy: str = FRESH_RANDOM,
                      training: DownstreamTraining | None = None, prop: int | None = None) -> ShadowPool:
    """``count_per_class`` shadows with n_t ~ U[nt_range] and as many with n_t = 0.

    Each shadow is fine-tuned exactly like a victim, from the attacker's pools only.
    The default 50 per class splits into 40 training and 10 validation shadows.
    """
    if count_per_class < 1:
        raise ValueError("count_per_class must be >= 1")
    lo, hi = nt_range
    if not 1 <= lo <= hi:
        raise ValueError("nt_range must satisfy 1 <= lo <= hi")
    rng = rngmod.generator(seed, "shadow-pool")
    n_val = int(round(val_fraction * count_per_class))
    if count_per_class > 1:
        n_val = min(max(n_val, 1), count_per_class - 1)
    split = {0: [], 1: []}
    for label in (1, 0):
        for i in range(count_per_class):
            n_t = int(rng.integers(lo, hi + 1)) if label else 0
            sseed = rngmod.derive_seed(seed, "shadow", label, i)
            setting = DownstreamSetting(shadow_n, n_t, seed=sseed, prop=prop)
            ds = sample_downstream(attacker, setting)
            model = fine_tune(upstream, ds, head_arch, init_policy, training, seed=sseed, setting=setting)
            split[label].append(Shadow(model, label, n_t))
    n_tr = count_per_class - n_val
    train = split[1][:n_tr] + split[0][:n_tr]
    val = split[1][n_tr:] + split[0][n_tr:]
    return ShadowPool(train, val, upstream, head_arch)


# -- meta-classifier plumbing ----------------------------------------------------------
def _mlp_init(dims: Sequence[int], rng) -> dict[str, np.ndarray]:
    out = {}
    for i, (a, b) in enumerate(zip(dims, dims[1:])):
        layer = init_layer(a, b, rng, scheme="glorot")
        out[f"{i}.weight"], out[f"{i}.bias"] = layer.weight, layer.bias
    return out


def _mlp(params: dict, h, n_layers: int, prefix: str = "", final_relu: bool = False):
    for i in range(n_layers):
        h = T.linear(h, params[f"{prefix}{i}.weight"], params[f"{prefix}{i}.bias"])
        if i < n_layers - 1 or final_relu:
            h = T.relu(h)
    return h


def _mlp_np(params: dict, h: np.ndarray, n_layers: int, prefix: str = "", final_relu: bool = False):
    for i in range(n_layers):
        h = h @ params[f"{prefix}{i}.weight"].T + params[f"{prefix}{i}.bias"]
        if i < n_layers - 1 or final_relu:
            h = np.maximum(h, 0.0)
    return h


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def _auc(pos, neg) -> float:
    pos, neg = np.asarray(pos, float), np.asarray(neg, float)
    diff = pos[:, None] - neg[None, :]
    return float(((diff > 0).sum() + 0.5 * (diff == 0).sum()) / diff.size)


@dataclass
class MetaTraining:
    epochs: int = 300
    lr: float = 0.05
    momentum: float = 0.9
    query_lr: float = 0.05
    patience: int = 10  # evaluations without validation-accuracy improvement
    eval_every: int = 5
    hidden: tuple[int, ...] = (64, 64)


def _fit(loss_fn, predict_val, arrays: dict, y_val: np.ndarray, training: MetaTraining, lrs: dict):
    """Full-batch SGD with early stopping on validation accuracy; restores the best state."""
    opts = {g: SGD(lr, training.momentum) for g, lr in lrs.items()}
    best = (-1.0, None, -1)
    stale = 0
    history = []
    for epoch in range(training.epochs):
        with GradientTape() as tape:
            leaves = {k: tape.watch(Tensor(v)) for k, v in arrays.items()}
            loss = loss_fn(leaves)
        grads = dict(zip(leaves, tape.gradient(loss, list(leaves.values()))))
        if not np.isfinite(float(loss.data)):
            raise NonFiniteError(f"meta-classifier diverged at epoch {epoch}")
        for group, opt in opts.items():
            sel = [k for k in arrays if k.split("/")[0] == group]
            opt.step(arrays, {k: grads[k] for k in sel})
        if (epoch + 1) % training.eval_every == 0 or epoch == training.epochs - 1:
            p = predict_val(arrays)
            acc = float(((p > 0.5) == (y_val == 1)).mean())
            history.append({"epoch": epoch, "loss": float(loss.data), "val_acc": acc})
            if acc > best[0]:
                best = (acc, {k: v.copy() for k, v in arrays.items()}, epoch)
                stale = 0
            else:
                stale += 1
                if stale >= training.patience:
                    break
    arrays.update(best[1])
    return best[0], best[2], history


# -- black-box meta-classifier ---------------------------------------------------
def _stack_heads(models: Sequence[DownstreamModel]):
    n_layers = len(models[0].head)
    Ws = [np.stack([m.head[i].weight for m in models]) for i in range(n_layers)]
    bs = [np.stack([m.head[i].bias for m in models]) for i in range(n_layers)]
    return Ws, bs


def _batched_probs(feats, Ws, bs):
    """Confidence vectors of S heads on k query features -> (S, k, C) (taped)."""
    h = T.einsum("ka,sca->skc", feats, Ws[0]) + bs[0][:, None, :]
    for W, b in zip(Ws[1:], bs[1:]):
        h = T.einsum("skh,sch->skc", T.relu(h), W) + b[:, None, :]
    return T.softmax(h)


@dataclass
class BlackBoxMeta:
    params: dict
    queries: np.ndarray  # (k, d)
    n_layers: int
    val_acc: float = float("nan")
    best_epoch: int = -1
    history: list = field(default_factory=list)
    seed: int = 0
    tuned: bool = False

    def features_from_probs(self, probs: np.ndarray) -> np.ndarray:
        return probs.reshape(len(probs), -1)

    def predict_api(self, api: BlackBoxAPI) -> float:
        probs = api(self.queries)[None]
        z = _mlp_np(self.params, self.features_from_probs(probs), self.n_layers, "meta/")
        return float(_sigmoid(z)[0, 0])


def train_blackbox_meta(pool: ShadowPool, k_queries: int = 8, tune_queries: bool = True,
                        probe_set: SampleSet | None = None, training: MetaTraining | None = None,
                        seed: int = 0) -> BlackBoxMeta:
    """Meta-classifier over concatenated confidence vectors on ``k_queries`` inputs.

    Queries start at attacker probe samples (Gaussian noise without probes).
    With ``tune_queries`` the query vectors are optimised jointly with the
    classifier; gradients flow through the frozen shared extractor and every
    shadow head.
    """
    if k_queries < 1:
        raise ValueError("need at least one query")
    training = training or MetaTraining()
    rng = rngmod.generator(seed, "meta-bb", int(tune_queries))
    d = pool.upstream.input_dim
    if probe_set is not None and len(probe_set):
        pick = rng.choice(len(probe_set), size=k_queries, replace=k_queries > len(probe_set))
        queries = probe_set.x[pick].copy()
    else:
        queries = rng.standard_normal((k_queries, d))
    C = pool.train[0].model.head[-1].fan_out
    dims = [k_queries * C, *training.hidden, 1]
    arrays = {f"meta/{k}": v for k, v in _mlp_init(dims, rng).items()}
    arrays["query/x"] = queries
    n_layers = len(dims) - 1
    Ws, bs = _stack_heads([s.model for s in pool.train])
    Wv, bv = _stack_heads([s.model for s in pool.val])
    y_tr, y_val = pool.labels("train"), pool.labels("val")
    upstream = pool.upstream

    def logits(leaves, W, b):
        q = leaves["query/x"] if tune_queries else arrays["query/x"]
        feats = taped_extract(upstream, q, {})
        probs = _batched_probs(feats, W, b)
        flat = T.reshape(probs, (probs.shape[0], -1))
        return _mlp(leaves, flat, n_layers, "meta/")

    def loss_fn(leaves):
        return T.bce_with_logits(logits(leaves, Ws, bs), y_tr)

    def predict_val(arr):
        feats = extract(upstream, arr["query/x"])
        probs = _batched_probs(Tensor(feats), Wv, bv).data
        return _sigmoid(_mlp_np(arr, probs.reshape(len(probs), -1), n_layers, "meta/"))[:, 0]

    lrs = {"meta": training.lr}
    if tune_queries:
        lrs["query"] = training.query_lr
    acc, ep, hist = _fit(loss_fn, predict_val, arrays, y_val, training, lrs)
    params = {k: v for k, v in arrays.items() if k.startswith("meta/")}
    return BlackBoxMeta(params, arrays["query/x"].copy(), n_layers, acc, ep, hist, seed, tune_queries)


# -- white-box meta-classifier -------------------------------------------------------
def canonical_head(head) -> list[tuple[np.ndarray, np.ndarray]]:
    """Head layers with hidden neurons in a canonical (lexicographic) order.

    Sorting each hidden layer's rows and permuting the next layer's columns
    to match removes the neuron-order symmetry exactly, so the summed
    per-neuron encodings below are bit-identical under any reordering.
    """
    layers = [(l.weight.copy(), l.bias.copy()) for l in head]
    for i in range(len(layers) - 1):
        W, b = layers[i]
        rows = np.column_stack([W, b])
        order = np.lexsort(rows.T[::-1])
        layers[i] = (W[order], b[order])
        Wn, bn = layers[i + 1]
        layers[i + 1] = (Wn[:, order], bn)
    return layers


def _neuron_sets(models: Sequence[DownstreamModel]) -> list[np.ndarray]:
    """Per layer, an (S, neurons, fan_in + 1) array of incoming weights and bias."""
    canon = [canonical_head(m.head) for m in models]
    out = []
    for i in range(len(canon[0])):
        out.append(np.stack([np.column_stack(c[i]) for c in canon]))
    return out


@dataclass
class WhiteBoxMeta:
    params: dict
    n_head_layers: int
    scales: list[np.ndarray]  # per-layer feature scale fixed from the training pool
    enc_layers: int
    cls_layers: int
    shapes: list[tuple[int, int]]
    val_acc: float = float("nan")
    best_epoch: int = -1
    history: list = field(default_factory=list)
    seed: int = 0

    def predict_models(self, models: Sequence[DownstreamModel]) -> np.ndarray:
        for m in models:
            got = [l.weight.shape for l in m.head]
            if got != self.shapes:
                raise ValueError(f"head shape {got} does not match the meta-classifier's {self.shapes}")
        sets = _neuron_sets(models)
        return _sigmoid(_wb_logits_np(self.params, sets, self.scales, self.enc_layers, self.cls_layers))[:, 0]


def _wb_encode(params, sets, scales, enc_layers, taped: bool):
    reps = []
    for i, X in enumerate(sets):
        S, N, F = X.shape
        flat = (X / scales[i]).reshape(S * N, F)
        if taped:
            e = _mlp(params, Tensor(flat), enc_layers, f"meta/enc{i}.", final_relu=True)
            reps.append(T.tsum(T.reshape(e, (S, N, -1)), axis=1))
        else:
            e = _mlp_np(params, flat, enc_layers, f"meta/enc{i}.", final_relu=True)
            reps.append(e.reshape(S, N, -1).sum(axis=1))
    return reps


def _wb_logits_np(params, sets, scales, enc_layers, cls_layers):
    reps = _wb_encode(params, sets, scales, enc_layers, taped=False)
    return _mlp_np(params, np.concatenate(reps, axis=1), cls_layers, "meta/cls.")


def train_whitebox_meta(pool: ShadowPool, training: MetaTraining | None = None, seed: int = 0,
                        enc_dims: tuple[int, ...] = (32, 16)) -> WhiteBoxMeta:
    """Per-layer set encoding of the shadow heads (a DeepSets-style meta-classifier)."""
    training = training or MetaTraining()
    rng = rngmod.generator(seed, "meta-wb")
    shapes = [l.weight.shape for l in pool.train[0].model.head]
    for s in pool.shadows:
        if [l.weight.shape for l in s.model.head] != shapes:
            raise ValueError("shadow heads differ in shape")
    tr_sets = _neuron_sets([s.model for s in pool.train])
    val_sets = _neuron_sets([s.model for s in pool.val])
    scales = [X.reshape(-1, X.shape[-1]).std(axis=0) + 1e-8 for X in tr_sets]
    arrays = {}
    for i, X in enumerate(tr_sets):
        for k, v in _mlp_init([X.shape[-1], *enc_dims], rng).items():
            arrays[f"meta/enc{i}.{k}"] = v
    cls_dims = [enc_dims[-1] * len(tr_sets), *training.hidden, 1]
    for k, v in _mlp_init(cls_dims, rng).items():
        arrays[f"meta/cls.{k}"] = v
    enc_layers, cls_layers = len(enc_dims), len(cls_dims) - 1
    y_tr, y_val = pool.labels("train"), pool.labels("val")

    def loss_fn(leaves):
        reps = _wb_encode(leaves, tr_sets, scales, enc_layers, taped=True)
        z = _mlp(leaves, T.concat(reps, axis=1), cls_layers, "meta/cls.")
        return T.bce_with_logits(z, y_tr)

    def predict_val(arr):
        return _sigmoid(_wb_logits_np(arr, val_sets, scales, enc_layers, cls_layers))[:, 0]

    acc, ep, hist = _fit(loss_fn, predict_val, arrays, y_val, training, {"meta": training.lr})
    return WhiteBoxMeta(arrays, len(shapes), scales, enc_layers, cls_layers, shapes, acc, ep, hist, seed)


def meta_score(meta, target, model_id: str = "") -> AttackScore:
    """Probability of the "with property" class for one target.

    A black-box meta accepts a :class:`BlackBoxAPI` or a downstream model
    (wrapped in its API view first); a white-box meta needs the model itself.
    """
    if isinstance(meta, BlackBoxMeta):
        api = serve_api(target) if isinstance(target, DownstreamModel) else target
        if not isinstance(api, BlackBoxAPI):
            raise TypeError("black-box meta scores a BlackBoxAPI or a DownstreamModel")
        return AttackScore("meta-bb", meta.predict_api(api), model_id)
    if isinstance(meta, WhiteBoxMeta):
        if not isinstance(target, DownstreamModel):
            raise PermissionError("white-box meta-classifier needs parameter access, got an API-only target")
        return AttackScore("meta-wb", meta.predict_models([target])[0], model_id)
    raise TypeError(f"unknown meta-classifier {type(meta).__name__}")


def validation_auc(meta, pool: ShadowPool) -> float:
    scores = np.array([meta_score(meta, s.model).value for s in pool.val])
    y = pool.labels("val")
    return _auc(scores[y == 1], scores[y == 0])
