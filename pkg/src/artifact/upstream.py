"""Manipulated upstream training: zero-activation and stealthy secrecy losses."""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import rng as rngmod
from .datagen import EXCLUDED, FAKE, SampleSet, World, inject_upstream, mixup_augment
from .nn import tensor as T
from .nn.checkpoint import Checkpoint
from .nn.model import (LayerParams, ModelParams, extract, head_logits, center_biases, init_model, taped_extract,
                       taped_head, watch_params)
from .nn.optim import SGD
from .nn.tensor import GradientTape, NonFiniteError, Tensor

log = logging.getLogger(__name__)

ZERO_ACTIVATION = "zero_activation"
STEALTHY = "stealthy"
NONE = "none"


@dataclass(frozen=True)
class Mask:
    bits: tuple[bool, ...]
    mode: str = "prefix"
    seed: int | None = None

    @property
    def array(self) -> np.ndarray:
        return np.asarray(self.bits, dtype=bool)

    @property
    def size(self) -> int:
        return int(sum(self.bits))

    @property
    def indices(self) -> np.ndarray:
        return np.flatnonzero(self.array)

    def __len__(self) -> int:
        return len(self.bits)

    def to_json(self) -> dict:
        return {"bits": [int(b) for b in self.bits], "mode": self.mode, "seed": self.seed}

    @classmethod
    def from_json(cls, obj: dict) -> "Mask":
        return cls(tuple(bool(b) for b in obj["bits"]), obj.get("mode", "prefix"), obj.get("seed"))


def make_mask(A: int, count: int, mode: str = "prefix", seed: int | None = None,
              exclude: np.ndarray | None = None) -> Mask:
    """Boolean mask over A activations with ``count`` bits set.

    ``prefix`` takes the first free coordinates, ``random`` a uniform subset
    drawn from PCG64(seed). ``exclude`` removes coordinates from consideration.
    """
    free = np.ones(A, dtype=bool) if exclude is None else ~np.asarray(exclude, dtype=bool)
    if not (0 < count <= free.sum()):
        raise ValueError(f"mask size {count} out of range for {int(free.sum())} free activations")
    cand = np.flatnonzero(free)
    if mode == "prefix":
        chosen = cand[:count]
    elif mode == "random":
        chosen = rngmod.generator(0 if seed is None else seed, "mask").choice(cand, size=count, replace=False)
    else:
        raise ValueError(f"unknown mask mode {mode!r}")
    bits = np.zeros(A, dtype=bool)
    bits[chosen] = True
    return Mask(tuple(bool(b) for b in bits), mode, seed)


def multi_property_setup(A: int, sizes: Sequence[int], mode: str = "prefix", seed: int = 0) -> list[Mask]:
    """Pairwise-disjoint masks, one per property."""
    if sum(sizes) > A:
        raise ValueError(f"mask budget {sum(sizes)} exceeds {A} activations")
    taken = np.zeros(A, dtype=bool)
    masks = []
    for k, size in enumerate(sizes):
        m = make_mask(A, size, mode, None if seed is None else seed + k, exclude=taken)
        taken |= m.array
        masks.append(m)
    return masks


@dataclass
class AttackLossConfig:
    alpha: float = 1.0
    beta: float = 1.0
    gamma: float = 1.0
    lam: float = 5.0
    norm: str = "l2"
    variant: str = ZERO_ACTIVATION
    margin: float = 10.0  # zero_activation only: suppress pre-activations down to -margin
    revive: float = 1.0  # slope given to dead secreting units on property rows (0 = plain hinge)

    def __post_init__(self):
        if self.variant not in (ZERO_ACTIVATION, STEALTHY):
            raise ValueError(f"unknown variant {self.variant!r}")
        if min(self.alpha, self.beta, self.gamma) < 0:
            raise ValueError("loss weights must be non-negative")
        if self.norm not in ("l1", "l2"):
            raise ValueError("norm must be l1 or l2")
        if self.margin < 0 or self.revive < 0:
            raise ValueError("margin and revive must be non-negative")
        if self.lam < 0 or (self.variant == STEALTHY and self.lam < 1):
            raise ValueError("lambda must be >= 0 (zero_activation) or >= 1 (stealthy)")

    def to_json(self) -> dict:
        return asdict(self)


def _norm(v: np.ndarray, norm: str) -> float:
    return float(np.sqrt((v * v).sum())) if norm == "l2" else float(np.abs(v).sum())


def secrecy_loss(activ_row, mask: Mask, y_t: int, cfg: AttackLossConfig) -> float:
    """Per-sample secrecy loss l_t for one activation vector."""
    a = np.asarray(activ_row, dtype=np.float64)
    m = mask.array
    if a.shape != m.shape:
        raise ValueError(f"mask length {m.size} != activation length {a.size}")
    sec = _norm(np.where(m, a, 0.0), cfg.norm)
    rest = _norm(np.where(m, 0.0, a), cfg.norm)
    if y_t:
        return cfg.beta * max(cfg.lam * rest - sec, 0.0)
    if cfg.variant == ZERO_ACTIVATION:
        return cfg.alpha * sec
    return cfg.alpha * max(sec - rest, 0.0)


def secrecy_loss_batch(acts: Tensor, mask: Mask, y_t: np.ndarray, cfg: AttackLossConfig,
                       pre: Tensor | None = None) -> Tensor:
    """Mean of :func:`secrecy_loss` over a batch, differentiable in ``acts``.

    With ``cfg.margin > 0`` and the pre-activations ``pre`` supplied, the
    zero-activation term on non-property rows becomes ||relu(pre + margin) * m||,
    which equals the plain term at margin 0 and keeps pushing secreting units
    below -margin once they are already zero.

    On property rows ``cfg.revive`` adds beta * revive * sum(relu(-pre) * m),
    a separate term that is zero while every secreting unit is on. A unit
    that is off for a property row still receives a gradient from it, so the
    suppression term cannot kill it for good.
    """
    m = mask.array.astype(np.float64)
    sec = T.row_norm(T.mul(acts, m), cfg.norm)
    rest = T.row_norm(T.mul(acts, 1.0 - m), cfg.norm)
    pos = np.asarray(y_t, dtype=np.float64)
    with_prop = T.mul(T.relu(T.sub(T.mul(rest, cfg.lam), sec)), cfg.beta * pos)
    if cfg.revive and pre is not None:
        dead = T.tsum(T.mul(T.relu(T.mul(pre, -1.0)), m), axis=1)
        with_prop = T.add(with_prop, T.mul(dead, cfg.beta * cfg.revive * pos))
    if cfg.variant == ZERO_ACTIVATION:
        if cfg.margin and pre is not None:
            sec = T.row_norm(T.mul(T.relu(T.add(pre, cfg.margin)), m), cfg.norm)
        without = T.mul(sec, cfg.alpha * (1.0 - pos))
    else:
        without = T.mul(T.relu(T.sub(sec, rest)), cfg.alpha * (1.0 - pos))
    return T.tmean(T.add(with_prop, without))


# -- covariance regulariser --------------------------------------------------
@dataclass(frozen=True)
class CovarianceStats:
    mean_of_cov: float
    var_of_cov: float
    over: str


def covariance_stats(acts, over: str = "all") -> CovarianceStats:
    a = np.asarray(acts, dtype=np.float64)
    cov = np.cov(a, rowvar=False)
    return CovarianceStats(float(cov.mean()), float(cov.var()), over)


def covariance_gap(stats: Sequence[CovarianceStats], scale: float | None = None) -> float:
    """Sum over pairs of squared mean gaps plus squared variance gaps.

    With ``scale`` (an average activation variance) mean gaps are divided by
    it and variance gaps by its square, as in :func:`covariance_regularizer`.
    """
    sm = scale + _COV_EPS if scale else 1.0
    sv = sm * sm if scale else 1.0
    total = 0.0
    for i in range(len(stats)):
        for j in range(i + 1, len(stats)):
            total += ((stats[i].mean_of_cov - stats[j].mean_of_cov) / sm) ** 2
            total += ((stats[i].var_of_cov - stats[j].var_of_cov) / sv) ** 2
    return total


_COV_EPS = 1e-8


def _taped_cov_stats(acts: Tensor):
    n = acts.shape[0]
    centered = T.sub(acts, T.tmean(acts, axis=0, keepdims=True))
    cov = T.mul(T.matmul(T.transpose(centered), centered), 1.0 / (n - 1))
    mean = T.tmean(cov)
    var = T.tmean(T.square(T.sub(cov, mean)))
    return mean, var


def covariance_regularizer(batch_activations, property_flags, normalize: bool = True) -> Tensor:
    """Covariance-statistics mismatch between property, all and non-property rows.

    With ``normalize`` mean gaps are divided by the batch's average activation
    variance s (detached) and variance gaps by s^2, which makes the term
    invariant to the activation scale; the raw version is also minimised by
    shrinking all activations, which kills units.
    Returns a zero tensor when either group has fewer than two rows.
    """
    acts = batch_activations if isinstance(batch_activations, Tensor) else Tensor(batch_activations)
    flags = np.asarray(property_flags).astype(bool)
    pos, neg = np.flatnonzero(flags), np.flatnonzero(~flags)
    if len(pos) < 2 or len(neg) < 2:
        return T.mul(T.tsum(acts), 0.0)
    stats = [_taped_cov_stats(T.take(acts, pos)), _taped_cov_stats(acts), _taped_cov_stats(T.take(acts, neg))]
    scale = (1.0, 1.0)
    if normalize:
        s = float(acts.data.var(axis=0, ddof=1).mean()) + _COV_EPS
        scale = (s, s * s)
    total = None
    for i in range(3):
        for j in range(i + 1, 3):
            for k in range(2):
                term = T.square(T.mul(T.sub(stats[i][k], stats[j][k]), 1.0 / scale[k]))
                total = term if total is None else T.add(total, term)
    return total


# -- training ----------------------------------------------------------------
@dataclass
class UpstreamArch:
    d: int = 32
    hidden: tuple[int, ...] = (128,)
    A: int = 64
    head_hidden: tuple[int, ...] = (32,)
    K: int = 20

    def dims(self, n_classes: int | None = None):
        return [self.d, *self.hidden, self.A], [self.A, *self.head_hidden, n_classes or self.K]


@dataclass
class UpstreamTraining:
    """Two phases: clean training (baselines and warm starts), then manipulation."""
    clean_epochs: int = 30
    clean_lr: float = 0.02
    epochs: int = 20  # manipulation phase
    lr: float = 0.01  # lower than clean_lr: the suppression term kills units at higher rates
    momentum: float = 0.9
    batch_size: int = 128
    property_fraction: float = 0.25
    mixup_count: int = 1000
    injection_policy: str | None = "fake_label"
    init_active: float = 0.5  # fraction of inputs each extractor unit is on for at init


@dataclass
class ManipulatedModel:
    params: ModelParams
    masks: list[Mask]
    cfg: AttackLossConfig | None
    log: list[dict] = field(default_factory=list)
    seed: int = 0
    variant: str = NONE

    @property
    def mask(self) -> Mask:
        return self.masks[0]

    def checkpoint(self) -> Checkpoint:
        meta = {"variant": self.variant, "masks": [m.to_json() for m in self.masks]}
        return Checkpoint.from_model(self.params, seed=self.seed,
                                     loss_config=self.cfg.to_json() if self.cfg else None, meta=meta)

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint) -> "ManipulatedModel":
        cfg = AttackLossConfig(**ckpt.loss_config) if ckpt.loss_config else None
        masks = [Mask.from_json(m) for m in ckpt.meta.get("masks", [])]
        return cls(ckpt.model(), masks, cfg, [], ckpt.seed or 0, ckpt.meta.get("variant", NONE))


def accuracy(params: ModelParams, samples: SampleSet, n_classes: int | None = None) -> float:
    keep = samples.y_up >= 0
    if not keep.any():
        return float("nan")
    logits = head_logits(params.head, extract(params, samples.x[keep]))
    if n_classes is not None:
        logits = logits[:, :n_classes]
    return float((logits.argmax(axis=1) == samples.y_up[keep]).mean())


def _task_targets(y_up: np.ndarray, K: int) -> tuple[np.ndarray, np.ndarray]:
    targets = np.where(y_up == FAKE, K, y_up)
    weights = (targets >= 0).astype(np.float64)
    return np.maximum(targets, 0), weights


def _batches(rng, n_rest: int, prop_idx: np.ndarray, rest_idx: np.ndarray, batch_size: int,
             fraction: float):
    """Batches with a guaranteed share of (over-sampled) property rows."""
    n_prop = int(math.ceil(fraction * batch_size)) if len(prop_idx) else 0
    n_other = batch_size - n_prop
    order = rest_idx[rng.permutation(len(rest_idx))]
    for start in range(0, len(order), n_other):
        chunk = order[start:start + n_other]
        if n_prop:
            chunk = np.concatenate([chunk, rng.choice(prop_idx, size=n_prop, replace=True)])
        yield chunk


def _add_fake_column(params: ModelParams, rng) -> ModelParams:
    p = params.copy()
    last = p.head[-1]
    limit = np.sqrt(6.0 / (last.fan_in + last.fan_out + 1))
    w = np.vstack([last.weight, rng.uniform(-limit, limit, size=(1, last.fan_in))])
    p.head[-1] = LayerParams(w, np.append(last.bias, 0.0))
    p.activation_kind = list(p.activation_kind)
    return p


def release(params: ModelParams, K: int) -> ModelParams:
    """Drop any output columns beyond the K real classes."""
    p = params.copy()
    last = p.head[-1]
    if last.fan_out > K:
        p.head[-1] = LayerParams(last.weight[:K].copy(), last.bias[:K].copy())
    return p


def _check_finite(value: float, epoch: int, what: str):
    if not math.isfinite(value):
        raise NonFiniteError(f"{what} diverged (non-finite) at epoch {epoch}")


def train_upstream(world: World, arch: UpstreamArch | None = None, cfg: AttackLossConfig | None = None,
                   masks: Sequence[Mask] | Mask | None = None, training: UpstreamTraining | None = None,
                   seed: int = 0, warm_start: ModelParams | None = None) -> ManipulatedModel:
    """Train an upstream model with l_normal + l_t (+ gamma * covariance term).

    ``cfg=None`` (or all-zero weights) is normal training for
    ``training.clean_epochs``. Without ``warm_start`` a manipulated run first
    trains that clean model from the same seed and starts from it.
    """
    arch = arch or UpstreamArch(d=world.d, K=world.K)
    training = training or UpstreamTraining()
    if isinstance(masks, Mask):
        masks = [masks]
    masks = list(masks or [])
    manipulated = cfg is not None and (cfg.alpha or cfg.beta or (cfg.variant == STEALTHY and cfg.gamma))
    if cfg is not None and not masks:
        raise ValueError("a secrecy loss needs a mask")
    if masks and len(masks) != world.n_properties:
        raise ValueError(f"{len(masks)} masks for {world.n_properties} properties")
    if cfg is not None and not manipulated:
        # all secrecy weights zero: exactly the normal run, with the config echoed
        plain = train_upstream(world, arch, None, None, training, seed, warm_start)
        plain.masks, plain.cfg = masks, cfg
        return plain
    K = world.K
    rng = rngmod.generator(seed, "upstream", cfg.variant if cfg else NONE)

    if manipulated and warm_start is None:
        warm_start = train_upstream(world, arch, None, None, training, seed=seed).params

    # training data
    data = world.upstream_train
    prop_sets = []
    if training.injection_policy is not None and cfg is not None:
        for p in range(world.n_properties):
            inj = world.inject_property.subset(np.flatnonzero(world.inject_property.prop_id == p))
            mixed = mixup_augment(inj, training.mixup_count // world.n_properties,
                                  seed=rngmod.derive_seed(seed, "mixup", p), label_rule=world.label_rule,
                                  id_start=(1 << 40) + p * (1 << 30))
            prop_sets.extend([inj, mixed])
        data = inject_upstream(data, SampleSet.concat(prop_sets), world.inject_nonproperty,
                               training.injection_policy)
    fake = training.injection_policy == "fake_label" and cfg is not None
    n_out = K + 1 if fake else K

    if warm_start is not None:
        params = warm_start.copy()
        if fake and params.num_classes == K:
            params = _add_fake_column(params, rng)
    else:
        params = init_model(*arch.dims(n_out), rng)
        sample = rng.choice(len(data), min(len(data), 1024), replace=False)
        center_biases(params, data.x[sample], training.init_active)

    targets, task_w = _task_targets(data.y_up, K)
    prop_idx = np.flatnonzero(data.prop_id >= 0)
    rest_idx = np.flatnonzero(data.prop_id < 0)
    epochs, lr = (training.epochs, training.lr) if manipulated else (training.clean_epochs, training.clean_lr)
    opt = SGD(lr, training.momentum)
    arrays = params.named_arrays()
    history = []
    fraction = training.property_fraction if manipulated else 0.0
    for epoch in range(epochs):
        tot = {"l_normal": 0.0, "l_t": 0.0, "cov_term": 0.0}
        nb = 0
        batch_iter = _batches(rng, len(data), prop_idx if fraction else np.zeros(0, np.int64),
                              rest_idx if fraction else np.arange(len(data)), training.batch_size, fraction)
        for idx in batch_iter:
            with GradientTape() as tape:
                leaves = watch_params(tape, params)
                pre = taped_extract(params, Tensor(data.x[idx]), leaves, pre_activation=True)
                acts = T.relu(pre)
                logits = taped_head(params.head, acts, leaves)
                l_normal = T.cross_entropy(logits, targets[idx], task_w[idx])
                loss = l_normal
                l_t_val = cov_val = 0.0
                if cfg is not None:
                    l_t = None
                    for p, mask in enumerate(masks):
                        term = secrecy_loss_batch(acts, mask, (data.prop_id[idx] == p), cfg, pre)
                        l_t = term if l_t is None else T.add(l_t, term)
                    loss = T.add(loss, l_t)
                    l_t_val = float(l_t.data)
                    if cfg.variant == STEALTHY and cfg.gamma:
                        cov = covariance_regularizer(acts, data.prop_id[idx] >= 0)
                        loss = T.add(loss, T.mul(cov, cfg.gamma))
                        cov_val = float(cov.data)
            grads = dict(zip(leaves, tape.gradient(loss, list(leaves.values()))))
            opt.step(arrays, grads)
            tot["l_normal"] += float(l_normal.data)
            tot["l_t"] += l_t_val
            tot["cov_term"] += cov_val
            nb += 1
        row = {"epoch": epoch, **{k: v / max(nb, 1) for k, v in tot.items()}}
        for k in ("l_normal", "l_t", "cov_term"):
            _check_finite(row[k], epoch, k)
        row["accuracy"] = accuracy(params, world.upstream_test, K)
        history.append(row)
        log.debug("upstream epoch %d: %s", epoch, row)
    released = release(params, K)
    return ManipulatedModel(released, masks, cfg, history, seed,
                            cfg.variant if manipulated else NONE)


# -- lambda search ------------------------------------------------------------
@dataclass
class LambdaSearchResult:
    lam: float
    failed: bool
    history: list[tuple[float, list[float]]]
    model: object = None


def search_lambda(train_fn: Callable[[float], object], detector_suite: Callable[[object], Sequence[float]],
                  start: float = 1.0, step: float = 0.5, detect_threshold: float = 0.2,
                  max_lambda: float = 3.0) -> LambdaSearchResult:
    """Linear search over lambda = start, start+step, ... up to ``max_lambda``.

    ``train_fn(lam)`` builds a model; ``detector_suite(model)`` returns one
    detection percentage per detector. The search stops at the first lambda
    some detector reaches ``detect_threshold`` and returns the last passing
    one; if ``start`` already fails, ``start`` is returned flagged.
    """
    if start < 1:
        raise ValueError("stealthy lambda search starts at >= 1")
    history = []
    best, best_model = None, None
    lam = start
    while lam <= max_lambda + 1e-12:
        model = train_fn(lam)
        rates = [float(r) for r in detector_suite(model)]
        history.append((lam, rates))
        if any(r >= detect_threshold for r in rates):
            break
        best, best_model = lam, model
        lam = round(lam + step, 10)
    if best is None:
        return LambdaSearchResult(start, True, history, None)
    return LambdaSearchResult(best, False, history, best_model)
