"""Experiment grid: upstream variants x downstream settings x attacks x defenses.

Records are appended to ``records.jsonl`` in the output directory, one line
per finished unit of work (an upstream model, a meta-classifier bundle or a
downstream cell). Every seed is derived from the master seed plus the unit's
identity, so results do not depend on the worker count or completion order.
"""
from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import logging
import math
import os
import pickle
import time
import traceback
import typing
from concurrent.futures import ProcessPoolExecutor, as_completed
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import yaml
from threadpoolctl import threadpool_limits

from . import attacks, defenses
from . import rng as rngmod
from .datagen import DownstreamSetting, PropertySpec, World, WorldSizes, generate_world, sample_downstream
from .downstream import (
    FRESH_RANDOM,
    REUSE_UPSTREAM,
    DownstreamTraining,
    HeadArch,
    NotApplicableError,
    downstream_accuracy,
    fine_tune,
    serve_api,
)
from .nn import checkpoint as ckptmod
from .nn.model import extract
from .upstream import (
    STEALTHY,
    ZERO_ACTIVATION,
    AttackLossConfig,
    ManipulatedModel,
    UpstreamArch,
    UpstreamTraining,
    accuracy,
    make_mask,
    multi_property_setup,
    search_lambda,
    train_upstream,
)

log = logging.getLogger(__name__)

BASELINE = "baseline"
VARIANTS = (BASELINE, ZERO_ACTIVATION, STEALTHY)
OUTLIERS = ("kmeans", "pca", "que")
DEFENSES = ("zero", *OUTLIERS, "avgprobe", "interprobe")


class ConfigError(ValueError):
    pass


# -- configuration -----------------------------------------------------------
@dataclass
class WorldConfig:
    d: int = 32
    K: int = 20
    clusters_per_class: int = 4
    property: PropertySpec = field(default_factory=PropertySpec)
    sizes: WorldSizes = field(default_factory=WorldSizes)


@dataclass
class VariantConfig:
    loss: AttackLossConfig = field(default_factory=AttackLossConfig)
    mask_size: int = 8
    mask_mode: str = "prefix"


@dataclass
class LambdaSearchConfig:
    enabled: bool = True
    start: float = 1.0
    step: float = 0.5
    max_lambda: float = 3.0
    threshold: float = 0.2
    n: int = 2000
    n_t: list = field(default_factory=lambda: [50, 100])


def _stealthy_default() -> VariantConfig:
    # gamma below the generic default of 1: on the synthetic world a strong
    # covariance term spreads the property cluster and makes it *easier* to detect
    return VariantConfig(AttackLossConfig(lam=1.0, gamma=0.1, variant=STEALTHY), 8, "random")


@dataclass
class UpstreamConfig:
    variants: list = field(default_factory=lambda: list(VARIANTS))
    arch: UpstreamArch = field(default_factory=UpstreamArch)
    training: UpstreamTraining = field(default_factory=UpstreamTraining)
    zero_activation: VariantConfig = field(default_factory=VariantConfig)
    stealthy: VariantConfig = field(default_factory=_stealthy_default)
    lambda_search: LambdaSearchConfig = field(default_factory=LambdaSearchConfig)


@dataclass
class HeadConfig:
    hidden: list = field(default_factory=list)
    init_policy: str = FRESH_RANDOM

    @property
    def arch(self) -> HeadArch:
        return HeadArch(hidden=tuple(self.hidden))

    @property
    def name(self) -> str:
        return f"{self.arch.name}/{self.init_policy}"


@dataclass
class DownstreamConfig:
    n: list = field(default_factory=lambda: [2000])
    n_t: list = field(default_factory=lambda: [0, 2, 5, 10, 20, 50, 100])
    reps: int = 16
    heads: list = field(default_factory=lambda: [HeadConfig(), HeadConfig([32], REUSE_UPSTREAM)])
    training: DownstreamTraining = field(default_factory=DownstreamTraining)


@dataclass
class MetaConfig:
    seeds: int = 5
    count_per_class: int = 50
    shadow_n: int | None = None  # None: the victim's n (first grid value)
    nt_range: list = field(default_factory=lambda: [1, 170])
    k_queries: int = 8
    compare_no_tuning: bool = True
    training: attacks.MetaTraining = field(default_factory=attacks.MetaTraining)


@dataclass
class DefenseConfig:
    methods: list = field(default_factory=lambda: list(DEFENSES))
    reps: int = 2  # defended repetitions per cell
    alpha_que: float = 4.0
    epsilon: float = 1e-6
    tau: float | None = None  # None: shipped calibration


@dataclass
class ExperimentConfig:
    seed: int = 0
    jobs: int | None = None
    world: WorldConfig = field(default_factory=WorldConfig)
    upstream: UpstreamConfig = field(default_factory=UpstreamConfig)
    downstream: DownstreamConfig = field(default_factory=DownstreamConfig)
    attacks: list = field(default_factory=lambda: list(attacks.METHODS))
    meta: MetaConfig = field(default_factory=MetaConfig)
    defenses: DefenseConfig = field(default_factory=DefenseConfig)
    bootstrap: int = 1000

    def validate(self) -> "ExperimentConfig":
        ds = self.downstream
        if 0 not in ds.n_t:
            raise ConfigError("downstream.n_t must include 0 (the reference group)")
        if ds.reps < 2:
            raise ConfigError("downstream.reps must be >= 2")
        if any(t < 0 for t in ds.n_t) or any(n < 1 for n in ds.n) or any(t > min(ds.n) for t in ds.n_t):
            raise ConfigError("need 0 <= n_t <= n")
        for v in self.upstream.variants:
            if v not in VARIANTS:
                raise ConfigError(f"unknown upstream variant {v!r}")
        for a in self.attacks:
            if a not in attacks.METHODS:
                raise ConfigError(f"unknown attack {a!r}")
        for d in self.defenses.methods:
            if d not in DEFENSES:
                raise ConfigError(f"unknown defense {d!r}")
        for h in ds.heads:
            if h.init_policy not in (FRESH_RANDOM, REUSE_UPSTREAM):
                raise ConfigError(f"unknown init_policy {h.init_policy!r}")
            if h.init_policy == REUSE_UPSTREAM and list(h.hidden) != list(self.upstream.arch.head_hidden):
                raise ConfigError("reuse_upstream heads must copy the upstream head's hidden layout")
        if self.meta.seeds < 1:
            raise ConfigError("meta.seeds must be >= 1")
        if self.upstream.stealthy.loss.variant != STEALTHY or self.upstream.zero_activation.loss.variant != ZERO_ACTIVATION:
            raise ConfigError("variant sections must carry the matching loss variant")
        return self

    def to_dict(self) -> dict:
        return _jsonable(asdict(self))

    def hash(self) -> str:
        d = self.to_dict()
        d.pop("jobs", None)
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    return obj


def _build(cls, data, path: str):
    """Dataclass from nested dicts; unknown keys are errors."""
    if data is None:
        return cls()
    if not isinstance(data, dict):
        raise ConfigError(f"{path or 'config'}: expected a mapping, got {type(data).__name__}")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"unknown key(s) {unknown} in {path or 'config'}")
    kwargs = {}
    for key, value in data.items():
        hint = hints[key]
        sub = f"{path}.{key}" if path else key
        if dataclasses.is_dataclass(hint):
            kwargs[key] = _build(hint, value, sub)
        elif key == "heads":
            kwargs[key] = [_build(HeadConfig, h, f"{sub}[{i}]") for i, h in enumerate(value)]
        elif typing.get_origin(hint) is tuple and isinstance(value, list):
            kwargs[key] = tuple(value)
        else:
            kwargs[key] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{path or 'config'}: {exc}") from exc


def config_from_dict(data: dict | None) -> ExperimentConfig:
    return _build(ExperimentConfig, data or {}, "").validate()


def load_config(path) -> ExperimentConfig:
    try:
        data = yaml.safe_load(Path(path).read_text())
    except (OSError, yaml.YAMLError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return config_from_dict(data)


# -- AUC -------------------------------------------------------------------------
def compute_auc(pos_scores, ref_scores) -> float:
    """P(pos > ref) + 0.5 P(pos = ref) over all pairs."""
    pos = np.asarray(pos_scores, dtype=np.float64).ravel()
    ref = np.asarray(ref_scores, dtype=np.float64).ravel()
    if pos.size == 0 or ref.size == 0:
        raise ValueError("compute_auc needs non-empty score lists")
    ref_sorted = np.sort(ref)
    below = np.searchsorted(ref_sorted, pos, side="left")
    upto = np.searchsorted(ref_sorted, pos, side="right")
    return float((below.sum() + 0.5 * (upto - below).sum()) / (pos.size * ref.size))


def bootstrap_ci(pos: np.ndarray, ref: np.ndarray, n_boot: int, rng, level: float = 0.95):
    """Percentile interval of the AUC under resampling of models.

    ``pos`` and ``ref`` are (models, seeds); the statistic is the mean AUC over seeds.
    """
    if n_boot <= 0:
        return float("nan"), float("nan")
    stats = np.empty(n_boot)
    for b in range(n_boot):
        p = pos[rng.integers(0, len(pos), len(pos))]
        r = ref[rng.integers(0, len(ref), len(ref))]
        stats[b] = np.mean([compute_auc(p[:, s], r[:, s]) for s in range(pos.shape[1])])
    lo, hi = np.quantile(stats, [(1 - level) / 2, (1 + level) / 2])
    return float(lo), float(hi)


# -- record store -----------------------------------------------------------------
class RecordStore:
    """Append-only JSON Lines file; the last "ok" record for a key wins."""

    def __init__(self, path):
        self.path = Path(path)
        self.records: dict[str, dict] = {}
        if self.path.exists():
            for line in self.path.read_text().splitlines():
                if not line.strip():
                    continue
                try:
                    rec = json.loads(line)
                except json.JSONDecodeError:
                    log.warning("skipping truncated record line in %s", self.path)
                    continue
                if rec.get("status") == "ok" or rec["key"] not in self.records:
                    self.records[rec["key"]] = rec

    def done(self, key: str) -> bool:
        return self.records.get(key, {}).get("status") == "ok"

    def append(self, rec: dict) -> None:
        self.path.parent.mkdir(parents=True, exist_ok=True)
        torn = False
        if self.path.exists() and self.path.stat().st_size:
            with self.path.open("rb") as fh:
                fh.seek(-1, 2)
                torn = fh.read(1) != b"\n"  # an interrupted write left a partial line
        with self.path.open("a") as fh:
            fh.write(("\n" if torn else "") + json.dumps(rec, sort_keys=True) + "\n")
            fh.flush()
        if rec.get("status") == "ok" or not self.done(rec["key"]):
            self.records[rec["key"]] = rec

    def ok(self, stage: str | None = None) -> list[dict]:
        return [r for r in self.records.values()
                if r.get("status") == "ok" and (stage is None or r.get("stage") == stage)]


def _key(chash: str, *parts) -> str:
    return "|".join([chash, *map(str, parts)])


# -- per-process context --------------------------------------------------------------
_CTX: dict = {}


def _context(cfg_dict: dict, out_dir: str) -> dict:
    key = (json.dumps(cfg_dict, sort_keys=True), out_dir)
    if _CTX.get("key") != key:
        cfg = config_from_dict(cfg_dict)
        _CTX.clear()
        _CTX.update(key=key, cfg=cfg, world=build_world(cfg), out=Path(out_dir), models={}, metas={})
    return _CTX


def build_world(cfg: ExperimentConfig) -> World:
    w = cfg.world
    return generate_world(w.d, w.K, w.clusters_per_class, w.property, w.sizes, seed=cfg.seed)


def variant_masks(cfg: ExperimentConfig, variant: str, n_properties: int):
    """Masks for a variant; the baseline is read through the zero-activation masks."""
    vc = cfg.upstream.stealthy if variant == STEALTHY else cfg.upstream.zero_activation
    A = cfg.upstream.arch.A
    seed = rngmod.derive_seed(cfg.seed, "mask", variant if variant == STEALTHY else ZERO_ACTIVATION)
    if n_properties == 1:
        return [make_mask(A, vc.mask_size, vc.mask_mode, seed=seed)]
    return multi_property_setup(A, [vc.mask_size] * n_properties, vc.mask_mode, seed=seed)


def _upstream_path(out: Path, variant: str) -> Path:
    return out / "upstream" / f"{variant}.ckpt"


def _load_upstream(ctx, variant: str) -> ManipulatedModel:
    if variant not in ctx["models"]:
        ctx["models"][variant] = ManipulatedModel.from_checkpoint(ckptmod.load(_upstream_path(ctx["out"], variant)))
    return ctx["models"][variant]


def _load_metas(ctx, variant: str, head_idx: int, prop: int):
    k = (variant, head_idx, prop)
    if k not in ctx["metas"]:
        path = ctx["out"] / "meta" / f"{variant}_h{head_idx}_p{prop}.pkl"
        ctx["metas"][k] = pickle.loads(path.read_bytes()) if path.exists() else {}
    return ctx["metas"][k]


# -- detection suites ---------------------------------------------------------
def detection_rates(params, samples, n_t: int, methods=OUTLIERS, alpha_que: float = 4.0, seed: int = 0) -> dict:
    acts = extract(params, samples.x)
    return {m: defenses.detect(acts, samples.y_t, n_t, m, samples.ids, alpha_que, seed).detection_percentage
            for m in methods}


def _search_suite(cfg: ExperimentConfig, world: World):
    """Detectors the malicious trainer runs on its own (attacker-side) data."""
    ls = cfg.upstream.lambda_search
    sets = [sample_downstream(world.attacker, DownstreamSetting(ls.n, t, seed=rngmod.derive_seed(cfg.seed, "search", t)))
            for t in ls.n_t]
    tau = cfg.defenses.tau

    def suite(model: ManipulatedModel):
        rates = []
        for t, s in zip(ls.n_t, sets):
            rates.extend(detection_rates(model.params, s, t, alpha_que=cfg.defenses.alpha_que).values())
        zc = defenses.zero_activation_check(model.params, sets[0].x, cfg.defenses.epsilon, tau)
        rates.append(1.0 if zc.flagged else 0.0)
        return rates

    return suite


# -- work units -----------------------------------------------------------------
def train_variant(cfg: ExperimentConfig, world: World, variant: str):
    """Train one upstream variant; returns (model, clean model, extra record fields)."""
    up = cfg.upstream
    seed = rngmod.derive_seed(cfg.seed, "upstream")
    base = train_upstream(world, up.arch, None, None, up.training, seed=seed)
    masks = variant_masks(cfg, variant, world.n_properties)
    extra = {}
    if variant == BASELINE:
        base.masks = masks
        return base, base, extra
    vc = up.stealthy if variant == STEALTHY else up.zero_activation

    def train_fn(lam):
        loss = dataclasses.replace(vc.loss, lam=lam)
        return train_upstream(world, up.arch, loss, masks, up.training, seed=seed, warm_start=base.params)

    if variant == STEALTHY and up.lambda_search.enabled:
        ls = up.lambda_search
        res = search_lambda(train_fn, _search_suite(cfg, world), ls.start, ls.step, ls.threshold, ls.max_lambda)
        model = res.model if res.model is not None else train_fn(res.lam)
        extra["lambda_search"] = {"lam": res.lam, "failed": res.failed,
                                  "history": [[l, r] for l, r in res.history]}
    else:
        model = train_fn(vc.loss.lam)
    return model, base, extra


def save_upstream(model: ManipulatedModel, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    ckptmod.save(model.checkpoint(), path)
    _write_log_csv(model.log, path.with_suffix(".log.csv"))
    return path


def _unit_upstream(ctx, variant: str) -> dict:
    cfg, world = ctx["cfg"], ctx["world"]
    t0 = time.time()
    model, base, extra = train_variant(cfg, world, variant)
    save_upstream(model, _upstream_path(ctx["out"], variant))
    return {"variant": variant, "upstream_accuracy": accuracy(model.params, world.upstream_test, world.K),
            "baseline_accuracy": accuracy(base.params, world.upstream_test, world.K),
            "masks": [m.to_json() for m in model.masks], "lam": model.cfg.lam if model.cfg else None,
            "wall_time": time.time() - t0, **extra}


def _write_log_csv(rows: list[dict], path: Path) -> None:
    if not rows:
        path.write_text("epoch,l_normal,l_t,cov_term,accuracy\n")
        return
    with path.open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["epoch", "l_normal", "l_t", "cov_term", "accuracy"])
        w.writeheader()
        for r in rows:
            w.writerow({k: r.get(k) for k in w.fieldnames})


def _shadow_n(cfg: ExperimentConfig) -> int:
    return cfg.meta.shadow_n or cfg.downstream.n[0]


def _unit_meta(ctx, variant: str, head_idx: int, prop: int) -> dict:
    cfg, world = ctx["cfg"], ctx["world"]
    model = _load_upstream(ctx, variant)
    hc = cfg.downstream.heads[head_idx]
    mc = cfg.meta
    t0 = time.time()
    pool = attacks.build_shadow_pool(
        model.params, world.attacker, mc.count_per_class, _shadow_n(cfg), tuple(mc.nt_range),
        seed=rngmod.derive_seed(cfg.seed, "shadows", variant, head_idx, prop), head_arch=hc.arch,
        init_policy=hc.init_policy, training=cfg.downstream.training,
        prop=prop if world.n_properties > 1 else None)
    probes = world.probe_set
    if world.n_properties > 1:
        probes = probes.subset(np.flatnonzero(probes.prop_id == prop))
    metas = {}
    summary = {}
    for s in range(mc.seeds):
        mseed = rngmod.derive_seed(cfg.seed, "meta", variant, head_idx, prop, s)
        if "meta-bb" in cfg.attacks:
            m = attacks.train_blackbox_meta(pool, mc.k_queries, True, probes, mc.training, seed=mseed)
            metas.setdefault("meta-bb", []).append(m)
            if mc.compare_no_tuning:
                m0 = attacks.train_blackbox_meta(pool, mc.k_queries, False, probes, mc.training, seed=mseed)
                metas.setdefault("meta-bb-notune", []).append(m0)
        if "meta-wb" in cfg.attacks:
            metas.setdefault("meta-wb", []).append(attacks.train_whitebox_meta(pool, mc.training, seed=mseed))
    for name, ms in metas.items():
        summary[name] = {"val_acc": [m.val_acc for m in ms],
                         "val_auc": [attacks.validation_auc(m, pool) for m in ms]}
    path = ctx["out"] / "meta" / f"{variant}_h{head_idx}_p{prop}.pkl"
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(pickle.dumps(metas))
    return {"variant": variant, "head": hc.name, "prop": prop, "validation": summary,
            "wall_time": time.time() - t0}


def _unit_cell(ctx, variant: str, n: int, n_t: int, prop: int | None, rep: int) -> dict:
    """Victim models for every head in one (variant, n, n_t, prop, rep) cell, scored and defended."""
    cfg, world = ctx["cfg"], ctx["world"]
    up = _load_upstream(ctx, variant)
    t0 = time.time()
    dseed = rngmod.derive_seed(cfg.seed, "victim", n, n_t, "any" if prop is None else prop, rep)
    multi = world.n_properties > 1
    setting = DownstreamSetting(n, n_t, seed=dseed, prop=prop if multi else None)
    train = sample_downstream(world.victim, setting)
    test = world.upstream_test  # disjoint from every downstream pool; same labelling rule
    feats = extract(up.params, train.x)
    test_feats = extract(up.params, test.x)
    props = range(world.n_properties)
    heads = []
    for h, hc in enumerate(cfg.downstream.heads):
        model = fine_tune(up.params, train, hc.arch, hc.init_policy, cfg.downstream.training,
                          seed=rngmod.derive_seed(dseed, "head", h), features=feats, setting=setting)
        scores: dict[str, object] = {}
        api = serve_api(model)
        for p in props:
            mask = up.masks[p]
            if "var" in cfg.attacks:
                scores[f"var/{p}"] = attacks.variance_test(model, mask).value
            if "diff" in cfg.attacks:
                try:
                    scores[f"diff/{p}"] = attacks.parameter_difference_test(model, mask).value
                except NotApplicableError:
                    pass
            if "conf" in cfg.attacks:
                probes = world.probe_set
                if multi:
                    probes = probes.subset(np.flatnonzero(probes.prop_id == p))
                scores[f"conf/{p}"] = attacks.confidence_score_test(api, probes).value
            for name, ms in _load_metas(ctx, variant, h, p).items():
                scores[f"{name}/{p}"] = [attacks.meta_score(m, api if name != "meta-wb" else model).value for m in ms]
        heads.append({"head": hc.name, "accuracy": downstream_accuracy(model, test, test_feats), "scores": scores})
    defended = {}
    dc = cfg.defenses
    if rep < dc.reps:
        for method in dc.methods:
            if method in OUTLIERS:
                if n_t > 0:
                    defended[method] = defenses.detect(feats, train.y_t, n_t, method, train.ids, dc.alpha_que,
                                                       seed=dseed).detection_percentage
            elif method == "zero":
                zc = defenses.zero_activation_check(up.params, train.x, dc.epsilon, dc.tau)
                defended["zero"] = {"flagged": zc.flagged, "max_zero_fraction": float(zc.zero_fractions.max()),
                                    "tau": zc.tau}
            else:
                probe = defenses.average_value_probe if method == "avgprobe" else defenses.intersection_probe
                nonprop = train.subset(np.flatnonzero(train.y_t == 0))
                out = probe(up.params, nonprop.x, up.masks[0].size, up.masks[0].array)
                defended[method] = out["detection_rate"] if method == "avgprobe" else out["f1"]
    return {"variant": variant, "n": n, "n_t": n_t, "prop": prop, "rep": rep, "seed": dseed,
            "heads": heads, "defenses": defended, "wall_time": time.time() - t0}


_UNITS = {"upstream": _unit_upstream, "meta": _unit_meta, "cell": _unit_cell}


def _run_unit(cfg_dict: dict, out_dir: str, key: str, stage: str, args: tuple) -> dict:
    with threadpool_limits(limits=1):
        ctx = _context(cfg_dict, out_dir)
        rec = {"key": key, "stage": stage, "config_hash": ctx["cfg"].hash()}
        try:
            rec.update(_UNITS[stage](ctx, *args))
            rec["status"] = "ok"
        except Exception as exc:  # recorded, the grid goes on
            rec.update(status="error", error=f"{type(exc).__name__}: {exc}", traceback=traceback.format_exc(),
                       args=list(args))
        return rec


def _execute(store: RecordStore, cfg: ExperimentConfig, out_dir: Path, units: list[tuple[str, str, tuple]],
             jobs: int) -> int:
    todo = [u for u in units if not store.done(u[0])]
    failures = 0
    cfg_dict = cfg.to_dict()
    if not todo:
        return 0
    if jobs <= 1 or len(todo) == 1:
        for key, stage, args in todo:
            rec = _run_unit(cfg_dict, str(out_dir), key, stage, args)
            failures += rec["status"] != "ok"
            store.append(rec)
        return failures
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        futs = [pool.submit(_run_unit, cfg_dict, str(out_dir), key, stage, args) for key, stage, args in todo]
        for fut in as_completed(futs):
            rec = fut.result()
            failures += rec["status"] != "ok"
            store.append(rec)
    return failures


@dataclass
class ExperimentResult:
    out_dir: Path
    records: list
    failures: int
    summary: dict


def run_experiment(cfg: ExperimentConfig, out_dir, jobs: int | None = None) -> ExperimentResult:
    """Run (or resume) the whole grid and write the report files."""
    cfg.validate()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True))
    jobs = jobs or cfg.jobs or os.cpu_count() or 1
    store = RecordStore(out / "records.jsonl")
    chash = cfg.hash()
    n_props = cfg.world.property.n_properties
    failures = 0

    ups = [(_key(chash, "upstream", v), "upstream", (v,)) for v in cfg.upstream.variants]
    failures += _execute(store, cfg, out, ups, jobs)
    ok_variants = [v for v in cfg.upstream.variants if store.done(_key(chash, "upstream", v))]

    metas = []
    if any(a.startswith("meta") for a in cfg.attacks):
        for v in ok_variants:
            for h in range(len(cfg.downstream.heads)):
                for p in range(n_props):
                    metas.append((_key(chash, "meta", v, h, p), "meta", (v, h, p)))
    failures += _execute(store, cfg, out, metas, jobs)

    cells = []
    for v in ok_variants:
        for n in cfg.downstream.n:
            for n_t in cfg.downstream.n_t:
                for p in ([None] if n_t == 0 or n_props == 1 else range(n_props)):
                    for rep in range(cfg.downstream.reps):
                        cells.append((_key(chash, "cell", v, n, n_t, p, rep), "cell", (v, n, n_t, p, rep)))
    failures += _execute(store, cfg, out, cells, jobs)
    records = [r for r in store.ok() if r["config_hash"] == chash]
    summary = emit_report(records, out, cfg)
    return ExperimentResult(out, records, failures, summary)


# -- reporting ------------------------------------------------------------------
AUC_COLUMNS = ["variant", "head", "method", "prop", "n", "n_t", "auc", "auc_std", "ci_low", "ci_high",
               "n_pos", "n_ref", "n_seeds"]
DETECTION_COLUMNS = ["variant", "method", "n", "n_t", "metric", "mean", "std", "count"]
ACCURACY_COLUMNS = ["variant", "head", "n", "n_t", "downstream_acc", "downstream_acc_std", "upstream_acc",
                    "baseline_upstream_acc", "count"]
TABLE1_COLUMNS = ["variant", "head", "method", "fraction", "n", "n_t", "auc"]


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return "nan" if math.isnan(v) else f"{v:.6f}"
    return str(v)


def _write_csv(path: Path, columns: list[str], rows: list[dict]) -> None:
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([_fmt(r.get(c)) for c in columns])


def _score_matrix(cells: list[dict], head: str, name: str) -> np.ndarray | None:
    """(models, seeds) array of one score across cells, sorted by rep; None if absent."""
    rows = []
    for c in sorted(cells, key=lambda c: c["rep"]):
        h = next(x for x in c["heads"] if x["head"] == head)
        if name not in h["scores"]:
            return None
        v = h["scores"][name]
        rows.append(v if isinstance(v, list) else [v])
    return np.array(rows, dtype=np.float64) if rows else None


def auc_rows(records: list[dict], master_seed: int = 0, n_boot: int = 1000) -> list[dict]:
    cells = [r for r in records if r.get("stage") == "cell"]
    groups: dict[tuple, list] = {}
    for c in cells:
        groups.setdefault((c["variant"], c["n"], c["n_t"], c["prop"]), []).append(c)
    out = []
    for (variant, n, n_t, prop), pos_cells in sorted(groups.items(), key=lambda kv: (kv[0][0], kv[0][1], kv[0][2], -1 if kv[0][3] is None else kv[0][3])):
        if n_t == 0:
            continue
        ref_cells = groups.get((variant, n, 0, None), [])
        if not ref_cells:
            continue
        p = 0 if prop is None else prop
        heads = [h["head"] for h in pos_cells[0]["heads"]]
        methods = sorted({k.split("/")[0] for h in pos_cells[0]["heads"] for k in h["scores"]})
        for head in heads:
            for method in methods:
                name = f"{method}/{p}"
                pos = _score_matrix(pos_cells, head, name)
                ref = _score_matrix(ref_cells, head, name)
                if pos is None or ref is None:
                    continue
                aucs = np.array([compute_auc(pos[:, s], ref[:, s]) for s in range(pos.shape[1])])
                rng = rngmod.generator(master_seed, "bootstrap", variant, head, method, n, n_t, p)
                lo, hi = bootstrap_ci(pos, ref, n_boot, rng)
                out.append({"variant": variant, "head": head, "method": method, "prop": p, "n": n, "n_t": n_t,
                            "auc": float(aucs.mean()), "auc_std": float(aucs.std()) if len(aucs) > 1 else None,
                            "ci_low": lo, "ci_high": hi, "n_pos": len(pos), "n_ref": len(ref),
                            "n_seeds": len(aucs)})
    return out


def detection_rows(records: list[dict]) -> list[dict]:
    acc: dict[tuple, list] = {}
    for c in records:
        if c.get("stage") != "cell":
            continue
        for method, val in c["defenses"].items():
            if method == "zero":
                items = [("flagged", float(val["flagged"])), ("max_zero_fraction", val["max_zero_fraction"])]
            elif method in OUTLIERS:
                items = [("detection_percentage", val)]
            else:
                items = [("detection_rate" if method == "avgprobe" else "f1", val)]
            for metric, v in items:
                acc.setdefault((c["variant"], method, c["n"], c["n_t"], metric), []).append(v)
    rows = []
    for (variant, method, n, n_t, metric), vals in sorted(acc.items()):
        a = np.array(vals, dtype=np.float64)
        rows.append({"variant": variant, "method": method, "n": n, "n_t": n_t, "metric": metric,
                     "mean": float(a.mean()), "std": float(a.std()), "count": len(a)})
    return rows


def accuracy_rows(records: list[dict]) -> list[dict]:
    ups = {r["variant"]: r for r in records if r.get("stage") == "upstream"}
    acc: dict[tuple, list] = {}
    for c in records:
        if c.get("stage") != "cell":
            continue
        for h in c["heads"]:
            acc.setdefault((c["variant"], h["head"], c["n"], c["n_t"]), []).append(h["accuracy"])
    rows = []
    for (variant, head, n, n_t), vals in sorted(acc.items()):
        a = np.array(vals)
        u = ups.get(variant, {})
        rows.append({"variant": variant, "head": head, "n": n, "n_t": n_t, "downstream_acc": float(a.mean()),
                     "downstream_acc_std": float(a.std()), "upstream_acc": u.get("upstream_accuracy"),
                     "baseline_upstream_acc": u.get("baseline_accuracy"), "count": len(a)})
    return rows


def table1_rows(auc: list[dict], fractions=(0.001, 0.01)) -> list[dict]:
    """AUC at n_t/n equal to the given fractions (0.1% and 1% by default)."""
    rows = []
    for r in auc:
        for f in fractions:
            if r["n_t"] == int(round(f * r["n"])) and r["n_t"] > 0:
                rows.append({"variant": r["variant"], "head": r["head"], "method": r["method"], "fraction": f,
                             "n": r["n"], "n_t": r["n_t"], "auc": r["auc"]})
    return rows


def emit_report(records: list[dict], out_dir, cfg: ExperimentConfig | None = None) -> dict:
    """Write auc_summary.csv, detection_summary.csv, accuracy_summary.csv and table1.csv."""
    if not records:
        raise ValueError("no records to report")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    seed = cfg.seed if cfg else 0
    n_boot = cfg.bootstrap if cfg else 1000
    auc = auc_rows(records, seed, n_boot)
    det = detection_rows(records)
    acc = accuracy_rows(records)
    t1 = table1_rows(auc)
    _write_csv(out / "auc_summary.csv", AUC_COLUMNS, auc)
    _write_csv(out / "detection_summary.csv", DETECTION_COLUMNS, det)
    _write_csv(out / "accuracy_summary.csv", ACCURACY_COLUMNS, acc)
    _write_csv(out / "table1.csv", TABLE1_COLUMNS, t1)
    return {"auc": auc, "detection": det, "accuracy": acc, "table1": t1}


def load_records(out_dir) -> list[dict]:
    return RecordStore(Path(out_dir) / "records.jsonl").ok()
