"""Synthetic attribute world: Gaussian identities standing in for face datasets.

Each "identity" is a Gaussian component in R^d. Upstream classes own
``clusters_per_class`` identities each. Downstream pools and distribution
augmentation draw from a separate population of identities that never appears
in upstream training, and the target property is one designated identity (an
individual) or a union of identities (a group). The downstream label is a fixed
linear rule over x.
"""
from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from . import rng as rngmod

EXCLUDED = -1  # no upstream label: skipped by the task loss
FAKE = -2  # extra (K+1-th) upstream class used by fake-label injection
NO_PROPERTY = -1


@dataclass(frozen=True)
class LabeledSample:
    id: int
    x: np.ndarray
    y_up: int
    y_down: int
    y_t: int


@dataclass
class SampleSet:
    """Columnar sample storage; ``prop_id`` says which property (or -1) a row has."""

    ids: np.ndarray
    x: np.ndarray
    y_up: np.ndarray
    y_down: np.ndarray
    prop_id: np.ndarray

    def __post_init__(self):
        self.ids = np.asarray(self.ids, dtype=np.int64)
        x = np.asarray(self.x, dtype=np.float64)
        self.x = x if (x.ndim == 2 and len(x) == len(self.ids)) else x.reshape(len(self.ids), -1)
        self.y_up = np.asarray(self.y_up, dtype=np.int64)
        self.y_down = np.asarray(self.y_down, dtype=np.int64)
        self.prop_id = np.asarray(self.prop_id, dtype=np.int64)
        n = len(self.ids)
        if not (len(self.y_up) == len(self.y_down) == len(self.prop_id) == n):
            raise ValueError("column lengths differ")

    @property
    def y_t(self) -> np.ndarray:
        return (self.prop_id >= 0).astype(np.int64)

    def flags(self, prop: int | None = None) -> np.ndarray:
        """Binary property flags, for one property index or for any property."""
        if prop is None:
            return self.y_t
        return (self.prop_id == prop).astype(np.int64)

    def __len__(self) -> int:
        return len(self.ids)

    def __getitem__(self, i: int) -> LabeledSample:
        return LabeledSample(int(self.ids[i]), self.x[i].copy(), int(self.y_up[i]),
                             int(self.y_down[i]), int(self.prop_id[i] >= 0))

    def __iter__(self) -> Iterator[LabeledSample]:
        for i in range(len(self)):
            yield self[i]

    @property
    def dim(self) -> int:
        return self.x.shape[1]

    def subset(self, idx) -> "SampleSet":
        idx = np.asarray(idx)
        if idx.dtype != bool:
            idx = idx.astype(np.int64)
        return SampleSet(self.ids[idx], self.x[idx], self.y_up[idx], self.y_down[idx], self.prop_id[idx])

    def with_y_up(self, y_up) -> "SampleSet":
        return SampleSet(self.ids, self.x, np.broadcast_to(y_up, self.ids.shape).copy(), self.y_down, self.prop_id)

    @staticmethod
    def concat(sets: list["SampleSet"]) -> "SampleSet":
        sets = [s for s in sets if len(s)]
        if not sets:
            return SampleSet.empty(0)
        return SampleSet(np.concatenate([s.ids for s in sets]), np.concatenate([s.x for s in sets]),
                         np.concatenate([s.y_up for s in sets]), np.concatenate([s.y_down for s in sets]),
                         np.concatenate([s.prop_id for s in sets]))

    @staticmethod
    def empty(d: int) -> "SampleSet":
        return SampleSet(np.zeros(0, np.int64), np.zeros((0, d)), np.zeros(0, np.int64),
                         np.zeros(0, np.int64), np.zeros(0, np.int64))


@dataclass
class Pools:
    prop: SampleSet
    nonprop: SampleSet


@dataclass
class PropertySpec:
    kind: str = "individual"  # or "group"
    n_properties: int = 1  # > 1 gives several disjoint individuals (multi-property)
    group_size: int = 4  # identities per group when kind == "group"
    component_size: int = 1200  # samples available per property
    spread: float = 1.0  # identity std, relative to WorldSizes.identity_std
    offset: float = 1.0  # scale of the property centre relative to other identity centres

    def __post_init__(self):
        if self.kind not in ("individual", "group"):
            raise ValueError(f"unknown property kind {self.kind!r}")
        if self.kind == "group" and self.n_properties != 1:
            raise ValueError("group properties support a single property")


@dataclass
class WorldSizes:
    upstream_train: int = 8000
    upstream_test: int = 2000
    victim_property: int = 250
    victim_nonproperty: int = 20000
    attacker_property: int = 250
    attacker_nonproperty: int = 20000
    probe: int = 64
    inject_property: int = 342
    inject_nonproperty: int = 1710
    other_identities: int = 400
    center_scale: float = 1.0
    identity_std: float = 0.8
    attribute_strength: float = 2.5  # identity-level binary attribute along the downstream rule


@dataclass
class World:
    d: int
    K: int
    upstream_train: SampleSet
    upstream_test: SampleSet
    victim: Pools
    attacker: Pools
    probe_set: SampleSet
    inject_property: SampleSet
    inject_nonproperty: SampleSet
    label_rule: np.ndarray  # (d + 1,) weights then offset
    seed: int
    n_properties: int = 1
    manifest: dict = field(default_factory=dict)

    def all_sets(self) -> dict[str, SampleSet]:
        return {
            "upstream_train": self.upstream_train, "upstream_test": self.upstream_test,
            "victim_property": self.victim.prop, "victim_nonproperty": self.victim.nonprop,
            "attacker_property": self.attacker.prop, "attacker_nonproperty": self.attacker.nonprop,
            "probe": self.probe_set, "inject_property": self.inject_property,
            "inject_nonproperty": self.inject_nonproperty,
        }


def _draw(rng, centers, comp, std) -> np.ndarray:
    return centers[comp] + std * rng.standard_normal((len(comp), centers.shape[1]))


def generate_world(d: int = 32, K: int = 20, clusters_per_class: int = 4,
                   property_spec: PropertySpec | None = None, sizes: WorldSizes | None = None,
                   seed: int = 0) -> World:
    prop = property_spec or PropertySpec()
    sizes = sizes or WorldSizes()
    per_property_demand = (sizes.victim_property + sizes.attacker_property + sizes.probe
                           + sizes.inject_property)
    if per_property_demand > prop.component_size:
        raise ValueError(f"property pools need {per_property_demand} samples per property but the "
                         f"component has only {prop.component_size}")
    if min(asdict(sizes).values()) < 0:
        raise ValueError("sizes must be non-negative")
    if sizes.other_identities < 1 and (sizes.victim_nonproperty or sizes.attacker_nonproperty):
        raise ValueError("non-property pools need at least one identity")
    rng = rngmod.generator(seed, "world")
    scale = sizes.center_scale
    n_up_comp = K * clusters_per_class
    up_centers = rng.normal(0, scale, size=(n_up_comp, d))
    other_centers = rng.normal(0, scale, size=(sizes.other_identities, d))
    n_prop_comp = prop.group_size if prop.kind == "group" else prop.n_properties
    prop_centers = rng.normal(0, scale * prop.offset, size=(n_prop_comp, d))
    rule = rng.normal(size=d)
    rule /= np.linalg.norm(rule)
    label_rule = np.append(rule, 0.0)
    # every identity carries a +-1 attribute along the rule direction, so the
    # downstream label is (almost) constant within an identity
    for centers in (up_centers, other_centers, prop_centers):
        centers -= np.outer(centers @ rule, rule)
        centers += np.outer(rng.choice([-1.0, 1.0], size=len(centers)) * sizes.attribute_strength, rule)
    std = sizes.identity_std

    next_id = [0]

    def make(x, y_up, prop_id) -> SampleSet:
        n = len(x)
        ids = np.arange(next_id[0], next_id[0] + n)
        next_id[0] += n
        y_down = (x @ label_rule[:-1] + label_rule[-1] > 0).astype(np.int64)
        return SampleSet(ids, x, np.broadcast_to(y_up, (n,)).copy(), y_down,
                         np.broadcast_to(prop_id, (n,)).copy())

    def upstream(n):
        cls = rng.integers(0, K, size=n)
        comp = cls * clusters_per_class + rng.integers(0, clusters_per_class, size=n)
        return make(_draw(rng, up_centers, comp, std), cls, NO_PROPERTY)

    def others(n):
        comp = rng.integers(0, sizes.other_identities, size=n)
        return make(_draw(rng, other_centers, comp, std), EXCLUDED, NO_PROPERTY)

    prop_std = std * prop.spread

    def property_samples(n, p):
        if prop.kind == "group":
            comp = rng.integers(0, n_prop_comp, size=n)
        else:
            comp = np.full(n, p)
        return make(_draw(rng, prop_centers, comp, prop_std), EXCLUDED, p)

    def property_pool(n):
        return SampleSet.concat([property_samples(n, p) for p in range(prop.n_properties)]) if n else SampleSet.empty(d)

    up_train = upstream(sizes.upstream_train)
    up_test = upstream(sizes.upstream_test)
    victim = Pools(property_pool(sizes.victim_property), others(sizes.victim_nonproperty))
    attacker = Pools(property_pool(sizes.attacker_property), others(sizes.attacker_nonproperty))
    probe = property_pool(sizes.probe)
    inj_p = property_pool(sizes.inject_property)
    inj_n = others(sizes.inject_nonproperty)
    world = World(d, K, up_train, up_test, victim, attacker, probe, inj_p, inj_n, label_rule, seed,
                  prop.n_properties)
    world.manifest = {
        "seed": seed, "d": d, "K": K, "clusters_per_class": clusters_per_class,
        "property_spec": asdict(prop), "sizes": asdict(sizes),
        "counts": {k: len(v) for k, v in world.all_sets().items()},
    }
    return world


@dataclass(frozen=True)
class DownstreamSetting:
    n: int
    n_t: int
    seed: int = 0
    prop: int | None = None  # which property the n_t samples carry (None: any)

    def __post_init__(self):
        if not (0 <= self.n_t <= self.n):
            raise ValueError(f"need 0 <= n_t <= n, got n={self.n}, n_t={self.n_t}")


def sample_downstream(pools: Pools, setting: DownstreamSetting,
                      rng: np.random.Generator | None = None) -> SampleSet:
    """Exactly ``n`` samples without replacement, exactly ``n_t`` of them with the property."""
    rng = rng or rngmod.generator(setting.seed, "downstream")
    prop_pool = pools.prop
    if setting.prop is not None:
        prop_pool = prop_pool.subset(np.flatnonzero(prop_pool.prop_id == setting.prop))
    if setting.n_t > len(prop_pool):
        raise ValueError(f"n_t={setting.n_t} exceeds property pool of {len(prop_pool)}")
    n_non = setting.n - setting.n_t
    if n_non > len(pools.nonprop):
        raise ValueError(f"need {n_non} non-property samples, pool has {len(pools.nonprop)}")
    p_idx = rng.choice(len(prop_pool), size=setting.n_t, replace=False)
    n_idx = rng.choice(len(pools.nonprop), size=n_non, replace=False)
    out = SampleSet.concat([prop_pool.subset(np.sort(p_idx)), pools.nonprop.subset(np.sort(n_idx))])
    if len(out) == 0:
        return SampleSet.empty(pools.nonprop.dim)
    return out.subset(rng.permutation(len(out)))


def mixup_augment(property_pool: SampleSet, count: int, theta_range=(0.2, 0.8), seed: int = 0,
                  label_rule: np.ndarray | None = None, id_start: int = 1 << 40) -> SampleSet:
    """Convex combinations theta*x_i + (1-theta)*x_j of distinct property samples.

    Outputs keep the property flag and the parents' (shared) property id, get
    the EXCLUDED upstream label (the injection policy relabels them) and, when
    ``label_rule`` is given, a downstream label from that rule.
    """
    if len(property_pool) < 2:
        raise ValueError("mixup needs at least two property samples")
    d = property_pool.dim
    if count == 0:
        return SampleSet.empty(d)
    lo, hi = theta_range
    if not (0.0 < lo <= hi < 1.0):
        raise ValueError("theta range must lie inside (0, 1)")
    rng = rngmod.generator(seed, "mixup")
    i = rng.integers(0, len(property_pool), size=count)
    j = (i + rng.integers(1, len(property_pool), size=count)) % len(property_pool)
    theta = rng.uniform(lo, hi, size=count)
    x = theta[:, None] * property_pool.x[i] + (1.0 - theta[:, None]) * property_pool.x[j]
    if label_rule is not None:
        y_down = (x @ label_rule[:-1] + label_rule[-1] > 0).astype(np.int64)
    else:
        y_down = property_pool.y_down[i]
    prop_id = np.maximum(property_pool.prop_id[i], 0)
    return SampleSet(np.arange(id_start, id_start + count), x, np.full(count, EXCLUDED), y_down, prop_id)


def mix_pair(x_i, x_j, theta: float) -> np.ndarray:
    return theta * np.asarray(x_i, dtype=np.float64) + (1.0 - theta) * np.asarray(x_j, dtype=np.float64)


LABEL_POLICIES = ("drop_from_task_loss", "fake_label")


def inject_upstream(upstream_set: SampleSet, property_samples: SampleSet,
                    nonproperty_samples: SampleSet, label_policy: str) -> SampleSet:
    """Append attacker samples to the upstream set under an explicit label policy.

    ``drop_from_task_loss`` marks them EXCLUDED (no task loss, secrecy loss
    only); ``fake_label`` gives them the FAKE class, trained as class K and cut
    from the released head.
    """
    if label_policy not in LABEL_POLICIES:
        raise ValueError(f"label_policy must be one of {LABEL_POLICIES}")
    tag = EXCLUDED if label_policy == "drop_from_task_loss" else FAKE
    injected = [s.with_y_up(tag) for s in (property_samples, nonproperty_samples) if len(s)]
    return SampleSet.concat([upstream_set, *injected])


def default_injection_counts(n_property: int, ratio: int = 5) -> tuple[int, int]:
    """Non-property (distribution augmentation) injections default to 5x the property ones."""
    return n_property, ratio * n_property


# -- serialization -----------------------------------------------------------
def write_samples(samples: SampleSet, path) -> None:
    """CSV: header ``id,y_up,y_down,y_t,prop_id,x0..x{d-1}``; floats in repr form."""
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "y_up", "y_down", "y_t", "prop_id"] + [f"x{i}" for i in range(samples.dim)])
        for i in range(len(samples)):
            w.writerow([int(samples.ids[i]), int(samples.y_up[i]), int(samples.y_down[i]),
                        int(samples.prop_id[i] >= 0), int(samples.prop_id[i])]
                       + [repr(float(v)) for v in samples.x[i]])


def read_samples(path) -> SampleSet:
    with Path(path).open(newline="") as fh:
        r = csv.reader(fh)
        header = next(r)
        if header[:5] != ["id", "y_up", "y_down", "y_t", "prop_id"]:
            raise ValueError(f"{path}: unexpected header {header[:5]}")
        d = len(header) - 5
        rows = list(r)
    if not rows:
        return SampleSet.empty(d)
    ints = np.array([[int(v) for v in row[:5]] for row in rows], dtype=np.int64)
    x = np.array([[float(v) for v in row[5:]] for row in rows], dtype=np.float64)
    return SampleSet(ints[:, 0], x, ints[:, 1], ints[:, 2], ints[:, 4])


def save_world(world: World, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for name, s in world.all_sets().items():
        write_samples(s, out / f"{name}.csv")
    manifest = dict(world.manifest)
    manifest["label_rule"] = [repr(float(v)) for v in world.label_rule]
    manifest["n_properties"] = world.n_properties
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return out


def load_world(out_dir) -> World:
    out = Path(out_dir)
    manifest = json.loads((out / "manifest.json").read_text())
    s = {name: read_samples(out / f"{name}.csv") for name in manifest["counts"]}
    return World(manifest["d"], manifest["K"], s["upstream_train"], s["upstream_test"],
                 Pools(s["victim_property"], s["victim_nonproperty"]),
                 Pools(s["attacker_property"], s["attacker_nonproperty"]),
                 s["probe"], s["inject_property"], s["inject_nonproperty"],
                 np.array([float(v) for v in manifest["label_rule"]]), manifest["seed"],
                 manifest.get("n_properties", 1), manifest)
