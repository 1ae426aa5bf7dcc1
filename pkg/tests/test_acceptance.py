"""Acceptance criteria. Each test prints one PASS/FAIL line.

The default sweep (n=2000, 16+16 victims per cell, every variant, head and
attack) runs once and feeds criteria 4 to 9; criterion 11 reruns it with a
different worker count.
"""
import csv
import time
from collections import defaultdict

import numpy as np
import pytest
from scipy.stats import rankdata

from artifact import attacks, defenses
from artifact import rng as rngmod
from artifact.datagen import DownstreamSetting, sample_downstream
from artifact.downstream import REUSE_UPSTREAM, fine_tune, secreting_block
from artifact.harness import build_world, compute_auc, config_from_dict, run_experiment
from artifact.nn import checkpoint as ckptmod
from artifact.nn.gradcheck import grad_check
from artifact.nn.model import extract
from artifact.upstream import ManipulatedModel

from conftest import ACCEPTANCE_LINES
from test_nn import random_net

FRESH = "one_layer/fresh_random"
REUSE = "2_layer/reuse_upstream"
MULTI_PROPERTY = {
    "bootstrap": 0,
    "world": {"property": {"n_properties": 2}},
    "upstream": {"variants": ["zero_activation"]},
    "downstream": {"n_t": [0, 10, 20, 50], "reps": 16, "heads": [{"hidden": []}]},
    "attacks": ["var"],
    "defenses": {"reps": 0},
}


def verdict(capsys, n, ok, detail):
    line = f"{'PASS' if ok else 'FAIL'} criterion {n}: {detail}"
    ACCEPTANCE_LINES.append(line)
    with capsys.disabled():
        print("\n" + line)
    assert ok, line


def _read(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


@pytest.fixture(scope="session")
def sweep(tmp_path_factory):
    out = tmp_path_factory.mktemp("sweep_jobs1")
    t0 = time.time()
    res = run_experiment(config_from_dict({}), out, jobs=1)
    res.elapsed = time.time() - t0
    auc = defaultdict(dict)
    for r in _read(out / "auc_summary.csv"):
        if r["prop"] in ("", "0"):
            auc[(r["variant"], r["head"], r["method"])][int(r["n_t"])] = float(r["auc"])
    det = defaultdict(dict)
    for r in _read(out / "detection_summary.csv"):
        det[(r["variant"], r["method"], r["metric"])][int(r["n_t"])] = float(r["mean"])
    res.auc, res.det = auc, det
    res.acc = _read(out / "accuracy_summary.csv")
    return res


def _stage_time(records, variant=None):
    return sum(r["wall_time"] for r in records if variant is None or r.get("variant") == variant)


# -- 1 -----------------------------------------------------------------------------
def test_criterion_01_zero_gradient_exactness(sweep, capsys):
    # replay every default n_t=0 victim of the sweep with its own seeds
    cfg = config_from_dict({})
    world = build_world(cfg)
    up = ManipulatedModel.from_checkpoint(ckptmod.load(sweep.out_dir / "upstream" / "zero_activation.ckpt"))
    h = next(i for i, hc in enumerate(cfg.downstream.heads) if hc.init_policy == REUSE_UPSTREAM)
    hc = cfg.downstream.heads[h]
    n = cfg.downstream.n[0]
    t0 = time.time()
    exact, leaky_rows = 0, []
    for rep in range(cfg.downstream.reps):
        dseed = rngmod.derive_seed(cfg.seed, "victim", n, 0, "any", rep)
        train = sample_downstream(world.victim, DownstreamSetting(n, 0, seed=dseed))
        feats = extract(up.params, train.x)
        model = fine_tune(up.params, train, hc.arch, hc.init_policy, cfg.downstream.training,
                          seed=rngmod.derive_seed(dseed, "head", h), features=feats)
        same = np.array_equal(secreting_block(model.head[0], up.mask.array),
                              secreting_block(model.init_snapshot, up.mask.array))
        score = attacks.parameter_difference_test(model, up.mask).value
        exact += same and score == 0.0
        leaky_rows.append(int((feats[:, up.mask.array] > 0).any(axis=1).sum()))
    elapsed = time.time() - t0
    reps = cfg.downstream.reps
    verdict(capsys, 1, exact == reps and elapsed < 10,
            f"{exact}/{reps} n_t=0 victims keep W_t bit-identical (difference score 0); non-property rows "
            f"switching a secreting unit on, per victim: {leaky_rows}; {elapsed:.1f}s (< 10s)")


# -- 2 -----------------------------------------------------------------------------
def test_criterion_02_gradient_correctness(capsys):
    rng = np.random.default_rng(2)
    t0 = time.time()
    errs = []
    for _ in range(100):
        p = random_net(rng)
        x = rng.normal(size=(10, 6))
        errs.append(grad_check(p, x, targets=rng.integers(0, 3, 10)))
    elapsed = time.time() - t0
    verdict(capsys, 2, max(errs) < 1e-4 and elapsed < 30,
            f"max relative error over 100 nets = {max(errs):.2e} (< 1e-4); {elapsed:.1f}s (< 30s)")


# -- 3 -----------------------------------------------------------------------------
def _pairwise(pos, ref):
    return ((pos[:, None] > ref[None]).sum() + 0.5 * (pos[:, None] == ref[None]).sum()) / (len(pos) * len(ref))


def _rank_auc(pos, ref):
    ranks = rankdata(np.r_[pos, ref])  # average ranks handle ties
    return (ranks[:len(pos)].sum() - len(pos) * (len(pos) + 1) / 2) / (len(pos) * len(ref))


def test_criterion_03_auc_oracle(capsys):
    rng = np.random.default_rng(3)
    t0 = time.time()
    worst = 0.0
    for i in range(1000):
        npos, nref = rng.integers(1, 40, size=2)
        if i % 2:
            pos, ref = rng.integers(0, 6, npos).astype(float), rng.integers(0, 6, nref).astype(float)
        else:
            pos, ref = rng.normal(size=npos), rng.normal(size=nref)
        a = compute_auc(pos, ref)
        worst = max(worst, abs(a - _pairwise(pos, ref)), abs(a - _rank_auc(pos, ref)))
    elapsed = time.time() - t0
    verdict(capsys, 3, worst <= 1e-12 and elapsed < 5,
            f"max deviation from both oracles over 1000 instances = {worst:.1e}; {elapsed:.1f}s (< 5s)")


# -- 4 -----------------------------------------------------------------------------
def test_criterion_04_threshold_attacks(sweep, capsys):
    base = [(k, nt, a) for k, row in sweep.auc.items() if k[0] == "baseline" for nt, a in row.items() if nt <= 20]
    lo, hi = min(a for *_, a in base), max(a for *_, a in base)
    za_var, za_diff = sweep.auc[("zero_activation", FRESH, "var")], sweep.auc[("zero_activation", REUSE, "diff")]
    ok_za = all(row[nt] >= (0.95 if nt >= 20 else 0.9) for row in (za_var, za_diff) for nt in row if nt >= 10)
    reuse_var = sweep.auc[("zero_activation", REUSE, "var")]
    verdict(capsys, 4, 0.3 <= lo and hi <= 0.7 and ok_za and sweep.elapsed < 900,
            f"baseline AUC range at n_t<=20 [{lo:.2f}, {hi:.2f}] over {len(base)} cells; zero-activation "
            f"var (fresh head) {min(v for t, v in za_var.items() if t >= 10):.2f} and diff (reuse head) "
            f"{min(v for t, v in za_diff.items() if t >= 10):.2f} min at n_t>=10 "
            f"[var on the reuse head, info only: {' '.join(f'{t}:{v:.2f}' for t, v in sorted(reuse_var.items()))}]; "
            f"sweep {sweep.elapsed / 60:.1f} min (< 15)")


# -- 5 -----------------------------------------------------------------------------
def test_criterion_05_accuracy_preservation(sweep, capsys):
    rows = sweep.acc
    up = {r["variant"]: float(r["upstream_acc"]) for r in rows}
    base_up = float(rows[0]["baseline_upstream_acc"])
    mean = defaultdict(list)
    for r in rows:
        mean[(r["variant"], r["head"])].append(float(r["downstream_acc"]))
    gaps = {}
    for (v, h), vals in mean.items():
        if v != "baseline":
            gaps[(v, h)] = np.mean(mean[("baseline", h)]) - np.mean(vals)
    up_gap = max(base_up - a for a in up.values())
    worst = max(gaps.values())
    verdict(capsys, 5, up_gap <= 0.02 and worst <= 0.02,
            f"upstream accuracy drop {100 * up_gap:.2f} pts; worst mean downstream drop {100 * worst:.2f} pts "
            f"({max(gaps, key=gaps.get)}); limit 2 pts")


# -- 6 -----------------------------------------------------------------------------
def test_criterion_06_blackbox_meta(sweep, capsys):
    heads = [h for (v, h, m) in sweep.auc if v == "zero_activation" and m == "meta-bb"]
    big = min(sweep.auc[("zero_activation", h, "meta-bb")][t] for h in heads for t in (50, 100))
    slack = min(sweep.auc[("zero_activation", h, "meta-bb")][t] - sweep.auc[("zero_activation", h, "meta-bb-notune")][t]
                for h in heads for t in sweep.auc[("zero_activation", h, "meta-bb")])
    elapsed = _stage_time(sweep.records, "zero_activation")
    verdict(capsys, 6, big >= 0.85 and slack >= -0.02 and elapsed < 1200,
            f"min meta-bb AUC at n_t>=50 = {big:.2f} (>= 0.85); min tuned minus untuned = {slack:+.2f} (>= -0.02); "
            f"zero-activation units {elapsed / 60:.1f} min (< 20)")


# -- 7 -----------------------------------------------------------------------------
def _defense_verdict(sweep):
    d = sweep.det
    za_flag = min(d[("zero_activation", "zero", "flagged")][t] for t in (50, 100))
    za_que = min(d[("zero_activation", "que", "detection_percentage")][t] for t in (50, 100))
    st_flag = max(d[("stealthy", "zero", "flagged")][t] for t in (50, 100))
    st_det = {m: max(d[("stealthy", m, "detection_percentage")][t] for t in (50, 100)) for m in ("kmeans", "pca", "que")}
    ok = za_flag == 1.0 and za_que >= 0.6 and st_flag == 0.0 and max(st_det.values()) <= 0.3
    detail = (f"zero-activation flagged={za_flag:.0f} que={za_que:.2f} (>= 0.6); stealthy flagged={st_flag:.0f}, "
              + ", ".join(f"{m}={v:.3f}" for m, v in st_det.items()) + " (each <= 0.3)")
    return ok, detail


def test_criterion_07_defense_asymmetry(sweep, capsys):
    ok, detail = _defense_verdict(sweep)
    elapsed = _stage_time(sweep.records, "zero_activation") + _stage_time(sweep.records, "stealthy")
    verdict(capsys, 7, ok and elapsed < 900, f"{detail}; {elapsed / 60:.1f} min (< 15)")


# -- 8 -----------------------------------------------------------------------------
def test_criterion_08_stealthy_effectiveness(sweep, capsys):
    aucs = {h: sweep.auc[("stealthy", h, "meta-bb")][100] for h in (FRESH, REUSE)}
    evades, _ = _defense_verdict(sweep)
    verdict(capsys, 8, min(aucs.values()) >= 0.8 and evades,
            "stealthy meta-bb AUC at n_t=100: " + ", ".join(f"{h} {a:.2f}" for h, a in aucs.items())
            + f" (>= 0.8); evasion bounds {'met' if evades else 'not met'}")


# -- 9 -----------------------------------------------------------------------------
def test_criterion_09_probe_bounds(sweep, capsys):
    cfg = config_from_dict({})
    world = build_world(cfg)
    up = ManipulatedModel.from_checkpoint(ckptmod.load(sweep.out_dir / "upstream" / "stealthy.ckpt"))
    t0 = time.time()
    rates, f1s = [], []
    for n_t in cfg.downstream.n_t:
        train = sample_downstream(world.victim, DownstreamSetting(2000, n_t, seed=7 + n_t))
        nonprop = train.x[train.y_t == 0]
        rates.append(defenses.average_value_probe(up.params, nonprop, up.mask.size, up.mask.array)["detection_rate"])
        f1s.append(defenses.intersection_probe(up.params, nonprop, up.mask.size, up.mask.array)["f1"])
    elapsed = time.time() - t0
    rates += list(sweep.det[("stealthy", "avgprobe", "detection_rate")].values())
    f1s += list(sweep.det[("stealthy", "interprobe", "f1")].values())
    verdict(capsys, 9, max(rates) <= 0.3 and max(f1s) <= 0.1 and elapsed < 120,
            f"stealthy avgprobe max rate {max(rates):.3f} (<= 0.3), interprobe max F1 {max(f1s):.3f} (<= 0.1); "
            f"{elapsed:.1f}s (< 2 min)")


# -- 10 ----------------------------------------------------------------------------
def test_criterion_10_multi_property(tmp_path, capsys):
    t0 = time.time()
    res = run_experiment(config_from_dict(MULTI_PROPERTY), tmp_path, jobs=1)
    elapsed = time.time() - t0
    rows = [r for r in _read(tmp_path / "auc_summary.csv") if r["method"] == "var" and int(r["n_t"]) >= 10]
    worst = min(float(r["auc"]) for r in rows)
    props = sorted({r["prop"] for r in rows})
    masks = res.records[0]["masks"]
    disjoint = not (np.array(masks[0]["bits"], bool) & np.array(masks[1]["bits"], bool)).any()
    verdict(capsys, 10, worst >= 0.85 and props == ["0", "1"] and disjoint and elapsed < 600,
            f"min per-property var AUC at n_t>=10 = {worst:.2f} (>= 0.85) over properties {props}; "
            f"masks disjoint={disjoint}; {elapsed:.1f}s (< 10 min)")


# -- 11 ----------------------------------------------------------------------------
def test_criterion_11_reproducibility(sweep, tmp_path, capsys):
    run_experiment(config_from_dict({}), tmp_path, jobs=2)
    a = (sweep.out_dir / "auc_summary.csv").read_bytes()
    b = (tmp_path / "auc_summary.csv").read_bytes()
    verdict(capsys, 11, a == b, f"auc_summary.csv with --jobs 1 vs --jobs 2: "
            f"{'byte-identical' if a == b else 'differs'} ({len(a)} bytes)")
