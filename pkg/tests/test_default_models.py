"""Invariants of the upstream variants trained at the default configuration (about 20 s)."""
import numpy as np
import pytest

from artifact.datagen import DownstreamSetting, sample_downstream
from artifact.defenses import default_tau, zero_fractions
from artifact.downstream import DownstreamTraining, fine_tune, secreting_block
from artifact.harness import build_world, config_from_dict, train_variant
from artifact.nn.model import extract
from artifact.upstream import accuracy


@pytest.fixture(scope="module")
def defaults():
    cfg = config_from_dict({})
    world = build_world(cfg)
    za, base, _ = train_variant(cfg, world, "zero_activation")
    st, _, extra = train_variant(cfg, world, "stealthy")
    return cfg, world, base, za, st, extra


def test_suppression_on_held_out_nonproperty(defaults):
    _, world, base, za, _, _ = defaults
    x = world.victim.nonprop.x[:5000]
    m = za.mask.array
    fa, fb = extract(za.params, x), extract(base.params, x)
    sec = np.linalg.norm(fa[:, m], axis=1).mean()
    rest, rest_base = np.linalg.norm(fa[:, ~m], axis=1).mean(), np.linalg.norm(fb[:, ~m], axis=1).mean()
    assert sec <= 1e-3
    assert abs(rest - rest_base) <= 0.5 * rest_base


def test_exact_zero_rows_leave_wt_unchanged(defaults):
    cfg, world, _, za, _, _ = defaults
    train = sample_downstream(world.victim, DownstreamSetting(2000, 0, seed=11))
    feats = extract(za.params, train.x)
    zero = ~(feats[:, za.mask.array] != 0).any(axis=1)
    assert zero.mean() > 0.99
    hc = cfg.downstream.heads[1]
    model = fine_tune(za.params, train.subset(np.flatnonzero(zero)), hc.arch, hc.init_policy,
                      DownstreamTraining(epochs=1), seed=1)
    assert np.array_equal(secreting_block(model.head[0], za.mask.array),
                          secreting_block(model.init_snapshot, za.mask.array))


def test_accuracy_close_to_baseline(defaults):
    _, world, base, za, st, _ = defaults
    b = accuracy(base.params, world.upstream_test, world.K)
    for model in (za, st):
        assert accuracy(model.params, world.upstream_test, world.K) >= b - 0.02


def test_stealthy_has_no_zero_signature(defaults):
    _, world, _, _, st, _ = defaults
    frac = zero_fractions(extract(st.params, world.victim.nonprop.x[:5000]))
    assert frac.max() <= default_tau()


def test_lambda_search_outcome(defaults):
    cfg, _, _, _, st, extra = defaults
    ls = extra["lambda_search"]
    # the desk analogue of the reference choices is 1, 1.5 or 2; informational beyond the range check
    print(f"lambda search chose {ls['lam']} (failed={ls['failed']})")
    assert cfg.upstream.lambda_search.start <= ls["lam"] <= cfg.upstream.lambda_search.max_lambda
    assert st.cfg.lam == ls["lam"]
