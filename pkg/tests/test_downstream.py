import numpy as np
import pytest

from artifact.datagen import DownstreamSetting, sample_downstream
from artifact.downstream import (FRESH_RANDOM, ONE_LAYER, REUSE_UPSTREAM, TWO_LAYER, BlackBoxAPI,
                                 DownstreamModel, DownstreamTraining, HeadArch, downstream_accuracy, fine_tune,
                                 init_head, predict_proba, secreting_block, serve_api)
from artifact.nn.checkpoint import dumps, loads
from artifact.upstream import UpstreamArch, UpstreamTraining, train_upstream

ARCH = UpstreamArch(d=8, hidden=(16,), A=16, head_hidden=(8,), K=4)


@pytest.fixture(scope="module")
def upstream(small_world):
    return train_upstream(small_world, ARCH, training=UpstreamTraining(clean_epochs=3, batch_size=64), seed=0).params


@pytest.fixture(scope="module")
def train_set(small_world):
    return sample_downstream(small_world.victim, DownstreamSetting(300, 20, seed=4))


def _snapshot_equal(model):
    return (np.array_equal(model.head[0].weight, model.init_snapshot.weight)
            and np.array_equal(model.head[0].bias, model.init_snapshot.bias))


def test_zero_epochs_keeps_initialisation(upstream, train_set):
    m = fine_tune(upstream, train_set, training=DownstreamTraining(epochs=0))
    assert _snapshot_equal(m)
    m2 = fine_tune(upstream, train_set, training=DownstreamTraining(epochs=2))
    assert not _snapshot_equal(m2)
    assert not m2.init_snapshot.weight.flags.writeable


def test_extractor_untouched(upstream, train_set):
    before = {k: v.copy() for k, v in upstream.named_arrays().items() if k.startswith("extractor.")}
    m = fine_tune(upstream, train_set, TWO_LAYER, training=DownstreamTraining(epochs=2))
    for k, v in before.items():
        assert np.array_equal(v, m.params.named_arrays()[k])


def test_fine_tune_deterministic(upstream, train_set):
    a = fine_tune(upstream, train_set, training=DownstreamTraining(epochs=2), seed=9)
    b = fine_tune(upstream, train_set, training=DownstreamTraining(epochs=2), seed=9)
    c = fine_tune(upstream, train_set, training=DownstreamTraining(epochs=2), seed=10)
    assert np.array_equal(a.head[0].weight, b.head[0].weight)
    assert not np.array_equal(a.head[0].weight, c.head[0].weight)


def test_learns_the_task(upstream, small_world, train_set):
    m = fine_tune(upstream, train_set, training=DownstreamTraining(epochs=10))
    assert downstream_accuracy(m, small_world.victim.nonprop) > 0.7


def test_init_policies(upstream, rng):
    with pytest.raises(ValueError):
        init_head(upstream, ONE_LAYER, REUSE_UPSTREAM, rng)
    with pytest.raises(ValueError):
        init_head(upstream, ONE_LAYER, "other", rng)
    reused = init_head(upstream, HeadArch(hidden=(8,)), REUSE_UPSTREAM, rng)
    assert np.array_equal(reused[0].weight, upstream.head[0].weight)
    with pytest.raises(ValueError):
        init_head(upstream, TWO_LAYER, REUSE_UPSTREAM, rng)  # 32 units do not fit an 8-unit layer


def test_init_known_only_for_reuse(upstream, train_set):
    fresh = fine_tune(upstream, train_set, training=DownstreamTraining(epochs=0))
    reuse = fine_tune(upstream, train_set, HeadArch(hidden=(8,)), REUSE_UPSTREAM,
                      DownstreamTraining(epochs=0))
    assert not fresh.init_known and reuse.init_known


def test_bad_inputs(upstream, train_set):
    with pytest.raises(ValueError):
        fine_tune(upstream, train_set.subset([]))
    bad = train_set.subset(range(5))
    bad.y_down[:] = 5
    with pytest.raises(ValueError):
        fine_tune(upstream, bad)


def test_secreting_block(upstream, train_set):
    m = fine_tune(upstream, train_set, training=DownstreamTraining(epochs=0))
    mask = np.zeros(16, bool)
    mask[[1, 4]] = True
    assert np.array_equal(secreting_block(m.head[0], mask), m.head[0].weight[:, [1, 4]])
    with pytest.raises(ValueError):
        secreting_block(m.head[0], mask[:5])


def test_api_is_query_only(upstream, train_set, small_world):
    m = fine_tune(upstream, train_set, training=DownstreamTraining(epochs=2))
    api = serve_api(m)
    assert isinstance(api, BlackBoxAPI)
    x = small_world.probe_set.x
    p = api(x)
    assert np.allclose(p.sum(axis=1), 1.0) and np.array_equal(p, api(x))
    assert np.array_equal(p, predict_proba(m, x))
    assert not hasattr(api, "__dict__") and not hasattr(api, "params")
    with pytest.raises(AttributeError):
        api.params = m.params
    # later changes to the model do not leak into the served copy
    m.head[0].weight[:] = 0.0
    assert np.array_equal(p, api(x))


def test_checkpoint_roundtrip(upstream, train_set):
    m = fine_tune(upstream, train_set, training=DownstreamTraining(epochs=1), seed=3,
                  setting=DownstreamSetting(300, 20, seed=4))
    back = DownstreamModel.from_checkpoint(loads(dumps(m.checkpoint())))
    assert back.setting == m.setting and back.init_policy == FRESH_RANDOM
    assert np.array_equal(back.init_snapshot.weight, m.init_snapshot.weight)
    assert np.array_equal(back.head[0].weight, m.head[0].weight)
