import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from artifact.nn import tensor as T
from artifact.nn.model import extract
from artifact.nn.tensor import GradientTape, Tensor
from artifact.upstream import (STEALTHY, ZERO_ACTIVATION, AttackLossConfig, CovarianceStats, ManipulatedModel,
                               Mask, UpstreamArch, UpstreamTraining, covariance_gap, covariance_regularizer,
                               covariance_stats, make_mask, multi_property_setup, release, search_lambda,
                               secrecy_loss, secrecy_loss_batch, train_upstream)

SMALL_ARCH = UpstreamArch(d=8, hidden=(16,), A=16, head_hidden=(8,), K=4)
SMALL_TRAIN = UpstreamTraining(clean_epochs=4, epochs=4, mixup_count=40, batch_size=64)


def _mask(bits):
    return Mask(tuple(bool(b) for b in bits))


# -- masks -------------------------------------------------------------------------
def test_make_mask_examples():
    assert make_mask(8, 3).bits == (True, True, True, False, False, False, False, False)
    assert make_mask(8, 3, "random", seed=5) == make_mask(8, 3, "random", seed=5)
    assert all(make_mask(6, 6).bits)
    for bad in (0, 9):
        with pytest.raises(ValueError):
            make_mask(8, bad)
    with pytest.raises(ValueError):
        make_mask(8, 2, "striped")


@settings(max_examples=30, deadline=None)
@given(A=st.integers(1, 64), data=st.data())
def test_random_mask_popcount(A, data):
    count = data.draw(st.integers(1, A))
    m = make_mask(A, count, "random", seed=data.draw(st.integers(0, 1000)))
    assert m.size == count and len(m) == A


def test_multi_property_masks():
    a, b = multi_property_setup(64, [8, 8])
    assert a.size == b.size == 8 and not (a.array & b.array).any()
    c, d = multi_property_setup(64, [8, 8], "random", seed=3)
    assert not (c.array & d.array).any()
    with pytest.raises(ValueError):
        multi_property_setup(64, [40, 40])


def test_mask_json_roundtrip():
    m = make_mask(16, 4, "random", seed=2)
    assert Mask.from_json(m.to_json()) == m


# -- loss config ---------------------------------------------------------------------
def test_loss_config_validation():
    with pytest.raises(ValueError):
        AttackLossConfig(variant=STEALTHY, lam=0.5)
    with pytest.raises(ValueError):
        AttackLossConfig(alpha=-1)
    with pytest.raises(ValueError):
        AttackLossConfig(norm="linf")
    with pytest.raises(ValueError):
        AttackLossConfig(variant="other")
    AttackLossConfig(variant=ZERO_ACTIVATION, lam=0.0)


# -- secrecy loss -----------------------------------------------------------------------
def test_secrecy_loss_examples():
    m = _mask([1, 1, 0, 0])
    za = AttackLossConfig(lam=10)
    assert secrecy_loss([0, 0, 3, 1], m, 0, za) == 0.0
    # ||a*~m|| = 1, ||a*m|| = 5 -> 10*1 - 5
    assert secrecy_loss([3, 4, 1, 0], m, 1, za) == 5.0
    st_cfg = AttackLossConfig(variant=STEALTHY, lam=1)
    assert secrecy_loss([1, 1, 3, 0], m, 0, st_cfg) == 0.0
    assert np.isclose(secrecy_loss([3, 4, 1, 0], m, 0, st_cfg), 4.0)
    with pytest.raises(ValueError):
        secrecy_loss([1, 2, 3], m, 0, za)


def _scalar_oracle(a, m, y, cfg):
    sec = np.linalg.norm(a[m], ord=2 if cfg.norm == "l2" else 1)
    rest = np.linalg.norm(a[~m], ord=2 if cfg.norm == "l2" else 1)
    if y:
        return cfg.beta * max(cfg.lam * rest - sec, 0.0)
    if cfg.variant == ZERO_ACTIVATION:
        return cfg.alpha * sec
    return cfg.alpha * max(sec - rest, 0.0)


def test_secrecy_loss_matches_scalar_oracle():
    rng = np.random.default_rng(0)
    for trial in range(1000):
        A = int(rng.integers(2, 12))
        bits = rng.random(A) < 0.4
        bits[rng.integers(0, A)] = True
        m = _mask(bits)
        a = np.maximum(rng.normal(size=A), 0) * rng.uniform(0.1, 5)
        if trial % 7 == 0:
            a[bits] = 0.0
        cfg = AttackLossConfig(alpha=rng.uniform(0, 2), beta=rng.uniform(0, 2), lam=float(rng.uniform(1, 6)),
                               norm=["l1", "l2"][trial % 2], variant=[ZERO_ACTIVATION, STEALTHY][trial % 3 == 0])
        y = int(rng.integers(0, 2))
        want = _scalar_oracle(a, bits, y, cfg)
        assert np.isclose(secrecy_loss(a, m, y, cfg), want, rtol=1e-12, atol=1e-12)
        batch = secrecy_loss_batch(Tensor(a[None]), m, np.array([y]), cfg)
        assert np.isclose(float(batch.data), want, rtol=1e-12, atol=1e-12)


def test_batch_loss_margin_and_revive_terms():
    m = _mask([1, 1, 0])
    pre = np.array([[-1.0, 0.5, 2.0], [-3.0, -0.5, 1.0]])
    acts = np.maximum(pre, 0)
    cfg = AttackLossConfig(lam=1.0, margin=2.0, revive=1.0)
    got = float(secrecy_loss_batch(Tensor(acts), m, np.array([0, 1]), cfg, Tensor(pre)).data)
    # row 0 (no property): ||relu(pre + 2) * m|| = ||(1, 2.5)||
    row0 = np.hypot(1.0, 2.5)
    # row 1 (property): hinge(1*1 - 0) + revive * (3 + 0.5)
    row1 = 1.0 + 3.5
    assert np.isclose(got, (row0 + row1) / 2)


def test_batch_loss_gradient_reaches_dead_property_units():
    m = _mask([1, 0])
    pre = np.array([[-0.5, 1.0]])
    cfg = AttackLossConfig(lam=1.0, margin=0.0, revive=1.0)
    with GradientTape() as tape:
        p = tape.watch(Tensor(pre))
        loss = secrecy_loss_batch(T.relu(p), m, np.array([1]), cfg, p)
    g = tape.gradient(loss, [p])[0]
    assert g[0, 0] < 0  # descent raises the dead secreting pre-activation


# -- covariance regulariser -------------------------------------------------------------
def test_covariance_gap_hand_example():
    stats = [CovarianceStats(1.0, 0.3, "property"), CovarianceStats(1.5, 0.3, "all"),
             CovarianceStats(2.0, 0.3, "nonproperty")]
    assert np.isclose(covariance_gap(stats), 1.5)


def test_covariance_regularizer_matches_bruteforce():
    rng = np.random.default_rng(1)
    acts = rng.normal(size=(20, 5)) + np.arange(20)[:, None] * 0.1
    flags = np.zeros(20, bool)
    flags[:6] = True
    got = float(covariance_regularizer(acts, flags, normalize=False).data)
    want = covariance_gap([covariance_stats(acts[flags], "property"), covariance_stats(acts, "all"),
                           covariance_stats(acts[~flags], "nonproperty")])
    assert np.isclose(got, want, rtol=1e-10)
    scale = float(acts.var(axis=0, ddof=1).mean())
    got_n = float(covariance_regularizer(acts, flags).data)
    want_n = covariance_gap([covariance_stats(acts[flags]), covariance_stats(acts),
                             covariance_stats(acts[~flags])], scale=scale)
    assert np.isclose(got_n, want_n, rtol=1e-6)


def test_covariance_regularizer_degenerate_and_identical():
    rng = np.random.default_rng(2)
    acts = rng.normal(size=(10, 3))
    assert float(covariance_regularizer(acts, np.zeros(10)).data) == 0.0
    same = np.vstack([acts, acts])
    flags = np.r_[np.ones(10), np.zeros(10)]
    # identical groups: property and non-property covariances coincide, and the
    # pooled covariance differs only through the n-1 normaliser
    val = float(covariance_regularizer(same, flags, normalize=False).data)
    assert val >= 0.0
    assert float(covariance_regularizer(np.ones((6, 3)), np.r_[np.ones(3), np.zeros(3)]).data) == 0.0


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_covariance_regularizer_non_negative(seed):
    rng = np.random.default_rng(seed)
    acts = rng.normal(size=(12, 4)) * rng.uniform(0.1, 3)
    flags = rng.random(12) < 0.5
    assert float(covariance_regularizer(acts, flags).data) >= 0.0


# -- training ----------------------------------------------------------------------------
@pytest.fixture(scope="module")
def clean(small_world):
    return train_upstream(small_world, SMALL_ARCH, training=SMALL_TRAIN, seed=1)


def test_clean_training_is_deterministic(small_world, clean):
    again = train_upstream(small_world, SMALL_ARCH, training=SMALL_TRAIN, seed=1)
    for k, v in clean.params.named_arrays().items():
        assert np.array_equal(v, again.params.named_arrays()[k])


def test_zero_weights_equal_normal_training(small_world, clean):
    cfg = AttackLossConfig(alpha=0.0, beta=0.0)
    model = train_upstream(small_world, SMALL_ARCH, cfg, make_mask(16, 4), SMALL_TRAIN, seed=1)
    for k, v in clean.params.named_arrays().items():
        assert np.array_equal(v, model.params.named_arrays()[k])


def test_manipulated_training_logs_and_releases(small_world, clean):
    cfg = AttackLossConfig(lam=5.0)
    model = train_upstream(small_world, SMALL_ARCH, cfg, make_mask(16, 4), SMALL_TRAIN, seed=1,
                           warm_start=clean.params)
    assert model.params.num_classes == small_world.K  # fake-label column removed
    assert {"epoch", "l_normal", "l_t", "cov_term"} <= set(model.log[0])
    assert model.variant == ZERO_ACTIVATION
    # the suppression term lowers the secreting activations on non-property rows
    x = small_world.victim.nonprop.x[:500]
    m = model.mask.array
    assert extract(model.params, x)[:, m].mean() < extract(clean.params, x)[:, m].mean()


def test_secrecy_loss_needs_mask(small_world):
    with pytest.raises(ValueError):
        train_upstream(small_world, SMALL_ARCH, AttackLossConfig(), None, SMALL_TRAIN)


def test_release_drops_extra_columns(clean):
    from artifact.upstream import _add_fake_column
    wide = _add_fake_column(clean.params, np.random.default_rng(0))
    assert wide.num_classes == 5 and release(wide, 4).num_classes == 4


def test_manipulated_model_checkpoint_roundtrip(clean):
    clean.masks = [make_mask(16, 4)]
    clean.cfg = AttackLossConfig(variant=STEALTHY, lam=1.5)
    back = ManipulatedModel.from_checkpoint(clean.checkpoint())
    assert back.masks == clean.masks and back.cfg == clean.cfg
    for k, v in clean.params.named_arrays().items():
        assert np.array_equal(v, back.params.named_arrays()[k])


# -- lambda search --------------------------------------------------------------------------
def test_lambda_search_never_fires_reaches_cap():
    res = search_lambda(lambda lam: lam, lambda m: [0.0, 0.0], start=1.0, step=0.5, max_lambda=3.0)
    assert res.lam == 3.0 and not res.failed and res.model == 3.0
    assert [h[0] for h in res.history] == [1.0, 1.5, 2.0, 2.5, 3.0]


def test_lambda_search_always_fires_flags_start():
    res = search_lambda(lambda lam: lam, lambda m: [0.5], start=1.0)
    assert res.lam == 1.0 and res.failed and len(res.history) == 1


def test_lambda_search_stops_at_first_detection():
    res = search_lambda(lambda lam: lam, lambda m: [0.0, 0.3 if m >= 2.0 else 0.1], detect_threshold=0.2)
    assert res.lam == 1.5 and not res.failed


def test_lambda_search_rejects_low_start():
    with pytest.raises(ValueError):
        search_lambda(lambda lam: lam, lambda m: [0.0], start=0.5)
