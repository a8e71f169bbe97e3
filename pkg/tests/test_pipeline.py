import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from fecanet import oracles as O
from fecanet.config import RunConfig
from fecanet.decoder import MemoryBank
from fecanet.errors import MetricError, ShapeError, ValidationError
from fecanet.pipeline import (Adam, Episode, EpisodeSampler, FecaNet, KShotConfig, MetricsAccumulator, ToyBackbone,
                              ce_loss, evaluate, fb_iou, fit, forward_episode, kshot_fuse, make_pool, miou,
                              synthetic_episodes, train_step)
from fecanet.tensor import ParamSet, Tensor

masks = arrays(np.uint8, (4, 5), elements=st.integers(0, 1))


# -- loss ---------------------------------------------------------------------
def test_ce_loss_closed_forms():
    gt = np.array([[0, 1], [1, 0]])
    confident = Tensor(np.stack([1 - gt, gt]).astype(np.float64))
    assert ce_loss(confident, gt).item() == 0.0
    uniform = Tensor(np.full((2, 2, 2), 0.5))
    assert abs(ce_loss(uniform, gt).item() - 4 * math.log(2)) < 1e-6
    assert abs(ce_loss(uniform, gt, reduction="mean").item() - math.log(2)) < 1e-6


def test_ce_loss_matches_oracle_and_floor(rng):
    logits = rng.normal(size=(2, 5, 4))
    probs = np.exp(logits) / np.exp(logits).sum(axis=0)
    gt = rng.integers(0, 2, size=(5, 4))
    assert abs(ce_loss(Tensor(probs), gt).item() - O.cross_entropy(probs, gt)) / O.cross_entropy(probs, gt) < 1e-6
    hard = np.zeros((2, 1, 1)); hard[0] = 1
    assert np.isfinite(ce_loss(Tensor(hard), np.ones((1, 1))).item())
    with pytest.raises(ShapeError):
        ce_loss(Tensor(probs), gt[:4])


# -- metrics -------------------------------------------------------------------
def test_metric_hand_cases():
    gt = np.array([[1, 0], [1, 0]])
    acc = MetricsAccumulator().update(1 - gt, gt, 3)
    assert miou(acc) == 0.0 and fb_iou(acc) == 0.0
    acc = MetricsAccumulator().update(gt, gt, 3)
    assert miou(acc) == 1.0 and fb_iou(acc) == 1.0
    assert miou(MetricsAccumulator().add_counts(1, tp=2, fn=2)) == 0.5


def test_empty_accumulator_raises():
    with pytest.raises(MetricError):
        miou(MetricsAccumulator())
    with pytest.raises(MetricError):
        fb_iou(MetricsAccumulator())


@given(st.lists(st.tuples(masks, masks, st.integers(0, 2)), min_size=1, max_size=5))
def test_metrics_match_pixel_loop_oracle(pairs):
    pairs = [(p, g, c) for p, g, c in pairs]
    if not any((p | g).any() for p, g, _ in pairs):
        return
    acc = MetricsAccumulator()
    for p, g, c in pairs:
        acc.update(p, g, c)
    want = O.miou_fbiou(pairs)
    assert (miou(acc), fb_iou(acc)) == pytest.approx(want, abs=1e-12)
    assert 0.0 <= miou(acc) <= 1.0 and 0.0 <= fb_iou(acc) <= 1.0


@given(st.lists(st.tuples(masks, masks, st.integers(0, 2)), min_size=2, max_size=5), st.randoms())
def test_accumulation_order_is_irrelevant(pairs, rnd):
    a, b = MetricsAccumulator(), MetricsAccumulator()
    for p, g, c in pairs:
        a.update(p, g, c)
    shuffled = list(pairs)
    rnd.shuffle(shuffled)
    half = len(shuffled) // 2
    left, right = MetricsAccumulator(), MetricsAccumulator()
    for p, g, c in shuffled[:half]:
        left.update(p, g, c)
    for p, g, c in shuffled[half:]:
        right.update(p, g, c)
    b = left.merge(right)
    assert a.class_iou() == b.class_iou() and a.inter == b.inter and a.union == b.union


# -- K-shot fusion ----------------------------------------------------------------
def test_kshot_cases(rng):
    p = rng.uniform(size=(4, 4))
    assert np.array_equal(kshot_fuse([p]), (p > 0.5).astype(np.uint8))
    assert kshot_fuse([np.full((1, 1), 0.8), np.full((1, 1), 0.4)], KShotConfig(2)).item() == 1
    maps = [rng.uniform(size=(5, 5)) for _ in range(3)]
    assert np.array_equal(kshot_fuse(maps, KShotConfig(3)), O.kshot(maps))


def test_kshot_config_validation():
    assert KShotConfig().tau == 0.5
    with pytest.raises(ValidationError):
        KShotConfig(0)
    with pytest.raises(ValidationError):
        KShotConfig(1, tau=1.5)
    with pytest.raises(ValidationError):
        kshot_fuse([])


@given(st.integers(1, 6), st.integers(0, 10_000))
def test_kshot_permutation_and_duplication(k, seed):
    rng = np.random.default_rng(seed)
    maps = [rng.uniform(size=(3, 4)) for _ in range(k)]
    cfg = KShotConfig(k)
    assert np.array_equal(kshot_fuse(maps, cfg), kshot_fuse(maps[::-1], cfg))
    assert np.array_equal(kshot_fuse([maps[0]] * k, cfg), kshot_fuse(maps[:1]))


# -- episodes and backbone -----------------------------------------------------
def test_synthetic_episodes_are_seeded():
    a, b = synthetic_episodes(3, 24, seed=5), synthetic_episodes(3, 24, seed=5)
    for x, y in zip(a, b):
        assert np.array_equal(x.query_image, y.query_image) and np.array_equal(x.query_mask, y.query_mask)
    assert [e.class_id for e in a] == [0, 1, 0]
    assert all(e.query_mask.any() and not e.query_mask.all() for e in a)


def test_episode_validation():
    ep = synthetic_episodes(1, 16, seed=0)[0]
    with pytest.raises(ShapeError):
        Episode(ep.supports, ep.query_image, ep.query_mask[:8], 0, "x")
    with pytest.raises(ValidationError):
        Episode([], ep.query_image, ep.query_mask, 0, "x")
    with pytest.raises(ValidationError):
        Episode(ep.supports, ep.query_image, ep.query_mask * 3, 0, "x")


def test_sampler_is_uniform_and_seeded():
    pool = make_pool(0, per_class=3, size=16)
    draws = [EpisodeSampler(pool, seed=9).sample(1) for _ in range(2)]
    assert draws[0].query_id == draws[1].query_id
    sampler = EpisodeSampler(pool, seed=1)
    classes = [sampler.sample(1).class_id for _ in range(400)]
    assert 0.4 < np.mean(classes) < 0.6
    with pytest.raises(ValidationError):
        EpisodeSampler(pool, seed=0).sample(3)


def test_backbone_levels_and_determinism():
    bb = ToyBackbone(3)
    img = synthetic_episodes(1, 32, seed=0)[0].query_image
    feats = bb.features(img)
    assert [len(level) for level in feats] == [3, 4, 3]
    assert [level[0].shape for level in feats] == [(16, 8, 8), (24, 4, 4), (32, 4, 4)]
    again = ToyBackbone(3).features(img)
    assert all(np.array_equal(a.data, b.data) for la, lb in zip(feats, again) for a, b in zip(la, lb))


# -- model, training, evaluation -----------------------------------------------
@pytest.fixture(scope="module")
def small_model():
    return FecaNet(RunConfig(seed=4, image_size=24))


def test_forward_episode_shapes_and_bank(small_model):
    ep = synthetic_episodes(1, 24, seed=2)[0]
    bank = MemoryBank()
    first = forward_episode(ep, small_model, bank)
    assert first.probs.shape == (2, 24, 24) and ep.query_id in bank
    again = forward_episode(ep, small_model, MemoryBank())
    assert np.array_equal(first.mask, again.mask)
    second = forward_episode(ep, small_model, bank)
    assert not np.array_equal(second.probs.data, first.probs.data)


def test_adam_zero_gradient_keeps_params(rng):
    ps = ParamSet()
    p = ps.add("w", rng.normal(size=(3, 3)))
    before = p.data.copy()
    opt = Adam()
    for _ in range(3):
        opt.step(ps, {"w": np.zeros((3, 3))})
    assert np.array_equal(p.data, before)


def test_train_step_decreases_loss():
    model = FecaNet(RunConfig(seed=1, image_size=24))
    ep = synthetic_episodes(1, 24, seed=1)
    opt, bank = Adam(1e-3), MemoryBank()
    losses = [train_step(model, ep, opt, bank) for _ in range(11)]
    assert losses[10] < losses[0]
    with pytest.raises(ValidationError):
        train_step(model, [], opt, bank)


class GroundTruthModel:
    def predict_fg(self, ep, support_index, bank):
        return ep.query_mask.astype(np.float64)


class BackgroundModel:
    def predict_fg(self, ep, support_index, bank):
        return np.zeros(ep.query_mask.shape)


def test_evaluate_reference_models():
    eps = synthetic_episodes(4, 16, seed=3)
    r = evaluate(eps, GroundTruthModel())
    assert (r.miou, r.fb_iou) == (1.0, 1.0)
    assert evaluate(eps, BackgroundModel()).miou == 0.0
    with pytest.raises(ValidationError):
        evaluate(eps, GroundTruthModel(), KShotConfig(2))


def test_duplicate_support_gives_identical_metrics():
    # without the bank each pass is independent, so two identical shots fuse to the single-shot mask
    model = FecaNet(RunConfig(seed=6, image_size=24, bank=False))
    eps = synthetic_episodes(2, 24, seed=6)
    doubled = [Episode(e.supports * 2, e.query_image, e.query_mask, e.class_id, e.query_id) for e in eps]
    one = evaluate(eps, model, KShotConfig(1))
    two = evaluate(doubled, model, KShotConfig(2))
    assert one.report() == two.report()


def test_fit_stops_at_target_loss():
    model = FecaNet(RunConfig(seed=1, image_size=24))
    losses = fit(model, synthetic_episodes(2, 24, seed=1), steps=50, batch_size=2, target_loss=10.0)
    assert len(losses) == 1
