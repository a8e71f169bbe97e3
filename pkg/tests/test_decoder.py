import numpy as np
import pytest

from fecanet import oracles as O
from fecanet import tensor as T
from fecanet.decoder import DecoderParams, MemoryBank, PredictionMap, bank_fetch, bank_update, residual_decode
from fecanet.errors import ShapeError
from fecanet.tensor import Tensor


def decoder_arrays(p: DecoderParams) -> dict:
    f64 = lambda t: t.data.astype(np.float64)  # noqa: E731
    return {"stage_w": [f64(w) for w in p.stage_w], "stage_b": [f64(b) for b in p.stage_b],
            "head_w": f64(p.head_w), "head_b": f64(p.head_b)}


def test_zero_stages_leave_head_alone(rng):
    p = DecoderParams.init(rng, 6)
    zero = DecoderParams([Tensor(np.zeros(w.shape)) for w in p.stage_w],
                         [Tensor(np.zeros(b.shape)) for b in p.stage_b], p.head_w, p.head_b)
    ctx, prior = rng.normal(size=(6, 4, 4)), rng.uniform(size=(1, 4, 4))
    got = residual_decode(Tensor(ctx), prior, zero, (4, 4)).logits.data
    x = np.concatenate([ctx, prior])
    want = O.conv2d(x, p.head_w.data, 1, 1) + p.head_b.data.astype(np.float64)[:, None, None]
    np.testing.assert_allclose(got, want, rtol=1e-5, atol=1e-5)


def test_decoder_matches_oracle_and_normalises(rng):
    p = DecoderParams.init(rng, 4)
    ctx, prior = rng.normal(size=(4, 4, 4)), rng.uniform(size=(1, 2, 2))
    pred = residual_decode(Tensor(ctx), prior, p, (8, 8))
    logits, probs = O.residual_decode(ctx, prior, decoder_arrays(p), (8, 8))
    assert np.abs(pred.logits.data - logits).max() / np.abs(logits).max() < 1e-5
    np.testing.assert_allclose(pred.probs.data.sum(axis=0), 1.0, atol=1e-6)
    np.testing.assert_allclose(pred.probs.data, probs, atol=1e-6)


def test_decoder_is_pure_and_rejects_bad_context(rng):
    p = DecoderParams.init(rng, 4)
    ctx, prior = Tensor(rng.normal(size=(4, 4, 4))), np.zeros((1, 4, 4))
    a = residual_decode(ctx, prior, p, (8, 8)).probs.data
    b = residual_decode(ctx, prior, p, (8, 8)).probs.data
    assert a.tobytes() == b.tobytes()
    with pytest.raises(ShapeError):
        residual_decode(Tensor(np.ones((3, 4, 4))), prior, p, (8, 8))


def test_argmax_ties_go_to_background():
    logits = Tensor(np.zeros((2, 2, 2)))
    pred = PredictionMap(logits, T.softmax_axis(logits, 0), np.full((1, 2, 2), 0.5, dtype=np.float32))
    assert not pred.mask.any()


def _pred(value, shape=(1, 3, 3)):
    logits = Tensor(np.zeros((2, 3, 3)))
    return PredictionMap(logits, T.softmax_axis(logits, 0), np.full(shape, value, dtype=np.float32))


def test_bank_semantics():
    bank = MemoryBank()
    assert not bank_fetch(bank, "a", (3, 3)).any()
    bank_update(bank, "a", _pred(0.25))
    assert np.array_equal(bank_fetch(bank, "a", (3, 3)), np.full((1, 3, 3), 0.25, dtype=np.float32))
    bank_update(bank, "b", _pred(0.75))
    assert bank_fetch(bank, "a", (3, 3))[0, 0, 0] == 0.25 and bank_fetch(bank, "b", (3, 3))[0, 0, 0] == 0.75
    bank_update(bank, "a", _pred(0.5))
    assert bank_fetch(bank, "a", (3, 3))[0, 0, 0] == 0.5 and len(bank) == 2


def test_bank_returns_copies():
    bank = MemoryBank()
    bank_update(bank, "q", _pred(0.5))
    got = bank_fetch(bank, "q", (3, 3))
    got[:] = 9
    assert bank_fetch(bank, "q", (3, 3)).max() == 0.5


def test_empty_bank_equals_zero_prior(rng):
    p = DecoderParams.init(rng, 4)
    ctx = Tensor(rng.normal(size=(4, 4, 4)))
    a = residual_decode(ctx, bank_fetch(MemoryBank(), "x", (4, 4)), p, (8, 8)).probs.data
    b = residual_decode(ctx, np.zeros((1, 4, 4)), p, (8, 8)).probs.data
    assert np.array_equal(a, b)


def test_no_gradient_reaches_the_prior(rng):
    p = DecoderParams.init(rng, 4)
    for w in p.stage_w + p.stage_b + [p.head_w, p.head_b]:
        w.requires_grad = True
    prior = Tensor(rng.uniform(size=(1, 4, 4)))
    pred = residual_decode(Tensor(rng.normal(size=(4, 4, 4))), prior, p, (8, 8))
    T.sum_(T.mul(pred.probs, Tensor(rng.normal(size=(2, 8, 8))))).backward()
    assert prior.grad is None
    assert p.head_w.grad is not None and np.abs(p.stage_w[0].grad).sum() > 0
