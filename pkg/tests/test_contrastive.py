import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oracles import infonce, numeric_grad, rel_error
from revrir.contrastive import (
    DualEncoder,
    EmbeddingBatch,
    EncoderConfig,
    PairFeatures,
    PretrainConfig,
    batch_indices,
    batch_loss,
    contrastive_loss,
    directional_loss,
    encode_rir,
    encode_speech,
    pretrain,
    rir_features,
    smdp,
)
from revrir.dsp import Signal
from revrir.errors import ValidationError
from revrir.nn import Tensor, l2_normalize
from revrir.simulate import Placement, Rir

SMALL = EncoderConfig(embedding_dim=8, rir_dims=(16, 12), speech_frame_dim=8, speech_hidden=8)


def unit_rows(rng, b, d):
    x = rng.standard_normal((b, d))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def loss_value(e1, e2, labels, tau):
    return contrastive_loss(EmbeddingBatch(e1, e2, labels), tau).item()


@pytest.mark.parametrize("b", [1, 2, 7, 55])
def test_smdp_rows_sum_to_one(b):
    rng = np.random.default_rng(b)
    for tau in (0.07, 0.5, 1.0):
        p = smdp(unit_rows(rng, b, 16), unit_rows(rng, b, 16), tau)
        np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-6)


def test_smdp_examples():
    np.testing.assert_array_equal(smdp(np.array([[1.0, 0.0]]), np.array([[0.0, 1.0]]), 0.5), [[1.0]])
    eye = np.eye(2)
    assert smdp(eye, eye, 1.0)[0, 0] == pytest.approx(math.e / (math.e + 1), abs=1e-12)
    rng = np.random.default_rng(0)
    same = np.repeat(unit_rows(rng, 1, 4), 5, axis=0)
    np.testing.assert_allclose(smdp(unit_rows(rng, 5, 4), same, 0.1), 0.2, atol=1e-12)


def test_smdp_validates():
    with pytest.raises(ValidationError):
        smdp(np.eye(2), np.eye(3), 0.5)
    with pytest.raises(ValidationError):
        smdp(np.eye(2), np.eye(2), 1.5)
    with pytest.raises(ValidationError):
        smdp(np.eye(2), np.eye(2), 0.0)


def test_b2_hand_value():
    eye = np.eye(2)
    expected = -math.log(math.e / (math.e + 1))
    assert abs(loss_value(eye, eye, [0, 1], 1.0) - expected) < 1e-9
    assert abs(expected - 0.31326) < 1e-5


@pytest.mark.parametrize("b", [1, 3, 10])
def test_single_class_uniform_similarity_gives_ln_b(b):
    rng = np.random.default_rng(b)
    row = unit_rows(rng, 1, 6)
    e = np.repeat(row, b, axis=0)
    assert abs(loss_value(e, e, [4] * b, 0.3) - math.log(b)) < 1e-9


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 12), st.integers(2, 16), st.floats(0.05, 1.0), st.integers(0, 2**32 - 1))
def test_distinct_labels_reduce_to_infonce(b, d, tau, seed):
    rng = np.random.default_rng(seed)
    e1, e2 = unit_rows(rng, b, d), unit_rows(rng, b, d)
    assert abs(loss_value(e1, e2, np.arange(b), tau) - infonce(e1, e2, tau)) < 1e-9


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 12), st.integers(0, 2**32 - 1))
def test_permutation_invariance_and_symmetry(b, seed):
    rng = np.random.default_rng(seed)
    e1, e2 = unit_rows(rng, b, 5), unit_rows(rng, b, 5)
    labels = rng.integers(0, 3, b)
    perm = rng.permutation(b)
    a = loss_value(e1, e2, labels, 0.2)
    assert abs(a - loss_value(e1[perm], e2[perm], labels[perm], 0.2)) < 1e-9
    assert abs(a - loss_value(e2, e1, labels, 0.2)) < 1e-12
    fwd = directional_loss(Tensor(e1), Tensor(e2), labels, 0.2).item()
    bwd = directional_loss(Tensor(e2), Tensor(e1), labels, 0.2).item()
    assert a == pytest.approx(0.5 * (fwd + bwd), abs=1e-12)
    assert a >= 0


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 10), st.integers(0, 2**32 - 1))
def test_aligning_a_positive_pair_never_raises_the_loss(b, seed):
    rng = np.random.default_rng(seed)
    e1, e2 = unit_rows(rng, b, 6), unit_rows(rng, b, 6)
    labels = np.arange(b)
    before = loss_value(e1, e2, labels, 0.5)
    i = int(rng.integers(b))
    e2_aligned = e2.copy()
    e2_aligned[i] = e1[i]
    # with distinct labels the only positive of row i is column i
    row_before = -np.log(smdp(e1, e2, 0.5)[i, i])
    row_after = -np.log(smdp(e1, e2_aligned, 0.5)[i, i])
    assert row_after <= row_before + 1e-12
    assert np.isfinite(before)
    assert loss_value(np.tile(e1[:1], (b, 1)), np.tile(e1[:1], (b, 1)), labels, 0.5) == pytest.approx(math.log(b))


def test_loss_gradients_wrt_embeddings_and_temperature():
    rng = np.random.default_rng(3)
    b, d = 6, 5
    r1 = Tensor(rng.standard_normal((b, d)), requires_grad=True, name="E1")
    r2 = Tensor(rng.standard_normal((b, d)), requires_grad=True, name="E2")
    log_tau = Tensor(np.array(np.log(0.3)), requires_grad=True, name="tau")
    labels = np.array([0, 1, 0, 2, 1, 0])

    def loss():
        batch = EmbeddingBatch(l2_normalize(r1), l2_normalize(r2), labels)
        return contrastive_loss(batch, log_tau.exp())

    loss().backward()
    for t in (r1, r2, log_tau):
        num = numeric_grad(lambda: loss().item(), t.data)
        assert rel_error(t.grad, num) < 1e-4, t.name


def test_embedding_batch_validation():
    with pytest.raises(ValidationError):
        EmbeddingBatch(np.ones((2, 2)), np.ones((2, 2)), [0, 1])
    with pytest.raises(ValidationError):
        EmbeddingBatch(np.eye(2), np.eye(3)[:2], [0, 1])
    with pytest.raises(ValidationError):
        EmbeddingBatch(np.zeros((0, 2)), np.zeros((0, 2)), [])


def _features(n=24, frames=6, seed=0):
    rng = np.random.default_rng(seed)
    labels = np.arange(n) % 4
    speech = rng.standard_normal((n, frames, SMALL.speech_bins)) + labels[:, None, None]
    rir = rng.standard_normal((n, SMALL.rir_bins)) + labels[:, None]
    return PairFeatures(speech, rir, labels)


def test_encoders_output_unit_vectors():
    model = DualEncoder(SMALL, 0)
    model.eval()
    rng = np.random.default_rng(1)
    h = Rir(rng.standard_normal(4096), 8000, 0, Placement((1, 1, 1), (2, 2, 2)))
    e = encode_rir(h, model)
    assert e.shape == (8,) and abs(np.linalg.norm(e) - 1) < 1e-6
    np.testing.assert_array_equal(e, encode_rir(h, model))
    x = Signal(rng.standard_normal(8000), 8000)
    s1, s2 = encode_speech(x, model), encode_speech(Signal(0.5 * x.samples, 8000), model)
    assert abs(np.linalg.norm(s1) - 1) < 1e-6 and abs(np.linalg.norm(s2) - 1) < 1e-6
    with pytest.raises(ValidationError):
        encode_speech(Signal(np.ones(100), 8000), model)
    with pytest.raises(ValidationError):
        encode_speech(Signal(np.ones(8000 * 11), 8000), model)


def test_duplicated_clip_gives_identical_rows():
    model = DualEncoder(SMALL, 0)
    model.eval()
    feats = np.repeat(np.random.default_rng(2).standard_normal((1, 6, SMALL.speech_bins)), 3, axis=0)
    out = model.embed_speech(feats).data
    np.testing.assert_array_equal(out[0], out[1])
    np.testing.assert_array_equal(out[0], out[2])


def test_rir_gain_is_a_constant_input_shift():
    model = DualEncoder(SMALL, 0)
    model.eval()
    h = np.random.default_rng(3).standard_normal(4096)
    shifted = rir_features(h[None], SMALL) + 20.0
    np.testing.assert_allclose(model.embed_rir(rir_features(10 * h[None], SMALL)).data,
                               model.embed_rir(shifted).data, atol=1e-9)


def test_rir_encoder_rejects_wrong_width():
    model = DualEncoder(SMALL, 0)
    with pytest.raises(ValidationError):
        model.embed_rir(np.zeros((2, 100)))


def test_initial_loss_near_ln_b_at_unit_temperature():
    feats = _features(55)
    model = DualEncoder(SMALL, 4, tau_init=1.0)
    model.speech.input_norm.fit(feats.speech)
    model.rir.input_norm.fit(feats.rir)
    model.eval()
    idx = np.arange(55)
    labels = PairFeatures(feats.speech, feats.rir, idx)
    value = batch_loss(model, labels, idx).item()
    assert abs(value - math.log(55)) / math.log(55) < 0.15


def test_initial_loss_near_ln_b_at_default_temperature():
    cfg = EncoderConfig(speech_encoder="frame-stats")
    model = DualEncoder(cfg, 4)
    speech = np.random.default_rng(0).standard_normal((55, 20, cfg.speech_bins))
    rir = np.random.default_rng(1).standard_normal((55, cfg.rir_bins))
    model.speech.input_norm.fit(speech)
    model.rir.input_norm.fit(rir)
    model.eval()
    idx = np.arange(55)
    value = batch_loss(model, PairFeatures(speech, rir, idx), idx).item()
    assert model.tau == pytest.approx(0.07)
    assert abs(value - math.log(55)) / math.log(55) < 0.15


def test_pretrain_reduces_loss_and_is_deterministic():
    feats, val = _features(48, seed=0), _features(16, seed=1)
    cfg = PretrainConfig(epochs=25, batch_size=8, lr=3e-3)
    a = pretrain(feats, val, SMALL, cfg, seed=5)
    b = pretrain(feats, val, SMALL, cfg, seed=5)
    assert len(a.train_curve) == 25 * 6
    first = np.mean([v for _, v in a.train_curve[:6]])
    last = np.mean([v for _, v in a.train_curve[-6:]])
    assert last < 0.8 * first
    assert all(np.isfinite(v) for _, v in a.val_curve) and len(a.val_curve) == 25
    assert 0 < a.model.tau <= 1
    for (_, x), (_, y) in zip(a.model.named_parameters(), b.model.named_parameters()):
        np.testing.assert_array_equal(x.data, y.data)


def test_temperature_clamped_to_one():
    feats = _features(16)
    res = pretrain(feats, None, SMALL, PretrainConfig(epochs=3, batch_size=8, lr=0.5, tau_init=0.99), seed=0)
    assert res.model.tau <= 1.0


def test_pretrain_validation():
    feats = _features(8)
    with pytest.raises(ValidationError):
        pretrain(feats, None, SMALL, PretrainConfig(batch_size=9), seed=0)
    empty = PairFeatures(feats.speech[:0], feats.rir[:0], feats.labels[:0])
    with pytest.raises(ValidationError):
        pretrain(empty, None, SMALL, PretrainConfig(batch_size=1), seed=0)


def test_batch_samplers():
    labels = np.repeat(np.arange(6), 10)
    rng = np.random.default_rng(0)
    uniform = batch_indices(labels, 7, rng, "uniform")
    assert len(uniform) == 60 // 7 and all(len(b) == 7 for b in uniform)
    assert len(set(np.concatenate(uniform))) == 56
    distinct = batch_indices(labels, 6, rng, "distinct-class")
    assert distinct and all(len(set(labels[b])) == 6 for b in distinct)
    with pytest.raises(ValidationError):
        batch_indices(labels, 7, rng, "distinct-class")


def test_speech_encoder_variants():
    with pytest.raises(ValidationError):
        EncoderConfig(speech_encoder="transformer")
    cfg = EncoderConfig(embedding_dim=4, rir_dims=(8,), speech_frame_dim=6, speech_hidden=5, speech_encoder="frame-stats")
    model = DualEncoder(cfg, 0)
    model.eval()
    out = model.embed_speech(np.random.default_rng(0).standard_normal((3, 7, cfg.speech_bins))).data
    assert out.shape == (3, 4)
    np.testing.assert_allclose(np.linalg.norm(out, axis=1), 1, atol=1e-6)
