import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mts2s import multitask as mt
from mts2s import network as nw
from mts2s.numerics import DimensionError, DomainError, finite_difference_gradcheck


def enc_weights(E, H, rng=None, scale=0.5):
    shapes = mt.group_shapes("encoder", mt.ModelDims(3, 5, H, E))
    if rng is None:
        return {k: np.zeros(s) for k, s in shapes.items()}
    return {k: rng.uniform(-scale, scale, size=s) for k, s in shapes.items()}


def att_weights(H, A, rng):
    return {k: rng.uniform(-0.5, 0.5, size=s)
            for k, s in mt.group_shapes("attention", mt.ModelDims(3, 5, H, 4, A)).items()}


def test_lstm_zero_weights_zero_state():
    H, n = 3, 2
    s = nw.lstm_step(np.ones(n), nw.LstmState(np.zeros(H), np.zeros(H)),
                     {"W": np.zeros((4 * H, n + H)), "b": np.zeros(4 * H)})
    assert np.array_equal(s.h, np.zeros(H)) and np.array_equal(s.c, np.zeros(H))


def test_lstm_saturated_gates_hand_value():
    # i = f = o -> 1 through large biases, candidate pre-activation 1
    W = np.zeros((4, 2))
    b = np.array([50.0, 50.0, 50.0, 1.0])
    s = nw.lstm_step(np.array([0.0]), nw.LstmState(np.array([0.0]), np.array([0.3])), {"W": W, "b": b})
    assert s.c[0] == pytest.approx(0.3 + math.tanh(1.0), abs=1e-12)
    assert s.h[0] == pytest.approx(math.tanh(0.3 + 0.7615941559557649), abs=1e-12)


def test_lstm_rejects_bad_shapes():
    with pytest.raises(DimensionError):
        nw.lstm_step(np.ones(2), nw.LstmState(np.zeros(3), np.zeros(3)),
                     {"W": np.zeros((12, 4)), "b": np.zeros(12)})


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000))
def test_lstm_hidden_bounded(seed):
    rng = np.random.default_rng(seed)
    H, n = 4, 3
    s = nw.lstm_step(rng.normal(size=n) * 10, nw.LstmState(rng.normal(size=H), rng.normal(size=H) * 5),
                     {"W": rng.normal(size=(4 * H, n + H)) * 3, "b": rng.normal(size=4 * H)})
    assert np.all(np.abs(s.h) < 1)


def test_encoder_length_one_and_truncation():
    rng = np.random.default_rng(0)
    w = enc_weights(3, 4, rng)
    assert nw.encode_sequence(rng.normal(size=(1, 3)), w).states.shape == (1, 1, 8)
    out = nw.encode_sequence(rng.normal(size=(9, 3)), w, max_len=5)
    assert out.length == 5
    with pytest.raises(DomainError):
        nw.encode_sequence(np.zeros((0, 3)), w)


def test_encoder_zero_weights_zero_states():
    out = nw.encode_sequence(np.ones((4, 3)), enc_weights(3, 2))
    assert not out.states.any()


def test_encoder_reversal_mirrors_directions():
    rng = np.random.default_rng(1)
    w = enc_weights(3, 4, rng)
    w["bwd_W"], w["bwd_b"] = w["fwd_W"].copy(), w["fwd_b"].copy()
    x = rng.normal(size=(6, 3))
    a = nw.encode_sequence(x, w).states[0]
    b = nw.encode_sequence(x[::-1], w).states[0]
    H = 4
    assert np.allclose(a[:, :H], b[::-1, H:], atol=1e-14)
    assert np.allclose(a[:, H:], b[::-1, :H], atol=1e-14)


def test_encoder_mask_equals_unpadded():
    rng = np.random.default_rng(2)
    w = enc_weights(3, 4, rng)
    x = rng.normal(size=(4, 3))
    padded = np.concatenate([x, rng.normal(size=(3, 3))])[None]
    mask = np.array([[1, 1, 1, 1, 0, 0, 0]], dtype=float)
    a = nw.encode_sequence(x, w)
    b, _ = nw.encode_forward(padded, mask, w)
    assert np.allclose(a.states[0], b.states[0, :4], atol=1e-14)
    assert np.allclose(a.final.h, b.final.h, atol=1e-14)


def _enc(states):
    states = np.asarray(states, dtype=float)[None]
    return nw.EncoderOutput(states, np.ones(states.shape[:2]), nw.LstmState(np.zeros((1, 1)), np.zeros((1, 1))))


def test_attend_single_position():
    rng = np.random.default_rng(3)
    enc = _enc(rng.normal(size=(1, 4)))
    ctx, w = nw.attend(nw.LstmState(rng.normal(size=2), np.zeros(2)), enc, att_weights(2, 3, rng))
    assert np.array_equal(w, [1.0])
    assert np.allclose(ctx, enc.states[0, 0])


def test_attend_constant_scores_uniform():
    rng = np.random.default_rng(4)
    enc = _enc(rng.normal(size=(5, 4)))
    att = att_weights(2, 3, rng)
    att["v"][:] = 0
    ctx, w = nw.attend(nw.LstmState(rng.normal(size=2), np.zeros(2)), enc, att)
    assert np.allclose(w, 0.2)
    assert np.allclose(ctx, enc.states[0].mean(axis=0))


def test_attend_hand_softmax():
    # A = 1, v = 2, scores e = 2 tanh(k_i) with k = [atanh(ln3 / 2), 0]
    enc = _enc([[math.atanh(math.log(3) / 2), 0.0], [0.0, 0.0]])
    att = {"W_enc": np.array([[1.0, 0.0]]), "W_dec": np.zeros((1, 1)), "b": np.zeros(1), "v": np.array([2.0])}
    _, w = nw.attend(nw.LstmState(np.zeros(1), np.zeros(1)), enc, att)
    assert np.allclose(w, [0.75, 0.25], atol=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 7))
def test_attend_weights_are_distribution(seed, T):
    rng = np.random.default_rng(seed)
    enc = _enc(rng.normal(size=(T, 4)) * 3)
    _, w = nw.attend(nw.LstmState(rng.normal(size=2) * 3, np.zeros(2)), enc, att_weights(2, 3, rng))
    assert np.all(w >= 0) and abs(w.sum() - 1) < 1e-6


def test_attend_ignores_masked_positions():
    rng = np.random.default_rng(5)
    states = rng.normal(size=(1, 4, 4))
    mask = np.array([[1.0, 1.0, 0.0, 0.0]])
    enc = nw.EncoderOutput(states, mask, None)
    _, w = nw.attend(nw.LstmState(rng.normal(size=2), np.zeros(2)), enc, att_weights(2, 3, rng))
    assert np.array_equal(w[2:], [0.0, 0.0])


def _decoder(role, dims, rng, zero=False):
    shapes = mt.group_shapes(role, dims)
    if zero:
        return {k: np.zeros(s) for k, s in shapes.items()}
    return {k: rng.uniform(-0.5, 0.5, size=s) for k, s in shapes.items()}


def test_decode_step_token_uniform_with_zero_projection():
    rng = np.random.default_rng(6)
    dims = mt.ModelDims(3, 3, hidden=2, embed=4)
    dec = _decoder("token_decoder", dims, rng)
    dec["out_W"][:] = 0
    dec["out_b"][:] = 0
    enc = _enc(rng.normal(size=(3, 4)))
    out = nw.decode_step_token(rng.normal(size=4), nw.LstmState(np.zeros(2), np.zeros(2)), enc, dec,
                               att_weights(2, 2, rng))
    assert np.allclose(out.emission, np.log(1 / 3))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_decode_step_token_is_log_distribution(seed):
    rng = np.random.default_rng(seed)
    dims = mt.ModelDims(3, 7, hidden=2, embed=4)
    enc = _enc(rng.normal(size=(3, 4)))
    out = nw.decode_step_token(rng.normal(size=4), nw.LstmState(rng.normal(size=2), rng.normal(size=2)), enc,
                               _decoder("token_decoder", dims, rng), att_weights(2, 2, rng))
    assert abs(np.exp(out.emission).sum() - 1) < 1e-6


def test_decode_step_frame_zero_weights_emits_bias():
    rng = np.random.default_rng(7)
    dims = mt.ModelDims(5, 3, hidden=2, embed=4)
    dec = _decoder("frame_decoder", dims, rng, zero=True)
    dec["out_b"] = np.arange(5.0)
    enc = _enc(rng.normal(size=(3, 4)))
    out = nw.decode_step_frame(rng.normal(size=5), nw.LstmState(np.zeros(2), np.zeros(2)), enc, dec,
                               att_weights(2, 2, rng))
    assert np.array_equal(out.emission, np.arange(5.0))
    assert out.emission.shape == (5,)


# ---------------------------------------------------------------------------
# backward passes


DIMS = mt.ModelDims(feat_dim=4, vocab_size=7, hidden=3, embed=2)


def _params(seed=0, r=0.5):
    plan = mt.SharingPlan.build()
    return plan, mt.ParameterStore.initialize(plan, DIMS, r, seed, dtype=np.float64)


def _check(batch, seed=0):
    plan, p = _params(seed)
    rep = finite_difference_gradcheck(lambda q: mt.task_loss(batch, q, plan), p,
                                      value_fn=lambda q: mt.task_loss(batch, q, plan, with_grads=False)[0],
                                      reference_dtype=np.longdouble)
    assert rep.passed, "\n".join(rep.lines())


def test_gradcheck_single_token_step():
    rng = np.random.default_rng(0)
    b = mt.caption_batch([rng.normal(size=(3, 4))], [[]])
    assert b.targets.shape == (1, 1)
    _check(b)


def test_gradcheck_two_chained_frame_steps():
    rng = np.random.default_rng(1)
    b = mt.prediction_batch([rng.normal(size=(3, 4))], encode_fraction=0.34)
    assert b.targets.shape[1] == 2
    _check(b)


def test_gradcheck_padded_text_batch():
    b = mt.entailment_batch([[4, 5, 6], [6]], [[5], [4, 4, 6]])
    _check(b, seed=3)


def test_zero_step_gradients_give_zero_parameter_gradients():
    rng = np.random.default_rng(2)
    plan, p = _params()
    b = mt.caption_batch([rng.normal(size=(3, 4))], [[4, 5]])
    fc = mt.forward(b, p, plan)
    grads = mt.backprop_through_time(np.zeros_like(fc.emissions), fc, b, p, plan)
    assert grads and all(not g.any() for d in grads.values() for g in d.values())


def test_forward_is_deterministic():
    rng = np.random.default_rng(3)
    plan, p = _params()
    b = mt.caption_batch([rng.normal(size=(4, 4)), rng.normal(size=(2, 4))], [[4, 5], [6]])
    l1, g1 = mt.task_loss(b, p, plan)
    l2, g2 = mt.task_loss(b, p, plan)
    assert l1 == l2
    assert all(np.array_equal(g1[k][n], g2[k][n]) for k in g1 for n in g1[k])
