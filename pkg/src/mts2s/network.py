"""LSTM cell, bidirectional encoder, additive attention and the two decoder
step kinds, each with an explicit backward pass.

Every function works on a leading batch axis ``B``.  Variable lengths are
handled with 0/1 masks: a masked encoder step carries its state through
unchanged and masked source positions receive zero attention weight.

Weight layouts (``H`` hidden, ``A`` attention size):

* LSTM ``W``: ``(4H, n_in + H)`` acting on ``[x, h]``; ``b``: ``(4H,)``;
  gate blocks ordered input, forget, output, candidate.
* attention: ``W_enc (A, 2H)``, ``W_dec (A, H)``, ``b (A,)``, ``v (A,)``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import ContractError, DimensionError, DomainError, log_softmax, sigmoid


@dataclass
class LstmState:
    h: np.ndarray
    c: np.ndarray


@dataclass
class EncoderOutput:
    states: np.ndarray          # (B, T, 2H) forward || backward
    mask: np.ndarray            # (B, T)
    final: LstmState            # bridged to decoder size
    keys: dict | None = None    # attention group id -> W_enc @ states, filled lazily

    @property
    def length(self):
        return self.states.shape[1]


@dataclass
class DecoderStepOutput:
    state: LstmState
    attention_weights: np.ndarray
    emission: np.ndarray


def _add(grads, name, value):
    if name in grads:
        grads[name] += value
    else:
        grads[name] = value.copy()


# ---------------------------------------------------------------------------
# LSTM cell


def lstm_forward(x, h, c, W, b, mask=None):
    """One LSTM step.  Returns ``(h_new, c_new, cache)``.

    Rows where ``mask`` is 0 keep their previous state.
    """
    H = h.shape[-1]
    if W.shape != (4 * H, x.shape[-1] + H) or b.shape != (4 * H,):
        raise DimensionError(
            f"lstm weights {W.shape}/{b.shape} do not fit input {x.shape} and state {h.shape}")
    xh = np.concatenate([x, h], axis=-1)
    z = xh @ W.T + b
    i = sigmoid(z[:, :H])
    f = sigmoid(z[:, H:2 * H])
    o = sigmoid(z[:, 2 * H:3 * H])
    g = np.tanh(z[:, 3 * H:])
    c_new = f * c + i * g
    tc = np.tanh(c_new)
    h_new = o * tc
    if mask is not None:
        m = mask[:, None]
        h_new = m * h_new + (1 - m) * h
        c_new_out = m * c_new + (1 - m) * c
    else:
        c_new_out = c_new
    return h_new, c_new_out, (xh, c, i, f, o, g, tc, mask)


def lstm_backward(dh, dc, cache, W, grads, prefix=""):
    """Backward through ``lstm_forward``.

    Accumulates ``{prefix}W``/``{prefix}b`` gradients into ``grads`` and
    returns ``(dx, dh_prev, dc_prev)``.
    """
    xh, c_prev, i, f, o, g, tc, mask = cache
    H = c_prev.shape[-1]
    if mask is not None:
        m = mask[:, None]
        dh_pass, dc_pass = (1 - m) * dh, (1 - m) * dc
        dh, dc = m * dh, m * dc
    else:
        dh_pass = dc_pass = 0.0
    dc = dc + dh * o * (1 - tc * tc)
    dz = np.concatenate([
        dc * g * i * (1 - i),
        dc * c_prev * f * (1 - f),
        dh * tc * o * (1 - o),
        dc * i * (1 - g * g),
    ], axis=-1)
    _add(grads, prefix + "W", dz.T @ xh)
    _add(grads, prefix + "b", dz.sum(axis=0))
    dxh = dz @ W
    n_in = xh.shape[-1] - H
    return dxh[:, :n_in], dxh[:, n_in:] + dh_pass, dc * f + dc_pass


def lstm_step(x, prev: LstmState, weights) -> LstmState:
    """Single (optionally unbatched) LSTM update with ``weights = {"W", "b"}``."""
    squeeze = np.ndim(x) == 1
    x2, h2, c2 = (np.atleast_2d(a) for a in (x, prev.h, prev.c))
    h, c, _ = lstm_forward(x2, h2, c2, weights["W"], weights["b"])
    if squeeze:
        return LstmState(h[0], c[0])
    return LstmState(h, c)


# ---------------------------------------------------------------------------
# dropout (inverted, vertical connections only)


def dropout_mask(rng, shape, rate, dtype):
    if rate <= 0 or rng is None:
        return None
    keep = 1.0 - rate
    return (rng.random(shape) < keep).astype(dtype) / dtype(keep)


# ---------------------------------------------------------------------------
# encoder


def encode_forward(inputs, mask, enc, rng=None, dropout=0.0):
    """Bidirectional LSTM over embedded ``inputs`` of shape ``(B, T, E)``.

    ``enc`` holds ``fwd_W, fwd_b, bwd_W, bwd_b`` and the bridge
    ``bridge_h_W, bridge_h_b, bridge_c_W, bridge_c_b``.
    """
    B, T, E = inputs.shape
    if T == 0:
        raise DomainError("cannot encode an empty sequence")
    if mask.shape != (B, T):
        raise DimensionError(f"mask {mask.shape} does not match inputs {inputs.shape}")
    H = enc["fwd_b"].shape[0] // 4
    dt = inputs.dtype
    drop = dropout_mask(rng, inputs.shape, dropout, dt.type)
    x = inputs * drop if drop is not None else inputs

    states = np.zeros((B, T, 2 * H), dtype=dt)
    h = np.zeros((B, H), dt)
    c = np.zeros((B, H), dt)
    fcache = []
    for t in range(T):
        h, c, cc = lstm_forward(x[:, t], h, c, enc["fwd_W"], enc["fwd_b"], mask[:, t])
        states[:, t, :H] = h
        fcache.append(cc)
    hf, cf = h, c
    h = np.zeros((B, H), dt)
    c = np.zeros((B, H), dt)
    bcache = [None] * T
    for t in range(T - 1, -1, -1):
        h, c, cc = lstm_forward(x[:, t], h, c, enc["bwd_W"], enc["bwd_b"], mask[:, t])
        states[:, t, H:] = h
        bcache[t] = cc
    hb, cb = h, c

    fin_h = np.concatenate([hf, hb], axis=-1)
    fin_c = np.concatenate([cf, cb], axis=-1)
    h0 = np.tanh(fin_h @ enc["bridge_h_W"].T + enc["bridge_h_b"])
    c0 = fin_c @ enc["bridge_c_W"].T + enc["bridge_c_b"]
    out = EncoderOutput(states, mask, LstmState(h0, c0), keys={})
    cache = dict(fcache=fcache, bcache=bcache, fin_h=fin_h, fin_c=fin_c, h0=h0, drop=drop,
                 shape=inputs.shape)
    return out, cache


def encode_backward(dstates, dh0, dc0, cache, enc, grads):
    """Backward through ``encode_forward``; returns the gradient on the inputs."""
    B, T, E = cache["shape"]
    H = enc["fwd_b"].shape[0] // 4
    if dstates.shape != (B, T, 2 * H):
        raise ContractError(f"encoder gradient {dstates.shape} does not match cached batch {(B, T, 2 * H)}")
    dpre_h = dh0 * (1 - cache["h0"] ** 2)
    _add(grads, "bridge_h_W", dpre_h.T @ cache["fin_h"])
    _add(grads, "bridge_h_b", dpre_h.sum(axis=0))
    _add(grads, "bridge_c_W", dc0.T @ cache["fin_c"])
    _add(grads, "bridge_c_b", dc0.sum(axis=0))
    dfin_h = dpre_h @ enc["bridge_h_W"]
    dfin_c = dc0 @ enc["bridge_c_W"]

    dx = np.zeros(cache["shape"], dtype=dstates.dtype)
    dh, dc = dfin_h[:, :H], dfin_c[:, :H]
    for t in range(T - 1, -1, -1):
        dh = dh + dstates[:, t, :H]
        dxt, dh, dc = lstm_backward(dh, dc, cache["fcache"][t], enc["fwd_W"], grads, "fwd_")
        dx[:, t] += dxt
    dh, dc = dfin_h[:, H:], dfin_c[:, H:]
    for t in range(T):
        dh = dh + dstates[:, t, H:]
        dxt, dh, dc = lstm_backward(dh, dc, cache["bcache"][t], enc["bwd_W"], grads, "bwd_")
        dx[:, t] += dxt
    if cache["drop"] is not None:
        dx *= cache["drop"]
    return dx


def encode_sequence(inputs, weights, mask=None, max_len=None) -> EncoderOutput:
    """Encode one sequence ``(T, E)`` or a batch ``(B, T, E)``.

    Sequences longer than ``max_len`` are truncated.
    """
    x = np.asarray(inputs)
    if x.ndim == 2:
        x = x[None]
    if x.shape[1] == 0:
        raise DomainError("cannot encode an empty sequence")
    if max_len is not None and x.shape[1] > max_len:
        x = x[:, :max_len]
        if mask is not None:
            mask = mask[:, :max_len]
    if mask is None:
        mask = np.ones(x.shape[:2], dtype=x.dtype)
    out, _ = encode_forward(x, mask, weights)
    return out


# ---------------------------------------------------------------------------
# attention


def attention_keys(enc: EncoderOutput, att, key=None):
    """``W_enc @ h_i`` for every source position; cached on ``enc`` under ``key``."""
    if key is not None and enc.keys is not None and key in enc.keys:
        return enc.keys[key]
    W = att["W_enc"]
    if W.shape[1] != enc.states.shape[-1]:
        raise DimensionError(f"attention W_enc {W.shape} vs encoder states {enc.states.shape}")
    k = enc.states @ W.T
    if key is not None and enc.keys is not None:
        enc.keys[key] = k
    return k


def attend_forward(h_prev, keys, states, mask, att):
    """Additive attention.  Returns ``(context, weights, cache)``."""
    q = h_prev @ att["W_dec"].T + att["b"]                 # (B, A)
    act = np.tanh(keys + q[:, None, :])                     # (B, T, A)
    e = act @ att["v"]                                      # (B, T)
    e = np.where(mask > 0, e, -np.inf)
    e = e - e.max(axis=1, keepdims=True)
    w = np.exp(e)
    w /= w.sum(axis=1, keepdims=True)
    ctx = np.einsum("bt,btd->bd", w, states)
    return ctx, w, (h_prev, act, w)


def attend_backward(dctx, cache, states, att, grads, dstates, dkeys):
    """Backward through ``attend_forward``.

    Accumulates parameter gradients (except ``W_enc``, which is finished
    once per sequence from ``dkeys``), adds into ``dstates``/``dkeys`` in
    place and returns the gradient on ``h_prev``.
    """
    h_prev, act, w = cache
    dstates += w[:, :, None] * dctx[:, None, :]
    dw = np.einsum("bd,btd->bt", dctx, states)
    de = w * (dw - (w * dw).sum(axis=1, keepdims=True))
    _add(grads, "v", np.einsum("bt,bta->a", de, act))
    dpre = (de[:, :, None] * att["v"]) * (1 - act * act)   # (B, T, A)
    dkeys += dpre
    dq = dpre.sum(axis=1)
    _add(grads, "W_dec", dq.T @ h_prev)
    _add(grads, "b", dq.sum(axis=0))
    return dq @ att["W_dec"]


def attention_keys_backward(dkeys, states, att, grads):
    """Finish ``W_enc`` and return the extra gradient on encoder states."""
    _add(grads, "W_enc", np.einsum("bta,btd->ad", dkeys, states))
    return dkeys @ att["W_enc"]


def attend(dec_prev: LstmState, enc: EncoderOutput, att):
    """Context vector and attention weights for the previous decoder state."""
    h = np.atleast_2d(dec_prev.h)
    keys = attention_keys(enc, att)
    ctx, w, _ = attend_forward(h, keys, enc.states, enc.mask, att)
    if np.ndim(dec_prev.h) == 1:
        return ctx[0], w[0]
    return ctx, w


# ---------------------------------------------------------------------------
# decoder steps
#
# token decoder group: emb (V, E), W (4H, E + 2H + H), b, out_W (V, H), out_b (V,)
# frame decoder group:            W (4H, F + 2H + H), b, out_W (F, H), out_b (F,)


def _decoder_core(x_in, state, keys, states, mask, dec, att, rng, dropout):
    ctx, alpha, acache = attend_forward(state.h, keys, states, mask, att)
    x = np.concatenate([x_in, ctx], axis=-1)
    dt = x.dtype.type
    din = dropout_mask(rng, x.shape, dropout, dt)
    if din is not None:
        x = x * din
    h, c, lcache = lstm_forward(x, state.h, state.c, dec["W"], dec["b"])
    dout = dropout_mask(rng, h.shape, dropout, dt)
    hd = h * dout if dout is not None else h
    y = hd @ dec["out_W"].T + dec["out_b"]
    return LstmState(h, c), alpha, y, (acache, din, lcache, dout, hd)


def _decoder_core_backward(dy, dh_next, dc_next, cache, states, dec, att, gdec, gatt, dstates, dkeys):
    acache, din, lcache, dout, hd = cache
    _add(gdec, "out_W", dy.T @ hd)
    _add(gdec, "out_b", dy.sum(axis=0))
    dh = dy @ dec["out_W"]
    if dout is not None:
        dh = dh * dout
    dh = dh + dh_next
    dx, dh_prev, dc_prev = lstm_backward(dh, dc_next, lcache, dec["W"], gdec)
    if din is not None:
        dx = dx * din
    H2 = states.shape[-1]
    dx_in, dctx = dx[:, :-H2], dx[:, -H2:]
    dh_prev = dh_prev + attend_backward(dctx, acache, states, att, gatt, dstates, dkeys)
    return dx_in, dh_prev, dc_prev


def token_step_forward(prev_tokens, state, enc: EncoderOutput, keys, dec, att, rng=None, dropout=0.0):
    """Teacher-forced or free-running token step; emission is log-probabilities."""
    emb = dec["emb"][prev_tokens]
    new, alpha, logits, core = _decoder_core(emb, state, keys, enc.states, enc.mask, dec, att, rng, dropout)
    logp = log_softmax(logits)
    return DecoderStepOutput(new, alpha, logp), (prev_tokens, core, logp)


def token_step_backward(dlogits, dh_next, dc_next, cache, enc, dec, att, gdec, gatt, dstates, dkeys):
    """``dlogits`` is the gradient on the pre-softmax scores."""
    prev_tokens, core, _ = cache
    demb, dh, dc = _decoder_core_backward(dlogits, dh_next, dc_next, core, enc.states, dec, att,
                                          gdec, gatt, dstates, dkeys)
    g = gdec.get("emb")
    if g is None:
        g = gdec["emb"] = np.zeros_like(dec["emb"])
    np.add.at(g, prev_tokens, demb)
    return dh, dc


def frame_step_forward(prev_frame, state, enc: EncoderOutput, keys, dec, att, rng=None, dropout=0.0):
    """Frame-regression step; emission is the predicted feature vector."""
    new, alpha, pred, core = _decoder_core(prev_frame, state, keys, enc.states, enc.mask, dec, att, rng, dropout)
    return DecoderStepOutput(new, alpha, pred), core


def frame_step_backward(dpred, dh_next, dc_next, cache, enc, dec, att, gdec, gatt, dstates, dkeys):
    """Returns ``(dprev_frame, dh_prev, dc_prev)``."""
    return _decoder_core_backward(dpred, dh_next, dc_next, cache, enc.states, dec, att,
                                  gdec, gatt, dstates, dkeys)


def _as_batch(a):
    return np.atleast_2d(a)


def decode_step_token(prev_token_embedding, prev: LstmState, enc: EncoderOutput, dec, att) -> DecoderStepOutput:
    """One token step from an already embedded previous token (unbatched or batched)."""
    single = np.ndim(prev_token_embedding) == 1
    state = LstmState(_as_batch(prev.h), _as_batch(prev.c))
    keys = attention_keys(enc, att)
    new, alpha, logits, _ = _decoder_core(_as_batch(prev_token_embedding), state, keys,
                                          enc.states, enc.mask, dec, att, None, 0.0)
    out = DecoderStepOutput(new, alpha, log_softmax(logits))
    if single:
        out = DecoderStepOutput(LstmState(new.h[0], new.c[0]), alpha[0], out.emission[0])
    return out


def decode_step_frame(prev_frame_pred, prev: LstmState, enc: EncoderOutput, dec, att) -> DecoderStepOutput:
    single = np.ndim(prev_frame_pred) == 1
    state = LstmState(_as_batch(prev.h), _as_batch(prev.c))
    keys = attention_keys(enc, att)
    out, _ = frame_step_forward(_as_batch(prev_frame_pred), state, enc, keys, dec, att)
    if single:
        out = DecoderStepOutput(LstmState(out.state.h[0], out.state.c[0]),
                                out.attention_weights[0], out.emission[0])
    return out
