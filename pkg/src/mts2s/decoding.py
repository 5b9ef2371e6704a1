"""Greedy, beam and ensemble decoding for the token decoders, and
autoregressive rollout for the frame decoder.

Decoders take a list of models.  Each step averages the members'
probability distributions; a single model is simply a list of one.
Token ties are broken towards the lowest vocabulary index.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import multitask as mt
from . import network as nw
from .multitask import BOS, EOS, TaskKind
from .numerics import ContractError, DomainError


class Model:
    """A parameter store viewed through one task's slots of a sharing plan."""

    def __init__(self, params, plan, kind: TaskKind = TaskKind.CAPTIONING):
        self.params, self.plan, self.kind = params, plan, kind
        _, self.w = mt._resolve(params, plan, kind)

    @property
    def vocab_size(self):
        if not self.kind.emits_tokens:
            raise ContractError(f"{self.kind.value} model does not emit tokens")
        return self.w["decoder"]["out_b"].shape[0]

    @property
    def dtype(self):
        return self.w["encoder"]["fwd_W"].dtype

    def encode(self, sources, cap: int | None = None):
        """Encode a list of sources (frame arrays or token-id lists).

        Each source is run through the encoder on its own, so its encoding
        does not depend on what else is in the list.
        """
        if len(sources) == 0:
            raise DomainError("no sources to encode")
        states, keys, h, c = [], [], [], []
        for src in sources:
            enc = self._encode_one(src, cap)
            states.append(enc.states)
            keys.append(enc.states @ self.w["attention"]["W_enc"].T)
            h.append(enc.final.h)
            c.append(enc.final.c)
        return _Encoded(states, keys, np.concatenate(h), np.concatenate(c))

    def _encode_one(self, src, cap):
        if self.kind.visual_source:
            seq = np.asarray(src)[:cap] if cap else np.asarray(src)
            if len(seq) == 0:
                raise DomainError("cannot encode an empty clip")
            x, mask = mt._pad_frames([seq], seq.shape[1])
        else:
            seq = list(src)[:cap] if cap else list(src)
            if len(seq) == 0:
                raise DomainError("cannot encode an empty sentence")
            x, mask = mt._pad_ids([seq])
        dummy = np.zeros((1, 1), dtype=np.int64)
        batch = mt.TaskBatch(self.kind, x, mask, dummy, dummy.astype(float))
        _, enc, _ = mt.encode(batch, self.w)
        return enc

    def step(self, encoded: "_Encoded", rows, state: nw.LstmState, prev_tokens):
        """Log-probabilities for hypotheses ``rows`` (indices into the
        encoded sources) given their states and previous tokens.

        Rows are evaluated one at a time: a matrix product over several
        rows can round differently from the same product on one row, and
        a hypothesis should score the same whatever beam it sits in.
        """
        prev_tokens = np.asarray(prev_tokens)
        logps, hs, cs = [], [], []
        for i, r in enumerate(np.asarray(rows)):
            states = encoded.states[r]
            sub = nw.EncoderOutput(states, np.ones(states.shape[:2], dtype=states.dtype), None)
            out, _ = nw.token_step_forward(prev_tokens[i:i + 1], nw.LstmState(state.h[i:i + 1], state.c[i:i + 1]),
                                           sub, encoded.keys[r], self.w["decoder"], self.w["attention"])
            logps.append(out.emission)
            hs.append(out.state.h)
            cs.append(out.state.c)
        return np.concatenate(logps), nw.LstmState(np.concatenate(hs), np.concatenate(cs))


@dataclass
class _Encoded:
    states: list          # per source (1, T_i, 2H)
    keys: list            # per source (1, T_i, A)
    h: np.ndarray         # (n, H) initial decoder state
    c: np.ndarray

    def initial(self, rows):
        return nw.LstmState(self.h[rows], self.c[rows])


def _take(state: nw.LstmState, idx):
    return nw.LstmState(state.h[idx], state.c[idx])


def _check_vocab(models):
    if not models:
        raise DomainError("need at least one model")
    sizes = {m.vocab_size for m in models}
    if len(sizes) != 1:
        raise ContractError(f"ensemble members disagree on vocabulary size: {sorted(sizes)}")
    return sizes.pop()


def mean_distribution(dists):
    """Arithmetic mean of probability rows, written as ``p0 + mean(p_i - p0)``
    so that identical members reproduce ``p0`` exactly."""
    p0 = dists[0]
    if len(dists) == 1:
        return p0
    acc = np.zeros_like(p0)
    for p in dists[1:]:
        acc += p - p0
    return p0 + acc / len(dists)


def ensemble_step_distribution(models, encoded, rows, states, prev_tokens):
    """Mean next-token distribution over ``models``.

    ``encoded`` and ``states`` are per-model lists.  Returns the averaged
    probabilities ``(n, V)`` and the members' new states.
    """
    _check_vocab(models)
    dists, new = [], []
    for m, e, s in zip(models, encoded, states):
        logp, st = m.step(e, rows, s, prev_tokens)
        dists.append(np.exp(logp))
        new.append(st)
    return mean_distribution(dists), new


def _log(p):
    with np.errstate(divide="ignore"):
        return np.log(p)


def greedy_decode(models, sources, max_len: int = 30, cap: int | None = 50):
    """Argmax decoding of every source in one batch; returns token-id lists
    without the end-of-sequence token."""
    if max_len < 1:
        raise DomainError("max_len must be at least 1")
    _check_vocab(models)
    n = len(sources)
    encoded = [m.encode(sources, cap) for m in models]
    rows = np.arange(n)
    states = [e.initial(rows) for e in encoded]
    prev = np.full(n, BOS, dtype=np.int64)
    out = [[] for _ in range(n)]
    alive = np.ones(n, dtype=bool)
    for _ in range(max_len):
        idx = np.flatnonzero(alive)
        if idx.size == 0:
            break
        p, new = ensemble_step_distribution(models, encoded, rows[idx],
                                            [_take(s, idx) for s in states], prev[idx])
        tok = np.argmax(p, axis=1)
        for s, ns in zip(states, new):
            s.h[idx], s.c[idx] = ns.h, ns.c
        prev[idx] = tok
        for i, t in zip(idx, tok):
            if t == EOS:
                alive[i] = False
            else:
                out[i].append(int(t))
    return out


@dataclass
class BeamHypothesis:
    tokens: list
    log_prob: float
    state: object = None
    finished: bool = False

    def score(self, length_norm: bool = False):
        if length_norm:
            return self.log_prob / max(len(self.tokens), 1)
        return self.log_prob

    @property
    def output(self):
        """Tokens without the trailing end-of-sequence marker."""
        return self.tokens[:-1] if self.finished else list(self.tokens)


def _top(scores, k):
    # stable sort on the negated scores: equal scores keep index order
    order = np.argsort(-scores, kind="stable")
    return order[:k]


def beam_decode(models, source, width: int = 5, max_len: int = 30, cap: int | None = 50,
                length_norm: bool = False) -> list:
    """Beam search over one source.

    Each step extends every live hypothesis by its ``width`` best tokens,
    keeps the global top ``width`` by total log-probability and retires
    those ending in end-of-sequence to a pool.  Returns the pool plus any
    still-live hypotheses, best first.
    """
    if width < 1:
        raise DomainError(f"beam width must be at least 1, got {width}")
    if max_len < 1:
        raise DomainError("max_len must be at least 1")
    V = _check_vocab(models)
    encoded = [m.encode([source], cap) for m in models]
    zero = np.zeros(1, dtype=np.int64)
    live = [BeamHypothesis([], 0.0, [e.initial(zero) for e in encoded])]
    pool = []
    for _ in range(max_len):
        if not live:
            break
        n = len(live)
        rows = np.zeros(n, dtype=np.int64)
        states = [nw.LstmState(np.concatenate([h.state[j].h for h in live]),
                               np.concatenate([h.state[j].c for h in live])) for j in range(len(models))]
        prev = np.array([h.tokens[-1] if h.tokens else BOS for h in live], dtype=np.int64)
        p, new = ensemble_step_distribution(models, encoded, rows, states, prev)
        logp = _log(p)
        base = np.array([h.log_prob for h in live])
        cand_tok = np.stack([_top(p[i], width) for i in range(n)])                # (n, width)
        cand_score = base[:, None] + np.take_along_axis(logp, cand_tok, axis=1)
        flat = cand_score.reshape(-1)
        if length_norm:
            lens = np.array([len(h.tokens) + 1 for h in live], dtype=float)
            rank = (cand_score / lens[:, None]).reshape(-1)
        else:
            rank = flat
        nxt = []
        for f in _top(rank, width):
            i, j = divmod(int(f), width)
            tok = int(cand_tok[i, j])
            if not np.isfinite(flat[f]):
                continue
            st = [nw.LstmState(s.h[i:i + 1], s.c[i:i + 1]) for s in new]
            hyp = BeamHypothesis(live[i].tokens + [tok], float(flat[f]), st, tok == EOS)
            (pool if hyp.finished else nxt).append(hyp)
        live = nxt
    ranked = pool + live
    ranked.sort(key=lambda h: -h.score(length_norm))
    if V and not ranked:
        raise ContractError("beam search produced no hypotheses")
    return ranked


def beam_decode_batch(models, sources, width=5, max_len=30, cap=50, length_norm=False):
    """Best beam output (token ids, end marker removed) for each source."""
    return [beam_decode(models, s, width, max_len, cap, length_norm)[0].output for s in sources]


def sequence_log_prob(models, source, tokens, cap: int | None = 50) -> float:
    """Total log-probability the (ensemble) model assigns to ``tokens``."""
    _check_vocab(models)
    encoded = [m.encode([source], cap) for m in models]
    rows = np.zeros(1, dtype=np.int64)
    states = [e.initial(rows) for e in encoded]
    prev, total = BOS, 0.0
    for t in tokens:
        p, states = ensemble_step_distribution(models, encoded, rows, states, np.array([prev]))
        total += float(_log(p[0, t]))
        prev = t
    return total


def rollout_frames(params, plan, frames, horizon: int, cap: int | None = 50):
    """Predict ``horizon`` frames after the observed ``frames``, feeding each
    prediction back in.  The first decoder input is the last observed frame."""
    if horizon < 1:
        raise DomainError("horizon must be at least 1")
    frames = np.asarray(frames)
    if frames.ndim != 2 or len(frames) == 0:
        raise DomainError("need a non-empty (n_frames, feat_dim) array")
    model = Model(params, plan, TaskKind.VIDEO_PREDICTION)
    e = model.encode([frames], cap)
    states, keys = e.states[0], e.keys[0]
    enc = nw.EncoderOutput(states, np.ones(states.shape[:2], dtype=states.dtype), None)
    w = model.w
    state = e.initial([0])
    prev = frames[-1:].astype(model.dtype)
    out = []
    for _ in range(horizon):
        step, _ = nw.frame_step_forward(prev, state, enc, keys, w["decoder"], w["attention"])
        state, prev = step.state, step.emission
        out.append(prev[0])
    return np.stack(out)
