"""Tasks, parameter sharing, mixing-ratio scheduling and the three losses.

A model is a :class:`ParameterStore` (group id -> named arrays) plus a
:class:`SharingPlan` telling each task which group fills each slot.  Two
tasks mapped to the same group id literally use the same arrays, so an
update made while training one task is visible to the other.
"""
from __future__ import annotations

import enum
import logging
import zlib
from dataclasses import dataclass, field

import numpy as np

from . import network as nw
from .numerics import ContractError, DimensionError, DomainError, TRAIN_DTYPE

log = logging.getLogger(__name__)

PAD, BOS, EOS, UNK = 0, 1, 2, 3


class TaskKind(enum.Enum):
    CAPTIONING = "captioning"
    VIDEO_PREDICTION = "video_prediction"
    ENTAILMENT = "entailment"

    @property
    def visual_source(self):
        return self is not TaskKind.ENTAILMENT

    @property
    def emits_tokens(self):
        return self is not TaskKind.VIDEO_PREDICTION


TASK_ORDER = (TaskKind.CAPTIONING, TaskKind.VIDEO_PREDICTION, TaskKind.ENTAILMENT)

SLOTS = ("input_embedding", "encoder", "attention", "decoder")


def slot_role(task: TaskKind, slot: str) -> str:
    if slot == "input_embedding":
        return "visual_embedding" if task.visual_source else "token_embedding"
    if slot == "decoder":
        return "token_decoder" if task.emits_tokens else "frame_decoder"
    return slot


@dataclass(frozen=True)
class SharingPlan:
    """Per-slot maps from task to parameter group id."""
    input_embedding: dict
    encoder: dict
    attention: dict
    decoder: dict

    @classmethod
    def build(cls, share_encoder=True, share_decoder=True, share_attention=False):
        """Many-to-many by default; the flags give 1-to-M / M-to-1 / unshared variants."""
        C, V, E = TASK_ORDER
        emb = {C: "visual_embedding", V: "visual_embedding" if share_encoder else "prediction_embedding",
               E: "premise_embedding"}
        enc = {C: "video_encoder", V: "video_encoder" if share_encoder else "prediction_encoder",
               E: "premise_encoder"}
        dec = {C: "language_decoder", V: "frame_decoder",
               E: "language_decoder" if share_decoder else "entailment_decoder"}
        if share_attention:
            att = {C: "shared_attention", V: "shared_attention" if share_encoder else "prediction_attention",
                   E: "shared_attention" if share_decoder else "entailment_attention"}
        else:
            att = {C: "captioning_attention", V: "prediction_attention", E: "entailment_attention"}
        return cls(emb, enc, att, dec)

    def group(self, task: TaskKind, slot: str) -> str:
        return getattr(self, slot)[task]

    def groups_for(self, task: TaskKind) -> dict:
        return {slot: self.group(task, slot) for slot in SLOTS}

    def roles(self) -> dict:
        """Group id -> role; raises if one group is asked to play two roles."""
        out = {}
        for task in TASK_ORDER:
            for slot in SLOTS:
                gid, role = self.group(task, slot), slot_role(task, slot)
                if out.setdefault(gid, role) != role:
                    raise ContractError(f"group {gid!r} used as both {out[gid]} and {role}")
        return out

    def to_json(self):
        return {slot: {t.value: g for t, g in getattr(self, slot).items()} for slot in SLOTS}

    @classmethod
    def from_json(cls, obj):
        return cls(**{slot: {TaskKind(k): v for k, v in obj[slot].items()} for slot in SLOTS})


@dataclass(frozen=True)
class ModelDims:
    feat_dim: int
    vocab_size: int
    hidden: int = 64
    embed: int = 32
    att: int | None = None

    @property
    def att_size(self):
        return self.att or self.hidden


def group_shapes(role: str, d: ModelDims) -> dict:
    H, E, F, V, A = d.hidden, d.embed, d.feat_dim, d.vocab_size, d.att_size
    if role == "visual_embedding":
        return {"W": (E, F), "b": (E,)}
    if role == "token_embedding":
        return {"table": (V, E)}
    if role == "encoder":
        return {"fwd_W": (4 * H, E + H), "fwd_b": (4 * H,), "bwd_W": (4 * H, E + H), "bwd_b": (4 * H,),
                "bridge_h_W": (H, 2 * H), "bridge_h_b": (H,), "bridge_c_W": (H, 2 * H), "bridge_c_b": (H,)}
    if role == "attention":
        return {"W_enc": (A, 2 * H), "W_dec": (A, H), "b": (A,), "v": (A,)}
    if role == "token_decoder":
        return {"emb": (V, E), "W": (4 * H, E + 3 * H), "b": (4 * H,), "out_W": (V, H), "out_b": (V,)}
    if role == "frame_decoder":
        return {"W": (4 * H, F + 3 * H), "b": (4 * H,), "out_W": (F, H), "out_b": (F,)}
    raise ValueError(f"unknown group role {role!r}")


def is_bias(name: str) -> bool:
    return name == "b" or name.endswith("_b")


@dataclass
class ParameterStore:
    groups: dict = field(default_factory=dict)

    @classmethod
    def initialize(cls, plan: SharingPlan, dims: ModelDims, init_range: float, seed: int,
                   dtype=TRAIN_DTYPE):
        """Weights ~ U[-r, r], biases 0.

        Each group draws from its own stream keyed by (seed, group id), so
        a group's initial values do not depend on which other groups exist.
        """
        store = cls()
        for gid, role in sorted(plan.roles().items()):
            rng = np.random.default_rng([seed, zlib.crc32(gid.encode())])
            arrs = {}
            for name, shape in sorted(group_shapes(role, dims).items()):
                if is_bias(name):
                    arrs[name] = np.zeros(shape, dtype=dtype)
                else:
                    arrs[name] = rng.uniform(-init_range, init_range, size=shape).astype(dtype)
            store.groups[gid] = arrs
        return store

    def __getitem__(self, gid):
        return self.groups[gid]

    def astype(self, dtype):
        return ParameterStore({g: {n: a.astype(dtype) for n, a in arrs.items()}
                               for g, arrs in self.groups.items()})

    def copy(self):
        return ParameterStore({g: {n: a.copy() for n, a in arrs.items()} for g, arrs in self.groups.items()})

    def items(self):
        for g in sorted(self.groups):
            for n in sorted(self.groups[g]):
                yield g, n, self.groups[g][n]

    def equal(self, other) -> bool:
        keys = [(g, n) for g, n, _ in self.items()]
        if keys != [(g, n) for g, n, _ in other.items()]:
            return False
        return all(np.array_equal(self.groups[g][n], other.groups[g][n]) for g, n in keys)

    def size(self):
        return sum(a.size for _, _, a in self.items())


# ---------------------------------------------------------------------------
# scheduling


@dataclass(frozen=True)
class MixingRatio:
    captioning: int
    video_prediction: int = 0
    entailment: int = 0

    def __post_init__(self):
        vals = (self.captioning, self.video_prediction, self.entailment)
        if any(int(v) != v or v < 0 for v in vals):
            raise DomainError(f"mixing ratio entries must be nonnegative integers, got {vals}")
        if sum(vals) < 1:
            raise DomainError("mixing ratio must have at least one nonzero entry")

    @classmethod
    def parse(cls, text: str):
        try:
            parts = [int(p) for p in str(text).replace(",", ":").split(":")]
        except ValueError:
            raise DomainError(f"bad mixing ratio {text!r}") from None
        if not 1 <= len(parts) <= 3:
            raise DomainError(f"bad mixing ratio {text!r}")
        return cls(*parts)

    @property
    def counts(self):
        return (self.captioning, self.video_prediction, self.entailment)

    @property
    def cycle(self):
        return sum(self.counts)

    def __str__(self):
        return ":".join(str(c) for c in self.counts)


def next_task(position: int, ratio: MixingRatio):
    """Task for schedule ``position`` and the following position.

    Within each cycle all captioning batches come first, then video
    prediction, then entailment.
    """
    if sum(ratio.counts) < 1:
        raise DomainError("all-zero mixing ratio")
    r = position % ratio.cycle
    for kind, n in zip(TASK_ORDER, ratio.counts):
        if r < n:
            return kind, position + 1
        r -= n
    raise AssertionError("unreachable")


class Scheduler:
    def __init__(self, ratio: MixingRatio, position: int = 0):
        self.ratio = ratio
        self.position = position

    def __next__(self):
        kind, self.position = next_task(self.position, self.ratio)
        return kind

    def __iter__(self):
        return self


class EpochIterator:
    """Endless shuffled mini-batches of indices; reshuffles on each pass."""

    def __init__(self, n: int, batch_size: int, rng: np.random.Generator):
        if n < 1:
            raise DomainError("cannot iterate over an empty dataset")
        self.n, self.batch_size, self.rng = n, batch_size, rng
        self.epoch = 0
        self._order = self.rng.permutation(n)
        self._pos = 0

    def __iter__(self):
        return self

    def __next__(self):
        if self._pos >= self.n:
            self.epoch += 1
            self._order = self.rng.permutation(self.n)
            self._pos = 0
        idx = self._order[self._pos:self._pos + self.batch_size]
        self._pos += self.batch_size
        return idx


# ---------------------------------------------------------------------------
# batches


@dataclass
class TaskBatch:
    kind: TaskKind
    sources: np.ndarray          # (B, T, F) features or (B, T) token ids
    src_mask: np.ndarray         # (B, T)
    targets: np.ndarray          # (B, L) token ids or (B, P, F) frames
    tgt_mask: np.ndarray         # (B, L) / (B, P)
    dec_inputs: np.ndarray | None = None   # (B, L) previous tokens (token tasks)
    seed_frames: np.ndarray | None = None  # (B, F) first frame-decoder input
    skipped: int = 0

    @property
    def size(self):
        return self.sources.shape[0]

    def check(self):
        if self.kind.visual_source != (self.sources.ndim == 3):
            raise ContractError(f"{self.kind.value} batch has sources of shape {self.sources.shape}")
        if self.kind.emits_tokens != (self.targets.ndim == 2):
            raise ContractError(f"{self.kind.value} batch has targets of shape {self.targets.shape}")


def _pad_frames(clips, dim):
    T = max(len(c) for c in clips)
    out = np.zeros((len(clips), T, dim), dtype=np.float64)
    mask = np.zeros((len(clips), T), dtype=np.float64)
    for i, c in enumerate(clips):
        out[i, :len(c)] = c
        mask[i, :len(c)] = 1
    return out, mask


def _pad_ids(seqs):
    T = max(max(len(s) for s in seqs), 1)
    out = np.full((len(seqs), T), PAD, dtype=np.int64)
    mask = np.zeros((len(seqs), T), dtype=np.float64)
    for i, s in enumerate(seqs):
        out[i, :len(s)] = s
        mask[i, :len(s)] = 1
    return out, mask


def _targets(token_seqs, max_len):
    # decoder sees BOS w1..wm and must emit w1..wm EOS; capped at max_len steps
    dec_in = [([BOS] + list(s))[:max_len] for s in token_seqs]
    dec_out = [(list(s) + [EOS])[:max_len] for s in token_seqs]
    di, _ = _pad_ids(dec_in)
    do, mask = _pad_ids(dec_out)
    return di, do, mask


def _check_source_len(n):
    if n == 0:
        raise DomainError("empty source sequence")


def caption_batch(features, captions, visual_cap=50, text_cap=30):
    """``features``: list of ``(n_i, F)`` arrays; ``captions``: list of id lists."""
    if len(features) != len(captions):
        raise ContractError("features and captions differ in length")
    for f in features:
        _check_source_len(len(f))
    dim = np.asarray(features[0]).shape[1]
    src, smask = _pad_frames([np.asarray(f)[:visual_cap] for f in features], dim)
    di, do, tmask = _targets(captions, text_cap)
    return TaskBatch(TaskKind.CAPTIONING, src, smask, do, tmask, dec_inputs=di)


def entailment_batch(premises, hypotheses, text_cap=30):
    if len(premises) != len(hypotheses):
        raise ContractError("premises and hypotheses differ in length")
    for p in premises:
        _check_source_len(len(p))
    src, smask = _pad_ids([list(p)[:text_cap] for p in premises])
    di, do, tmask = _targets(hypotheses, text_cap)
    return TaskBatch(TaskKind.ENTAILMENT, src, smask, do, tmask, dec_inputs=di)


def split_point(n: int, encode_fraction: float) -> int:
    """Number of frames given to the encoder for a clip of ``n`` frames."""
    if not 0 < encode_fraction < 1:
        raise DomainError(f"encode_fraction must lie in (0, 1), got {encode_fraction}")
    if n < 2:
        raise DomainError(f"cannot split a clip of {n} frame(s)")
    return min(max(1, int(np.floor(encode_fraction * n))), n - 1)


def prediction_batch(clips, encode_fraction=0.8, visual_cap=50):
    """Split each clip into observed/future frames.

    Clips shorter than two frames cannot be split and are skipped; the
    count is kept on ``batch.skipped``.  Returns ``None`` if nothing is left.
    """
    kept, skipped = [], 0
    for c in clips:
        c = np.asarray(c)[:visual_cap]
        if len(c) < 2:
            skipped += 1
            continue
        kept.append(c)
    if skipped:
        log.warning("skipped %d clip(s) shorter than 2 frames", skipped)
    if not kept:
        return None
    dim = kept[0].shape[1]
    ks = [split_point(len(c), encode_fraction) for c in kept]
    src, smask = _pad_frames([c[:k] for c, k in zip(kept, ks)], dim)
    tgt, tmask = _pad_frames([c[k:] for c, k in zip(kept, ks)], dim)
    seed = np.stack([c[k - 1] for c, k in zip(kept, ks)])
    return TaskBatch(TaskKind.VIDEO_PREDICTION, src, smask, tgt, tmask, seed_frames=seed, skipped=skipped)


# ---------------------------------------------------------------------------
# forward / backward


@dataclass
class ForwardCache:
    """Everything the backward pass needs from one forward pass."""
    batch_id: int
    kind: TaskKind
    src_emb_in: np.ndarray
    enc: nw.EncoderOutput
    enc_cache: dict
    keys: np.ndarray
    steps: list
    emissions: np.ndarray


def _resolve(params: ParameterStore, plan: SharingPlan, kind: TaskKind):
    g = plan.groups_for(kind)
    return g, {slot: params.groups[gid] for slot, gid in g.items()}


def embed_sources(batch: TaskBatch, emb, dtype):
    if batch.kind.visual_source:
        x = batch.sources.astype(dtype, copy=False)
        if x.shape[-1] != emb["W"].shape[1]:
            raise DimensionError(f"feature dim {x.shape[-1]} vs visual embedding {emb['W'].shape}")
        return x, x @ emb["W"].T + emb["b"]
    return batch.sources, emb["table"][batch.sources]


def encode(batch: TaskBatch, w: dict, rng=None, dropout=0.0):
    dtype = w["encoder"]["fwd_W"].dtype
    raw, x = embed_sources(batch, w["input_embedding"], dtype)
    enc, ecache = nw.encode_forward(x, batch.src_mask.astype(dtype), w["encoder"], rng, dropout)
    return raw, enc, ecache


def forward(batch: TaskBatch, params: ParameterStore, plan: SharingPlan, rng=None, dropout=0.0):
    """Teacher-forced (token tasks) or autoregressive (frames) forward pass."""
    batch.check()
    _, w = _resolve(params, plan, batch.kind)
    raw, enc, ecache = encode(batch, w, rng, dropout)
    dec, att = w["decoder"], w["attention"]
    keys = enc.states @ att["W_enc"].T
    state = enc.final
    steps, emissions = [], []
    if batch.kind.emits_tokens:
        for t in range(batch.dec_inputs.shape[1]):
            out, cache = nw.token_step_forward(batch.dec_inputs[:, t], state, enc, keys, dec, att, rng, dropout)
            steps.append(cache)
            emissions.append(out.emission)
            state = out.state
    else:
        prev = batch.seed_frames.astype(keys.dtype)
        for t in range(batch.targets.shape[1]):
            out, cache = nw.frame_step_forward(prev, state, enc, keys, dec, att, rng, dropout)
            steps.append(cache)
            emissions.append(out.emission)
            state = out.state
            prev = out.emission
    return ForwardCache(id(batch), batch.kind, raw, enc, ecache, keys, steps, np.stack(emissions, axis=1))


def loss_and_step_grads(batch: TaskBatch, fc: ForwardCache):
    """Per-token / per-frame normalized loss and its gradient at each emission."""
    if batch.kind.emits_tokens:
        logp = fc.emissions                                  # (B, L, V)
        mask = batch.tgt_mask.astype(logp.dtype)
        n = max(mask.sum(), 1.0)
        picked = np.take_along_axis(logp, batch.targets[:, :, None], axis=2)[:, :, 0]
        loss = -(picked * mask).sum() / n
        d = np.exp(logp)
        np.put_along_axis(d, batch.targets[:, :, None],
                          np.take_along_axis(d, batch.targets[:, :, None], axis=2) - 1, axis=2)
        d *= (mask / n)[:, :, None]
        return loss, d
    pred = fc.emissions                                      # (B, P, F)
    mask = batch.tgt_mask.astype(pred.dtype)
    n = max(mask.sum(), 1.0)
    diff = (pred - batch.targets.astype(pred.dtype)) * mask[:, :, None]
    loss = (diff * diff).sum() / n
    return loss, 2.0 * diff / n


def backprop_through_time(step_grads, fc: ForwardCache, batch: TaskBatch, params: ParameterStore,
                          plan: SharingPlan, grads=None):
    """Accumulate parameter gradients from per-step emission gradients.

    Gradients land under the group ids of ``plan`` so shared groups
    collect contributions from every task that uses them.
    """
    if fc.batch_id != id(batch) or fc.kind is not batch.kind or len(fc.steps) != step_grads.shape[1]:
        raise ContractError("forward cache does not belong to this batch")
    gids, w = _resolve(params, plan, batch.kind)
    grads = {} if grads is None else grads
    g = {slot: grads.setdefault(gid, {}) for slot, gid in gids.items()}
    dec, att, enc = w["decoder"], w["attention"], fc.enc
    gatt = {}
    dstates = np.zeros_like(enc.states)
    dkeys = np.zeros_like(fc.keys)
    B, H = enc.final.h.shape
    dh = np.zeros((B, H), enc.states.dtype)
    dc = np.zeros_like(dh)
    if batch.kind.emits_tokens:
        for t in range(len(fc.steps) - 1, -1, -1):
            dh, dc = nw.token_step_backward(step_grads[:, t], dh, dc, fc.steps[t], enc, dec, att,
                                            g["decoder"], gatt, dstates, dkeys)
    else:
        dprev = np.zeros_like(step_grads[:, 0])
        for t in range(len(fc.steps) - 1, -1, -1):
            dprev, dh, dc = nw.frame_step_backward(step_grads[:, t] + dprev, dh, dc, fc.steps[t], enc, dec, att,
                                                   g["decoder"], gatt, dstates, dkeys)
    dstates += nw.attention_keys_backward(dkeys, enc.states, att, gatt)
    for k, v in gatt.items():
        nw._add(g["attention"], k, v)
    dx = nw.encode_backward(dstates, dh, dc, fc.enc_cache, w["encoder"], g["encoder"])
    ge = g["input_embedding"]
    if batch.kind.visual_source:
        raw = fc.src_emb_in
        nw._add(ge, "W", np.einsum("bte,btf->ef", dx, raw))
        nw._add(ge, "b", dx.sum(axis=(0, 1)))
    else:
        table = ge.get("table")
        if table is None:
            table = ge["table"] = np.zeros_like(w["input_embedding"]["table"])
        np.add.at(table, fc.src_emb_in, dx)
    return grads


def task_loss(batch: TaskBatch, params: ParameterStore, plan: SharingPlan, rng=None, dropout=0.0,
              with_grads=True):
    """Loss and gradients (group id -> name -> array) for one batch of any task."""
    fc = forward(batch, params, plan, rng, dropout)
    loss, d = loss_and_step_grads(batch, fc)
    if not with_grads:
        return loss, {}
    return loss, backprop_through_time(d, fc, batch, params, plan)


def _expect(batch, kind):
    if batch.kind is not kind:
        raise ContractError(f"expected a {kind.value} batch, got {batch.kind.value}")


def captioning_loss(batch, params, plan, rng=None, dropout=0.0):
    _expect(batch, TaskKind.CAPTIONING)
    return task_loss(batch, params, plan, rng, dropout)


def video_prediction_loss(batch, params, plan, rng=None, dropout=0.0):
    _expect(batch, TaskKind.VIDEO_PREDICTION)
    return task_loss(batch, params, plan, rng, dropout)


def entailment_loss(batch, params, plan, rng=None, dropout=0.0):
    _expect(batch, TaskKind.ENTAILMENT)
    return task_loss(batch, params, plan, rng, dropout)
