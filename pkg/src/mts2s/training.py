"""Adam, dropout, initialization, the multi-task training loop,
checkpoint files and multi-seed ensembles."""
from __future__ import annotations

import copy
import json
import logging
import struct
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import decoding
from . import metrics as mx
from . import multitask as mt
from .multitask import MixingRatio, ModelDims, ParameterStore, SharingPlan, TaskKind
from .numerics import TRAIN_DTYPE, ContractError, DomainError

log = logging.getLogger(__name__)

MAGIC = b"MTS2S1\0"


class TrainingDiverged(ArithmeticError):
    """The loss became NaN or infinite."""


# ---------------------------------------------------------------------------
# configuration


@dataclass
class TrainConfig:
    hidden: int = 64
    embed: int = 32
    attention: int | None = None
    visual_cap: int = 50
    text_cap: int = 30
    dropout: float = 0.0
    learning_rate: float = 1e-3
    init_range: float = 0.05
    batch_size: int = 16
    ratio: str = "1:0:0"
    encode_fraction: float = 0.8
    max_updates: int = 1000
    val_interval: int = 100
    seed: int = 0
    clip_norm: float | None = 5.0
    share_encoder: bool = True
    share_decoder: bool = True
    share_attention: bool = False
    max_decode_len: int = 30

    def __post_init__(self):
        self.validate()

    def validate(self):
        for name in ("hidden", "embed", "visual_cap", "text_cap", "batch_size", "val_interval"):
            if getattr(self, name) < 1:
                raise DomainError(f"{name} must be positive, got {getattr(self, name)}")
        if self.max_updates < 0:
            raise DomainError("max_updates must be nonnegative")
        if not 0.0 <= self.dropout < 1.0:
            raise DomainError(f"dropout must lie in [0, 1), got {self.dropout}")
        if self.learning_rate <= 0 or self.init_range < 0:
            raise DomainError("learning_rate must be positive and init_range nonnegative")
        if not 0.0 < self.encode_fraction < 1.0:
            raise DomainError("encode_fraction must lie in (0, 1)")
        self.mixing_ratio()

    def mixing_ratio(self) -> MixingRatio:
        return MixingRatio.parse(self.ratio)

    def plan(self) -> SharingPlan:
        return SharingPlan.build(self.share_encoder, self.share_decoder, self.share_attention)

    def dims(self, feat_dim: int, vocab_size: int) -> ModelDims:
        return ModelDims(feat_dim, vocab_size, self.hidden, self.embed, self.attention)

    def replace(self, **kw) -> "TrainConfig":
        return TrainConfig(**{**asdict(self), **kw})

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name: f for f in fields(cls)}
        bad = sorted(set(d) - set(known))
        if bad:
            raise DomainError(f"unknown config keys: {', '.join(bad)}")
        return cls(**d)


PROFILES = {
    "desk": {},
    # full-size settings: 1024 hidden, 512 embeddings, dropout 0.5, lr 1e-4,
    # batch 32, 100:100:50 mixing; init keeps the [-0.05, 0.05] default
    # (entailment-first runs use 0.08 via --set init_range=0.08)
    "paper": dict(hidden=1024, embed=512, dropout=0.5, learning_rate=1e-4, batch_size=32,
                  ratio="100:100:50"),
}


def profile(name: str, **overrides) -> TrainConfig:
    if name not in PROFILES:
        raise DomainError(f"unknown profile {name!r}; choose from {sorted(PROFILES)}")
    return TrainConfig(**{**PROFILES[name], **overrides})


def parse_config_file(path) -> dict:
    """``key = value`` lines; ``#`` starts a comment.  Values are read as
    JSON when possible (numbers, true/false, null) and as strings otherwise."""
    out = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise DomainError(f"{path}:{lineno}: expected key = value")
        key, val = (s.strip() for s in line.split("=", 1))
        out[key] = parse_value(val)
    return out


def parse_value(val: str):
    try:
        return json.loads(val)
    except json.JSONDecodeError:
        return val


# ---------------------------------------------------------------------------
# parameters, dropout, Adam


def init_parameters(config: TrainConfig, feat_dim: int, vocab_size: int, seed: int | None = None,
                    plan: SharingPlan | None = None) -> ParameterStore:
    """Weights uniform in ``[-init_range, init_range]``, biases zero."""
    plan = config.plan() if plan is None else plan
    seed = config.seed if seed is None else seed
    return ParameterStore.initialize(plan, config.dims(feat_dim, vocab_size), config.init_range, seed,
                                     dtype=TRAIN_DTYPE)


def apply_dropout(x, rate: float, train: bool, rng: np.random.Generator | None = None):
    """Inverted dropout: in training mode zero each entry with probability
    ``rate`` and scale survivors by ``1 / (1 - rate)``; identity otherwise."""
    if not 0.0 <= rate < 1.0:
        raise DomainError(f"dropout rate must lie in [0, 1), got {rate}")
    if not train or rate == 0.0:
        return x
    if rng is None:
        raise ContractError("training-mode dropout needs a random generator")
    keep = 1.0 - rate
    mask = rng.random(np.shape(x)) < keep
    return np.where(mask, x / np.asarray(keep, dtype=np.asarray(x).dtype), 0).astype(np.asarray(x).dtype)


@dataclass
class OptimizerState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: ParameterStore, lr: float, **kw):
        zeros = {g: {n: np.zeros_like(a) for n, a in d.items()} for g, d in params.groups.items()}
        return cls(zeros, copy.deepcopy(zeros), 0, lr, **kw)

    def copy(self):
        return copy.deepcopy(self)


def _check_aligned(params: ParameterStore, grads):
    for gid, d in grads.items():
        if gid not in params.groups:
            raise ContractError(f"gradient for unknown group {gid!r}")
        for name, g in d.items():
            p = params.groups[gid].get(name)
            if p is None:
                raise ContractError(f"gradient for unknown parameter {gid}/{name}")
            if g.shape != p.shape:
                raise ContractError(f"gradient {gid}/{name} has shape {g.shape}, parameter {p.shape}")


def global_norm(grads) -> float:
    return float(np.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64)))
                             for d in grads.values() for g in d.values())))


def clip_gradients(grads, max_norm: float | None):
    """Scale all gradients by one common factor so the global norm is at
    most ``max_norm``.  Returns the norm before clipping."""
    norm = global_norm(grads)
    if max_norm and norm > max_norm:
        s = max_norm / norm
        for d in grads.values():
            for name in d:
                d[name] = d[name] * d[name].dtype.type(s)
    return norm


def adam_step(params: ParameterStore, grads, opt: OptimizerState):
    """One Adam update in place.

    Only arrays that appear in ``grads`` move: a batch of one task leaves
    the groups it does not use (and their moments) untouched.  ``t``
    advances on every call.
    """
    _check_aligned(params, grads)
    opt.t += 1
    t = opt.t
    c1 = 1.0 - opt.beta1 ** t
    c2 = 1.0 - opt.beta2 ** t
    for gid in sorted(grads):
        for name in sorted(grads[gid]):
            p = params.groups[gid][name]
            g = grads[gid][name]
            m = opt.m.setdefault(gid, {}).setdefault(name, np.zeros_like(p))
            v = opt.v.setdefault(gid, {}).setdefault(name, np.zeros_like(p))
            dt = p.dtype.type
            m *= dt(opt.beta1)
            m += dt(1.0 - opt.beta1) * g
            v *= dt(opt.beta2)
            v += dt(1.0 - opt.beta2) * g * g
            p -= dt(opt.lr) * (m / dt(c1)) / (np.sqrt(v / dt(c2)) + dt(opt.eps))
    return params, opt


# ---------------------------------------------------------------------------
# data handed to the trainer


@dataclass
class TrainData:
    """Everything ``train`` needs, already mapped to token ids.

    ``captions`` holds (features, token ids) training pairs; ``val_features``
    and ``val_refs`` (lists of token-id lists) drive model selection.
    """
    feat_dim: int
    vocab: object
    captions: list
    val_features: list
    val_refs: list
    clips: list = field(default_factory=list)
    pairs: list = field(default_factory=list)

    @property
    def vocab_size(self):
        return len(self.vocab)


def _batch_source(kind: TaskKind, data: TrainData, cfg: TrainConfig, rng):
    if kind is TaskKind.CAPTIONING:
        items = data.captions
        build = lambda sel: mt.caption_batch([s[0] for s in sel], [s[1] for s in sel],
                                             cfg.visual_cap, cfg.text_cap)
    elif kind is TaskKind.VIDEO_PREDICTION:
        items = data.clips
        build = lambda sel: mt.prediction_batch(sel, cfg.encode_fraction, cfg.visual_cap)
    else:
        items = data.pairs
        build = lambda sel: mt.entailment_batch([s[0] for s in sel], [s[1] for s in sel], cfg.text_cap)
    if not items:
        raise ContractError(f"the mixing ratio schedules {kind.value} but its dataset is empty")
    it = mt.EpochIterator(len(items), cfg.batch_size, rng)

    def nxt():
        while True:
            b = build([items[i] for i in next(it)])
            if b is not None:
                return b
    return nxt


def _tokens_to_ref(ids):
    out = []
    for i in ids:
        if i == mt.EOS:
            break
        if i not in (mt.PAD, mt.BOS):
            out.append(int(i))
    return out


def validate(params, plan, features, refs, cfg: TrainConfig) -> mx.MetricReport:
    model = decoding.Model(params, plan)
    hyps = decoding.greedy_decode([model], features, cfg.max_decode_len, cfg.visual_cap)
    return mx.evaluate(hyps, [[_tokens_to_ref(r) for r in rs] for rs in refs])


@dataclass
class Checkpoint:
    params: ParameterStore
    opt: OptimizerState
    config: TrainConfig
    plan: SharingPlan
    dims: ModelDims
    vocab: object = None
    update: int = 0
    scores: dict = field(default_factory=dict)

    def model(self) -> "decoding.Model":
        return decoding.Model(self.params, self.plan)


@dataclass
class TrainResult:
    best: Checkpoint
    final: Checkpoint
    history: list        # validation records
    seconds: float


def train(cfg: TrainConfig, data: TrainData, plan: SharingPlan | None = None, log_path=None,
          params: ParameterStore | None = None) -> TrainResult:
    """Alternate mini-batches of the scheduled tasks with Adam.

    Every ``val_interval`` updates (and after the last one) the captioning
    validation set is decoded greedily and scored; the checkpoint with the
    highest mean of BLEU-4, ROUGE-L and CIDEr-D is kept.
    """
    t0 = time.time()
    plan = cfg.plan() if plan is None else plan
    if not data.captions:
        raise ContractError("captioning training data is empty")
    ratio = cfg.mixing_ratio()
    dims = cfg.dims(data.feat_dim, data.vocab_size)
    if params is None:
        params = init_parameters(cfg, data.feat_dim, data.vocab_size, plan=plan)
    opt = OptimizerState.for_params(params, cfg.learning_rate)
    sources = {}
    for stream, (kind, n) in enumerate(zip(mt.TASK_ORDER, ratio.counts)):
        if n > 0:
            sources[kind] = _batch_source(kind, data, cfg, np.random.default_rng([cfg.seed, 1, stream]))
    drop_rng = np.random.default_rng([cfg.seed, 2])
    sched = mt.Scheduler(ratio)
    logf = open(log_path, "w") if log_path else None
    history = []
    best = None

    def record(obj):
        if logf:
            logf.write(json.dumps(obj, sort_keys=True) + "\n")

    def run_validation(u):
        nonlocal best
        rep = validate(params, plan, data.val_features, data.val_refs, cfg)
        scores = rep.scores()
        history.append({"update": u, **scores})
        record({"type": "validation", "update": u, "scores": scores})
        if best is None or scores["average"] > best.scores["average"]:
            best = Checkpoint(params.copy(), opt.copy(), cfg, plan, dims, data.vocab, u, scores)

    try:
        for u in range(1, cfg.max_updates + 1):
            kind = next(sched)
            batch = sources[kind]()
            loss, grads = mt.task_loss(batch, params, plan, drop_rng, cfg.dropout)
            loss = float(loss)
            if not np.isfinite(loss):
                raise TrainingDiverged(f"loss became {loss} at update {u} ({kind.value} batch)")
            norm = clip_gradients(grads, cfg.clip_norm)
            if not np.isfinite(norm):
                raise TrainingDiverged(f"gradient norm became {norm} at update {u} ({kind.value} batch)")
            adam_step(params, grads, opt)
            record({"type": "update", "update": u, "task": kind.value, "loss": loss,
                    "grad_norm": norm})
            if u % cfg.val_interval == 0 or u == cfg.max_updates:
                run_validation(u)
        if best is None:
            run_validation(0)
    finally:
        if logf:
            logf.close()
    final = Checkpoint(params, opt, cfg, plan, dims, data.vocab, cfg.max_updates,
                       history[-1] if history else {})
    return TrainResult(best, final, history, time.time() - t0)


def train_ensemble(cfg: TrainConfig, k: int, data: TrainData, plan: SharingPlan | None = None,
                   log_dir=None) -> list:
    """``k`` runs that differ only in seed (``cfg.seed + i``)."""
    if k < 1:
        raise DomainError("ensemble size must be at least 1")
    out = []
    for i in range(k):
        run_cfg = cfg.replace(seed=cfg.seed + i)
        lp = Path(log_dir) / f"train_{i}.jsonl" if log_dir else None
        try:
            out.append(train(run_cfg, data, plan, lp).best)
        except Exception as e:
            raise type(e)(f"ensemble run {i} (seed {run_cfg.seed}): {e}") from e
    return out


# ---------------------------------------------------------------------------
# checkpoint files


def _vocab_json(vocab):
    if vocab is None:
        return None
    return vocab.to_json() if hasattr(vocab, "to_json") else list(vocab)


def save_checkpoint(ck: Checkpoint, path):
    """Magic bytes, an 8-byte little-endian manifest length, the JSON
    manifest, then float32 little-endian arrays in manifest order
    (parameters, then Adam first and second moments)."""
    entries = []
    blobs = []
    for section, store in (("param", ck.params.groups), ("m", ck.opt.m), ("v", ck.opt.v)):
        for gid in sorted(store):
            for name in sorted(store[gid]):
                a = np.ascontiguousarray(store[gid][name], dtype="<f4")
                entries.append({"section": section, "group": gid, "name": name, "shape": list(a.shape)})
                blobs.append(a.tobytes())
    manifest = {
        "format": 1,
        "config": asdict(ck.config),
        "plan": ck.plan.to_json(),
        "dims": asdict(ck.dims),
        "vocab": _vocab_json(ck.vocab),
        "update": ck.update,
        "scores": ck.scores,
        "optimizer": {"t": ck.opt.t, "lr": ck.opt.lr, "beta1": ck.opt.beta1, "beta2": ck.opt.beta2,
                      "eps": ck.opt.eps},
        "arrays": entries,
    }
    head = json.dumps(manifest, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<Q", len(head)))
        f.write(head)
        for b in blobs:
            f.write(b)


class CheckpointError(ValueError):
    pass


def load_checkpoint(path) -> Checkpoint:
    from .data import Vocabulary
    raw = Path(path).read_bytes()
    if not raw.startswith(MAGIC):
        raise CheckpointError(f"{path}: not a checkpoint (bad magic bytes)")
    pos = len(MAGIC)
    if len(raw) < pos + 8:
        raise CheckpointError(f"{path}: truncated header")
    (n,) = struct.unpack("<Q", raw[pos:pos + 8])
    pos += 8
    try:
        manifest = json.loads(raw[pos:pos + n])
    except (json.JSONDecodeError, UnicodeDecodeError) as e:
        raise CheckpointError(f"{path}: corrupt manifest: {e}") from e
    pos += n
    stores = {"param": {}, "m": {}, "v": {}}
    for e in manifest["arrays"]:
        count = int(np.prod(e["shape"], dtype=np.int64))
        end = pos + 4 * count
        if end > len(raw):
            raise CheckpointError(f"{path}: truncated array data at {e['group']}/{e['name']}")
        a = np.frombuffer(raw[pos:end], dtype="<f4").reshape(e["shape"]).astype(TRAIN_DTYPE)
        stores[e["section"]].setdefault(e["group"], {})[e["name"]] = a
        pos = end
    if pos != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - pos} trailing bytes")
    o = manifest["optimizer"]
    opt = OptimizerState(stores["m"], stores["v"], o["t"], o["lr"], o["beta1"], o["beta2"], o["eps"])
    vocab = manifest["vocab"]
    if isinstance(vocab, dict):
        vocab = Vocabulary.from_json(vocab)
    return Checkpoint(ParameterStore(stores["param"]), opt, TrainConfig.from_dict(manifest["config"]),
                      SharingPlan.from_json(manifest["plan"]), ModelDims(**manifest["dims"]), vocab,
                      manifest["update"], manifest["scores"])
