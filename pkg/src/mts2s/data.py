"""Tokenization, vocabularies, dataset files, the premise-regrouping split
and a small synthetic stand-in for the three corpora.

File formats
------------
* features: JSON lines ``{"id": str, "features": [[float, ...], ...]}``
* captions: JSON lines ``{"id": str, "captions": [str, ...]}``
* entailment: UTF-8 TSV, ``premise<TAB>hypothesis`` per line
"""
from __future__ import annotations

import json
import logging
import unicodedata
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .multitask import BOS, EOS, PAD, UNK
from .numerics import DomainError

log = logging.getLogger(__name__)

RESERVED = ("<pad>", "<bos>", "<eos>", "<unk>")


class DataError(ValueError):
    """Malformed or inconsistent dataset file."""


def tokenize(text: str) -> list[str]:
    """Lowercase, drop Unicode punctuation, split on whitespace."""
    kept = "".join(ch for ch in text.lower() if not unicodedata.category(ch).startswith("P"))
    return kept.split()


class Vocabulary:
    """Token <-> index map with four reserved slots (pad, bos, eos, unk)."""

    def __init__(self, tokens=(), min_count=1):
        self.min_count = min_count
        self.itos = list(RESERVED)
        self.stoi = {t: i for i, t in enumerate(self.itos)}
        for t in tokens:
            if t not in self.stoi:
                self.stoi[t] = len(self.itos)
                self.itos.append(t)

    def __len__(self):
        return len(self.itos)

    def __contains__(self, token):
        return token in self.stoi

    def index(self, token: str) -> int:
        return self.stoi.get(token, UNK)

    def token(self, i: int) -> str:
        return self.itos[i]

    def encode(self, tokens) -> list[int]:
        return [self.index(t) for t in tokens]

    def decode(self, ids) -> list[str]:
        """Ids to tokens; stops at end-of-sequence and skips pad/bos."""
        out = []
        for i in ids:
            i = int(i)
            if i == EOS:
                break
            if i in (PAD, BOS):
                continue
            out.append(self.itos[i])
        return out

    def to_json(self):
        return {"tokens": self.itos[len(RESERVED):], "min_count": self.min_count}

    @classmethod
    def from_json(cls, obj):
        return cls(obj["tokens"], obj.get("min_count", 1))


def build_vocab(corpora, min_count: int = 1) -> Vocabulary:
    """Vocabulary over token sequences, most frequent first (ties alphabetical)."""
    if min_count < 1:
        raise DomainError("min_count must be >= 1")
    counts = Counter(t for seq in corpora for t in seq)
    ranked = sorted((t for t, c in counts.items() if c >= min_count), key=lambda t: (-counts[t], t))
    return Vocabulary(ranked, min_count)


# ---------------------------------------------------------------------------
# examples and files


@dataclass
class CaptionExample:
    clip_id: str
    features: np.ndarray              # (n_frames, feat_dim)
    references: list                  # list of token lists

    def __post_init__(self):
        if not self.references:
            raise DataError(f"clip {self.clip_id!r} has no reference captions")


@dataclass
class EntailmentExample:
    premise: list
    hypotheses: list

    def __post_init__(self):
        if not self.premise:
            raise DataError("empty premise")
        if not self.hypotheses:
            raise DataError("premise without hypotheses")


class Examples(list):
    """A list of examples that remembers how many records were dropped."""
    dropped = 0


def _read_jsonl(path, key):
    out = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                cid, val = str(rec["id"]), rec[key]
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise DataError(f"{path}:{lineno}: malformed record ({exc})") from None
            if cid in out:
                raise DataError(f"{path}:{lineno}: duplicate id {cid!r}")
            out[cid] = val
    return out


def read_features(path) -> dict:
    """Clip id -> ``(n, F)`` float array; all clips must share ``F``."""
    raw = _read_jsonl(path, "features")
    out, dim = {}, None
    for cid, feats in raw.items():
        try:
            arr = np.asarray(feats, dtype=np.float64)
        except (TypeError, ValueError):
            raise DataError(f"clip {cid!r}: ragged or non-numeric features") from None
        if arr.ndim != 2 or arr.shape[0] == 0:
            raise DataError(f"clip {cid!r}: features must be a non-empty list of vectors")
        if dim is None:
            dim = arr.shape[1]
        elif arr.shape[1] != dim:
            raise DataError(f"clip {cid!r}: feature dimension {arr.shape[1]} != {dim}")
        if not np.all(np.isfinite(arr)):
            raise DataError(f"clip {cid!r}: non-finite feature values")
        out[cid] = arr
    return out


def write_features(path, clips: dict):
    with open(path, "w", encoding="utf-8") as fh:
        for cid, arr in clips.items():
            fh.write(json.dumps({"id": cid, "features": np.asarray(arr).tolist()}) + "\n")


def read_captions(path) -> dict:
    raw = _read_jsonl(path, "captions")
    for cid, caps in raw.items():
        if not isinstance(caps, list) or not all(isinstance(c, str) for c in caps):
            raise DataError(f"clip {cid!r}: captions must be a list of strings")
    return raw


def write_captions(path, captions: dict):
    with open(path, "w", encoding="utf-8") as fh:
        for cid, caps in captions.items():
            fh.write(json.dumps({"id": cid, "captions": list(caps)}) + "\n")


def load_caption_dataset(features_path, captions_path) -> Examples:
    """Join feature and caption records by id.

    Ids present in only one file are dropped; the count is on ``.dropped``.
    """
    feats = read_features(features_path)
    caps = read_captions(captions_path)
    out = Examples()
    for cid in feats:
        if cid in caps:
            refs = [tokenize(c) for c in caps[cid]]
            refs = [r for r in refs if r]
            if not refs:
                raise DataError(f"clip {cid!r}: no non-empty caption")
            out.append(CaptionExample(cid, feats[cid], refs))
    out.dropped = len(set(feats) ^ set(caps))
    if out.dropped:
        log.warning("dropped %d id(s) present in only one of %s, %s", out.dropped, features_path, captions_path)
    return out


def load_clips(features_path) -> list:
    return list(read_features(features_path).values())


def read_pairs(path) -> list:
    pairs = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise DataError(f"{path}:{lineno}: expected premise<TAB>hypothesis")
            pairs.append((parts[0], parts[1]))
    return pairs


def write_pairs(path, pairs):
    with open(path, "w", encoding="utf-8") as fh:
        for p, h in pairs:
            fh.write(f"{p}\t{h}\n")


def group_pairs(pairs) -> list:
    """Group (premise, hypothesis) strings into tokenized entailment examples."""
    grouped = defaultdict(list)
    for p, h in pairs:
        pt, ht = tokenize(p), tokenize(h)
        if pt and ht:
            grouped[" ".join(pt)].append(ht)
    return [EntailmentExample(k.split(), v) for k, v in grouped.items()]


# ---------------------------------------------------------------------------
# multi-reference entailment split


@dataclass
class SplitResult:
    train: list
    validation: list
    test: list
    audit: dict = field(default_factory=dict)


def snli_regroup_split(pairs, seed: int = 0) -> SplitResult:
    """Regroup premise/hypothesis pairs into a multi-reference split.

    Premises with one hypothesis form the training set.  Premises with
    several hypotheses are bucketed by hypothesis count; each bucket is
    shuffled and halved between validation and test, the odd one going
    to validation.  Premise identity is the tokenized string.
    """
    if not pairs:
        raise DomainError("no premise/hypothesis pairs to split")
    grouped = {}
    for p, h in pairs:
        key = " ".join(tokenize(p))
        grouped.setdefault(key, []).append(tokenize(h))

    train, strata = [], defaultdict(list)
    for premise, hyps in grouped.items():
        ex = EntailmentExample(premise.split(), hyps)
        if len(hyps) == 1:
            train.append(ex)
        else:
            strata[len(hyps)].append(ex)

    rng = np.random.default_rng(seed)
    val, test, per_stratum = [], [], {}
    for k in sorted(strata):
        bucket = strata[k]
        order = rng.permutation(len(bucket))
        half = (len(bucket) + 1) // 2
        val.extend(bucket[i] for i in order[:half])
        test.extend(bucket[i] for i in order[half:])
        per_stratum[str(k)] = {"validation": int(half), "test": int(len(bucket) - half)}

    def n_pairs(xs):
        return sum(len(x.hypotheses) for x in xs)

    audit = {
        "input_pairs": len(pairs),
        "unique_premises": len(grouped),
        "single_hypothesis_premises": len(train),
        "multi_hypothesis_premises": len(val) + len(test),
        "train": {"premises": len(train), "pairs": n_pairs(train)},
        "validation": {"premises": len(val), "pairs": n_pairs(val)},
        "test": {"premises": len(test), "pairs": n_pairs(test)},
        "strata": per_stratum,
        "seed": seed,
    }
    return SplitResult(train, val, test, audit)


def write_split(result: SplitResult, out_dir):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for name in ("train", "validation", "test"):
        write_pairs(out / f"{name}.tsv",
                    [(" ".join(ex.premise), " ".join(h)) for ex in getattr(result, name) for h in ex.hypotheses])
    (out / "audit.json").write_text(json.dumps(result.audit, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# synthetic corpora

ACTIONS = [  # (-ing, 3rd person, participle)
    ("slicing", "slices", "sliced"), ("washing", "washes", "washed"), ("throwing", "throws", "thrown"),
    ("kicking", "kicks", "kicked"), ("carrying", "carries", "carried"), ("painting", "paints", "painted"),
]
OBJECTS = ["ball", "box", "onion", "tomato", "bottle", "chair", "plate", "shoe"]
MODIFIERS = ["red", "blue", "small", "large", "green"]


@dataclass
class SynthConfig:
    caption_train: int = 200
    caption_val: int = 60
    caption_test: int = 100
    prediction_clips: int = 2000
    entailment_pairs: int = 2000
    feat_dim: int = 16
    caption_frames: tuple = (8, 12)
    prediction_frames: tuple = (10, 15)
    noise: float = 2.0
    action_scale: float = 4.5
    drift: float = 0.25
    seed: int = 0


class SyntheticWorld:
    """Prototype vectors for every latent factor, drawn once per seed."""

    def __init__(self, cfg: SynthConfig):
        self.cfg = cfg
        rng = np.random.default_rng([cfg.seed, 0])
        F = cfg.feat_dim
        # actions are easy to tell apart; objects and modifiers are not
        scale = 1.0 / np.sqrt(F)
        self.action_proto = rng.normal(size=(len(ACTIONS), F)) * cfg.action_scale * scale
        self.action_drift = rng.normal(size=(len(ACTIONS), F)) * 2.0 * scale
        self.object_proto = rng.normal(size=(len(OBJECTS), F)) * 2.0 * scale
        self.modifier_proto = rng.normal(size=(len(MODIFIERS), F)) * 1.2 * scale

    def clip(self, rng, a, o, m, n, noise=None):
        noise = self.cfg.noise if noise is None else noise
        base = self.action_proto[a] + self.object_proto[o] + self.modifier_proto[m]
        steps = (np.arange(n) - (n - 1) / 2.0)[:, None]
        frames = base + self.cfg.drift * steps * self.action_drift[a]
        if noise > 0:
            frames = frames + noise * rng.normal(size=frames.shape)
        return frames

    @staticmethod
    def captions(a, o, m):
        ing, s, ed = ACTIONS[a]
        obj, mod = OBJECTS[o], MODIFIERS[m]
        return [f"a person is {ing} a {mod} {obj}",
                f"someone {s} the {mod} {obj}",
                f"a {mod} {obj} is being {ed}"]

    @staticmethod
    def entailment(rng, a, o, m):
        ing, s, ed = ACTIONS[a]
        obj, mod = OBJECTS[o], MODIFIERS[m]
        forms = [(f"a person is {ing} a {mod} {obj}", f"a person is {ing} a {obj}"),
                 (f"someone {s} the {mod} {obj}", f"someone {s} the {obj}"),
                 (f"a {mod} {obj} is being {ed}", f"a {obj} is being {ed}"),
                 (f"a person is {ing} a {mod} {obj}", f"a {mod} {obj} is being {ed}")]
        return forms[rng.integers(len(forms))]


def _latents(rng, n):
    return [(int(rng.integers(len(ACTIONS))), int(rng.integers(len(OBJECTS))), int(rng.integers(len(MODIFIERS))))
            for _ in range(n)]


def synthesize(cfg: SynthConfig):
    """Generate all corpora in memory.

    Returns a dict with ``caption_{train,val,test}`` (features, captions,
    latents), ``prediction`` clips and ``entailment`` pairs.
    """
    world = SyntheticWorld(cfg)
    out = {}
    for i, (split, n) in enumerate((("train", cfg.caption_train), ("val", cfg.caption_val),
                                    ("test", cfg.caption_test))):
        rng = np.random.default_rng([cfg.seed, 1, i])
        feats, caps, lat = {}, {}, {}
        for j, (a, o, m) in enumerate(_latents(rng, n)):
            cid = f"{split}{j:05d}"
            length = int(rng.integers(cfg.caption_frames[0], cfg.caption_frames[1] + 1))
            feats[cid] = world.clip(rng, a, o, m, length)
            caps[cid] = world.captions(a, o, m)
            lat[cid] = (a, o, m)
        out[f"caption_{split}"] = (feats, caps, lat)
    rng = np.random.default_rng([cfg.seed, 2])
    clips = {}
    for j, (a, o, m) in enumerate(_latents(rng, cfg.prediction_clips)):
        length = int(rng.integers(cfg.prediction_frames[0], cfg.prediction_frames[1] + 1))
        clips[f"pred{j:05d}"] = world.clip(rng, a, o, m, length)
    out["prediction"] = clips
    rng = np.random.default_rng([cfg.seed, 3])
    out["entailment"] = [world.entailment(rng, *lat) for lat in _latents(rng, cfg.entailment_pairs)]
    out["world"] = world
    return out


def _round(clips, ndigits=6):
    return {k: np.round(v, ndigits) for k, v in clips.items()}


def generate_synthetic(cfg: SynthConfig, out_dir) -> dict:
    """Write the synthetic corpora to ``out_dir`` and return the file map."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    corp = synthesize(cfg)
    files = {}
    for split in ("train", "val", "test"):
        feats, caps, _ = corp[f"caption_{split}"]
        files[f"caption_{split}_features"] = out / f"caption_{split}.features.jsonl"
        files[f"caption_{split}_captions"] = out / f"caption_{split}.captions.jsonl"
        write_features(files[f"caption_{split}_features"], _round(feats))
        write_captions(files[f"caption_{split}_captions"], caps)
    files["prediction_features"] = out / "prediction.features.jsonl"
    write_features(files["prediction_features"], _round(corp["prediction"]))
    files["entailment_pairs"] = out / "entailment.tsv"
    write_pairs(files["entailment_pairs"], corp["entailment"])
    manifest = {k: str(v.name) for k, v in files.items()}
    manifest["config"] = {k: (list(v) if isinstance(v, tuple) else v) for k, v in cfg.__dict__.items()}
    (out / "synth_manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return files
