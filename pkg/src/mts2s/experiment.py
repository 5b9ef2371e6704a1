"""Glue between corpora and the trainer, and the synthetic multi-task
benchmark (single-task baseline vs many-to-many at equal captioning
budget)."""
from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import data as dt
from . import metrics as mx
from . import training as tr
from .multitask import MixingRatio

log = logging.getLogger(__name__)


@dataclass
class Prepared:
    train: tr.TrainData
    test_features: list
    test_refs: list          # token-id lists per clip
    test_ids: list = field(default_factory=list)


def assemble(train_examples, val_examples, clips=(), pairs=(), vocab=None, test_examples=()) -> Prepared:
    """Build the vocabulary (captions plus entailment text) and map
    everything to ids.  ``pairs`` are tokenized (premise, hypothesis)."""
    if not train_examples:
        raise dt.DataError("no captioning training examples")
    if not val_examples:
        raise dt.DataError("no captioning validation examples")
    if vocab is None:
        text = [r for ex in train_examples for r in ex.references]
        text += [s for pr in pairs for s in pr]
        vocab = dt.build_vocab(text)
    feat_dim = train_examples[0].features.shape[1]
    for ex in list(val_examples) + list(test_examples):
        if ex.features.shape[1] != feat_dim:
            raise dt.DataError(f"clip {ex.clip_id!r}: feature dimension {ex.features.shape[1]} != {feat_dim}")
    for c in clips:
        if c.shape[1] != feat_dim:
            raise dt.DataError(f"prediction clip has feature dimension {c.shape[1]} != {feat_dim}")
    captions = [(ex.features, vocab.encode(r)) for ex in train_examples for r in ex.references]
    td = tr.TrainData(
        feat_dim, vocab, captions,
        [ex.features for ex in val_examples],
        [[vocab.encode(r) for r in ex.references] for ex in val_examples],
        clips=list(clips),
        pairs=[(vocab.encode(p), vocab.encode(h)) for p, h in pairs])
    return Prepared(td, [ex.features for ex in test_examples],
                    [[vocab.encode(r) for r in ex.references] for ex in test_examples],
                    [ex.clip_id for ex in test_examples])


def _examples(feats, caps):
    return [dt.CaptionExample(k, feats[k], [dt.tokenize(c) for c in caps[k]]) for k in feats]


def prepare_synthetic(corpus: dict) -> Prepared:
    """``corpus`` as returned by :func:`data.synthesize`."""
    split = {s: _examples(*corpus[f"caption_{s}"][:2]) for s in ("train", "val", "test")}
    pairs = [(dt.tokenize(p), dt.tokenize(h)) for p, h in corpus["entailment"]]
    return assemble(split["train"], split["val"], list(corpus["prediction"].values()), pairs,
                    test_examples=split["test"])


def prepare_files(data_dir, need_test=False, vocab=None) -> Prepared:
    """Load a directory written by :func:`data.generate_synthetic` (or laid
    out the same way: ``synth_manifest.json`` naming the files)."""
    d = Path(data_dir)
    mpath = d / "synth_manifest.json"
    if not mpath.exists():
        raise dt.DataError(f"{d}: no synth_manifest.json")
    man = json.loads(mpath.read_text())

    def load(split):
        return dt.load_caption_dataset(d / man[f"caption_{split}_features"], d / man[f"caption_{split}_captions"])

    clips = dt.load_clips(d / man["prediction_features"]) if "prediction_features" in man else []
    pairs = []
    if "entailment_pairs" in man:
        pairs = [(dt.tokenize(p), dt.tokenize(h)) for p, h in dt.read_pairs(d / man["entailment_pairs"])]
        pairs = [(p, h) for p, h in pairs if p and h]
    test = load("test") if need_test else []
    return assemble(load("train"), load("val"), clips, pairs, vocab=vocab, test_examples=test)


def decode_test(models, prep: Prepared, beam: int, cfg: tr.TrainConfig):
    from . import decoding
    if beam <= 1:
        return decoding.greedy_decode(models, prep.test_features, cfg.max_decode_len, cfg.visual_cap)
    return decoding.beam_decode_batch(models, prep.test_features, beam, cfg.max_decode_len, cfg.visual_cap)


def score(hyps, refs) -> mx.MetricReport:
    return mx.evaluate(hyps, [[tr._tokens_to_ref(r) for r in rs] for rs in refs])


# ---------------------------------------------------------------------------
# benchmark


BENCH_SYNTH = dict(caption_train=200, prediction_clips=2000, entailment_pairs=2000)
BASELINE_RATIO = "1:0:0"
MTM_RATIO = "1:1:1"
CAPTION_UPDATES = 6000


@dataclass
class BenchmarkRun:
    seed: int
    baseline: mx.MetricReport
    multitask: mx.MetricReport
    seconds: float
    best_updates: dict

    def summary(self):
        return {"seed": self.seed, "seconds": round(self.seconds, 1), "best_updates": self.best_updates,
                "baseline": self.baseline.scores(), "multitask": self.multitask.scores()}


def updates_for(ratio: str, caption_updates: int) -> int:
    """Total updates giving ``caption_updates`` captioning batches under ``ratio``."""
    r = MixingRatio.parse(ratio)
    full, rest = divmod(caption_updates, r.captioning)
    total = full * r.cycle
    if rest:
        total += rest
    return total


def benchmark_seed(seed: int, caption_updates: int = CAPTION_UPDATES, mtm_ratio: str = MTM_RATIO,
                   synth: dict | None = None, beam: int = 1, **cfg_kw) -> BenchmarkRun:
    """Train the baseline and the many-to-many model on one synthetic world
    and score both on its captioning test split."""
    t0 = time.time()
    corpus = dt.synthesize(dt.SynthConfig(seed=seed, **{**BENCH_SYNTH, **(synth or {})}))
    prep = prepare_synthetic(corpus)
    reports, best = {}, {}
    for name, ratio in (("baseline", BASELINE_RATIO), ("multitask", mtm_ratio)):
        total = updates_for(ratio, caption_updates)
        cfg = tr.TrainConfig(seed=seed, ratio=ratio, max_updates=total,
                             val_interval=max(total // 20, 1), **cfg_kw)
        res = tr.train(cfg, prep.train)
        best[name] = res.best.update
        reports[name] = score(decode_test([res.best.model()], prep, beam, cfg), prep.test_refs)
        log.info("seed %d %s: %s", seed, name, reports[name].scores())
    return BenchmarkRun(seed, reports["baseline"], reports["multitask"], time.time() - t0, best)


def pooled(reports) -> mx.MetricReport:
    """Concatenate per-example statistics of several test sets into one report."""
    stats = np.concatenate([r.bleu_stats for r in reports])
    rouge = np.concatenate([r.rouge_scores for r in reports])
    cider = np.concatenate([r.cider_scores for r in reports])
    return mx.MetricReport(mx.bleu_from_stats(stats.sum(axis=0)), float(rouge.mean()), float(cider.mean()),
                           stats, rouge, cider)
