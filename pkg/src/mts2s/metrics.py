"""Corpus BLEU-4, ROUGE-L and CIDEr-D over tokenized sentences, and a
paired bootstrap test.

Candidates are token lists; references are lists of token lists (one
list per candidate).  Conventions follow the COCO caption evaluation
code: closest reference length for the brevity penalty, ROUGE-L with
beta 1.2 over the best precision and recall, CIDEr-D with sigma 6,
clipped tf-idf overlap and a factor of 10.
"""
from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from .numerics import ContractError, DomainError

MAX_N = 4
ROUGE_BETA = 1.2
CIDER_SIGMA = 6.0
METRICS = ("bleu4", "rouge_l", "cider_d")


def ngrams(tokens, n):
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def _check(candidates, references):
    if len(candidates) == 0:
        raise DomainError("no candidates to score")
    if len(candidates) != len(references):
        raise ContractError(f"{len(candidates)} candidates but {len(references)} reference sets")
    for i, refs in enumerate(references):
        if len(refs) == 0:
            raise ContractError(f"example {i} has an empty reference set")


# ---------------------------------------------------------------------------
# BLEU


def bleu_stats(candidate, refs):
    """``[matches_1..4, totals_1..4, cand_len, ref_len]`` for one example."""
    c = len(candidate)
    matches, totals = [], []
    for n in range(1, MAX_N + 1):
        cand = ngrams(candidate, n)
        max_ref = Counter()
        for r in refs:
            for g, k in ngrams(r, n).items():
                if k > max_ref[g]:
                    max_ref[g] = k
        matches.append(sum(min(k, max_ref[g]) for g, k in cand.items()))
        totals.append(max(c - n + 1, 0))
    ref_len = min((abs(len(r) - c), len(r)) for r in refs)[1]
    return matches + totals + [c, ref_len]


def bleu_from_stats(stats, smoothing: float | None = None):
    """Corpus BLEU from summed stats; works on a ``(10,)`` or ``(k, 10)`` array."""
    s = np.asarray(stats, dtype=np.float64)
    matches, totals = s[..., :MAX_N], s[..., MAX_N:2 * MAX_N]
    c, r = s[..., 2 * MAX_N], s[..., 2 * MAX_N + 1]
    if smoothing:
        matches = np.where(matches == 0, smoothing, matches)
    with np.errstate(divide="ignore", invalid="ignore"):
        prec = np.where(totals > 0, matches / np.where(totals > 0, totals, 1), 0.0)
        logp = np.where(prec > 0, np.log(np.where(prec > 0, prec, 1)), -np.inf).mean(axis=-1)
        bp = np.where(c > r, 0.0, 1.0 - r / np.where(c > 0, c, 1))
        out = np.where((c > 0) & np.isfinite(logp), np.exp(np.minimum(bp, 0) + logp), 0.0)
    return float(out) if out.ndim == 0 else out


def bleu4(candidates, references, smoothing: float | None = None) -> float:
    _check(candidates, references)
    stats = np.array([bleu_stats(c, r) for c, r in zip(candidates, references)])
    return bleu_from_stats(stats.sum(axis=0), smoothing)


# ---------------------------------------------------------------------------
# ROUGE-L


def lcs_length(a, b) -> int:
    if len(a) < len(b):
        a, b = b, a
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def rouge_l_example(candidate, refs, beta=ROUGE_BETA) -> float:
    if not candidate:
        return 0.0
    precs, recs = [], []
    for r in refs:
        lcs = lcs_length(candidate, r)
        precs.append(lcs / len(candidate))
        recs.append(lcs / len(r) if r else 0.0)
    p, r = max(precs), max(recs)
    if p == 0 or r == 0:
        return 0.0
    return (1 + beta ** 2) * p * r / (r + beta ** 2 * p)


def rouge_l(candidates, references) -> float:
    _check(candidates, references)
    return float(np.mean([rouge_l_example(c, r) for c, r in zip(candidates, references)]))


# ---------------------------------------------------------------------------
# CIDEr-D


def _doc_freq(references):
    df = Counter()
    for refs in references:
        seen = set()
        for r in refs:
            for n in range(1, MAX_N + 1):
                seen.update(ngrams(r, n))
        df.update(seen)
    return df


def _tfidf(tokens, df, log_n):
    vecs = [dict() for _ in range(MAX_N)]
    for n in range(1, MAX_N + 1):
        for g, tf in ngrams(tokens, n).items():
            vecs[n - 1][g] = tf * (log_n - math.log(max(1.0, df.get(g, 0.0))))
    norms = [math.sqrt(sum(v * v for v in vec.values())) for vec in vecs]
    return vecs, norms


def cider_d_scores(candidates, references, sigma=CIDER_SIGMA) -> np.ndarray:
    """Per-example CIDEr-D with document frequencies from ``references``."""
    _check(candidates, references)
    df = _doc_freq(references)
    log_n = math.log(float(len(references)))
    scores = np.zeros(len(candidates))
    for i, (cand, refs) in enumerate(zip(candidates, references)):
        hv, hn = _tfidf(cand, df, log_n)
        total = np.zeros(MAX_N)
        for r in refs:
            rv, rn = _tfidf(r, df, log_n)
            penalty = math.exp(-((len(cand) - len(r)) ** 2) / (2 * sigma ** 2))
            for n in range(MAX_N):
                val = sum(min(w, rv[n].get(g, 0.0)) * rv[n].get(g, 0.0) for g, w in hv[n].items())
                if hn[n] != 0 and rn[n] != 0:
                    val /= hn[n] * rn[n]
                total[n] += val * penalty
        scores[i] = 10.0 * total.mean() / len(refs)
    return scores


def cider_d(candidates, references) -> float:
    return float(np.mean(cider_d_scores(candidates, references)))


# ---------------------------------------------------------------------------
# reports and significance


@dataclass
class MetricReport:
    bleu4: float
    rouge_l: float
    cider_d: float
    bleu_stats: np.ndarray = field(repr=False)     # (N, 10)
    rouge_scores: np.ndarray = field(repr=False)   # (N,)
    cider_scores: np.ndarray = field(repr=False)   # (N,)

    @property
    def average(self) -> float:
        return (self.bleu4 + self.rouge_l + self.cider_d) / 3.0

    def scores(self) -> dict:
        return {"bleu4": self.bleu4, "rouge_l": self.rouge_l, "cider_d": self.cider_d,
                "average": self.average}

    def to_json(self) -> dict:
        per = [{"bleu4": bleu_from_stats(s), "rouge_l": float(r), "cider_d": float(c)}
               for s, r, c in zip(self.bleu_stats, self.rouge_scores, self.cider_scores)]
        return {"corpus": self.scores(), "per_example": per}


def evaluate(candidates, references, smoothing: float | None = None) -> MetricReport:
    _check(candidates, references)
    stats = np.array([bleu_stats(c, r) for c, r in zip(candidates, references)], dtype=np.float64)
    rouge = np.array([rouge_l_example(c, r) for c, r in zip(candidates, references)])
    cider = cider_d_scores(candidates, references)
    return MetricReport(bleu_from_stats(stats.sum(axis=0), smoothing), float(rouge.mean()),
                        float(cider.mean()), stats, rouge, cider)


@dataclass
class BootstrapResult:
    metric: str
    p_value: float
    delta: float
    samples: int
    wins_b: int

    def to_json(self):
        return dict(self.__dict__)


def _resampled(report: MetricReport, metric: str, idx: np.ndarray) -> np.ndarray:
    # CIDEr-D keeps the document frequencies of the full test corpus
    if metric == "bleu4":
        return bleu_from_stats(report.bleu_stats[idx].sum(axis=1))
    if metric == "rouge_l":
        return report.rouge_scores[idx].mean(axis=1)
    if metric == "cider_d":
        return report.cider_scores[idx].mean(axis=1)
    raise DomainError(f"unknown metric {metric!r}")


def bootstrap_significance(report_a: MetricReport, report_b: MetricReport, metric: str = "bleu4",
                           samples: int = 100_000, seed: int = 0, chunk: int = 2000) -> BootstrapResult:
    """Paired bootstrap test of "system a scores higher than system b".

    Example indices are resampled with replacement ``samples`` times; the
    p-value is ``(#{resamples with b >= a} + 1) / (samples + 1)``.
    """
    n = len(report_a.rouge_scores)
    if n != len(report_b.rouge_scores):
        raise ContractError("systems were scored on different numbers of examples")
    if samples < 1:
        raise DomainError("need at least one bootstrap sample")
    rng = np.random.default_rng(seed)
    wins_b = 0
    done = 0
    while done < samples:
        k = min(chunk, samples - done)
        idx = rng.integers(0, n, size=(k, n))
        wins_b += int(np.sum(_resampled(report_b, metric, idx) >= _resampled(report_a, metric, idx)))
        done += k
    delta = getattr(report_a, metric) - getattr(report_b, metric)
    return BootstrapResult(metric, (wins_b + 1) / (samples + 1), float(delta), samples, wins_b)
