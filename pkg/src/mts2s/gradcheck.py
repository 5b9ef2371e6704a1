"""Finite-difference certification of the three task losses on a tiny model."""
from __future__ import annotations

import numpy as np

from . import multitask as mt
from .numerics import CHECK_DTYPE, finite_difference_gradcheck

TINY = mt.ModelDims(feat_dim=6, vocab_size=12, hidden=8, embed=4)


def tiny_batches(seed: int = 0):
    """One small batch per task; every sequence has at most five steps."""
    rng = np.random.default_rng([seed, 7])
    F, V = TINY.feat_dim, TINY.vocab_size
    words = lambda n: [int(w) for w in rng.integers(4, V, size=n)]
    return {
        mt.TaskKind.CAPTIONING: mt.caption_batch(
            [rng.normal(size=(5, F)), rng.normal(size=(3, F))], [words(4), words(2)]),
        mt.TaskKind.VIDEO_PREDICTION: mt.prediction_batch(
            [rng.normal(size=(5, F)), rng.normal(size=(4, F))], encode_fraction=0.6),
        mt.TaskKind.ENTAILMENT: mt.entailment_batch([words(5), words(2)], [words(2), words(3)]),
    }


def run_suite(seed: int = 0, init_range: float = 0.3, reference_dtype=np.longdouble, tolerance: float = 1e-4,
              max_per_tensor=None) -> dict:
    """Check every parameter scalar of every loss; returns task name -> report.

    Analytic gradients come from the float64 model; the central
    differences are evaluated at ``reference_dtype``.
    """
    plan = mt.SharingPlan.build()
    params = mt.ParameterStore.initialize(plan, TINY, init_range, seed, dtype=CHECK_DTYPE)
    out = {}
    for kind, batch in tiny_batches(seed).items():
        out[kind.value] = finite_difference_gradcheck(
            lambda p: mt.task_loss(batch, p, plan),
            params,
            value_fn=lambda p: mt.task_loss(batch, p, plan, with_grads=False)[0],
            reference_dtype=reference_dtype, tolerance=tolerance, max_per_tensor=max_per_tensor)
    return out
