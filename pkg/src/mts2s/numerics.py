"""Dense-array primitives with explicit backward kernels, plus a
finite-difference gradient checker.

Arrays are plain ``numpy.ndarray`` objects.  Every kernel checks shapes
up front and never relies on implicit broadcasting between operands.
A leading batch axis is allowed where noted; it must be given
explicitly on every operand.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

TRAIN_DTYPE = np.float32
CHECK_DTYPE = np.float64


class DimensionError(ValueError):
    """Operand shapes do not conform."""


class DomainError(ValueError):
    """Argument outside the operation's domain."""


class ContractError(RuntimeError):
    """A caller broke a documented precondition."""


def _shape_error(what, a, b):
    return DimensionError(f"{what}: shape {tuple(a)} does not conform with {tuple(b)}")


def affine(x, W, b):
    """Return ``W @ x + b``.

    ``x`` is ``(n_in,)`` or batched ``(batch, n_in)``; ``W`` is
    ``(n_out, n_in)`` and ``b`` is ``(n_out,)``.
    """
    x = np.asarray(x)
    W = np.asarray(W)
    b = np.asarray(b)
    if W.ndim != 2 or b.shape != (W.shape[0],):
        raise _shape_error("affine weights", W.shape, b.shape)
    if x.shape[-1:] != (W.shape[1],) or x.ndim not in (1, 2):
        raise _shape_error("affine input", x.shape, W.shape)
    return x @ W.T + b


def affine_backward(dy, x, W):
    """Gradients of ``affine`` given the upstream gradient ``dy``.

    Returns ``(dx, dW, db)``; batched inputs are summed over the batch
    axis for ``dW`` and ``db``.
    """
    dy = np.asarray(dy)
    x = np.asarray(x)
    if dy.shape[:-1] != x.shape[:-1] or dy.shape[-1] != W.shape[0]:
        raise _shape_error("affine_backward", dy.shape, x.shape)
    if x.ndim == 1:
        return W.T @ dy, np.outer(dy, x), dy.copy()
    return dy @ W, dy.T @ x, dy.sum(axis=0)


def sigmoid(x):
    # split by sign so neither branch overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def softmax(x, axis=-1):
    """Numerically stable softmax along ``axis``."""
    x = np.asarray(x)
    if x.size == 0 or x.shape[axis] == 0:
        raise DomainError("softmax of an empty array")
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax(x, axis=-1):
    x = np.asarray(x)
    if x.size == 0 or x.shape[axis] == 0:
        raise DomainError("log_softmax of an empty array")
    z = x - x.max(axis=axis, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))


def softmax_backward(dy, y, axis=-1):
    """Gradient through ``y = softmax(x)``."""
    return y * (dy - (dy * y).sum(axis=axis, keepdims=True))


def l2_distance_sq(a, b):
    """Squared Euclidean distance between two equally shaped arrays."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise _shape_error("l2_distance_sq", a.shape, b.shape)
    d = a - b
    return float(np.sum(d * d))


def l2_distance_sq_backward(a, b):
    """Gradient of ``l2_distance_sq`` with respect to ``a``."""
    return 2.0 * (np.asarray(a) - np.asarray(b))


# ---------------------------------------------------------------------------
# finite differences


@dataclass
class GradcheckEntry:
    name: str
    index: tuple
    analytic: float
    numeric: float
    rel_error: float


@dataclass
class GradcheckReport:
    tolerance: float
    worst: dict = field(default_factory=dict)  # group -> GradcheckEntry
    checked: int = 0

    @property
    def max_error(self) -> float:
        return max((e.rel_error for e in self.worst.values()), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_error < self.tolerance

    def lines(self):
        for group, e in sorted(self.worst.items()):
            yield (f"{group:>24s}  {e.name:<14s} {str(e.index):<12s} "
                   f"analytic={e.analytic:+.6e} numeric={e.numeric:+.6e} rel={e.rel_error:.2e}")


def relative_error(a: float, n: float) -> float:
    return abs(a - n) / max(abs(a), abs(n), 1e-8)


LossFn = Callable[[Mapping[str, Mapping[str, np.ndarray]]], "tuple[float, Mapping]"]


def _as_groups(params):
    return getattr(params, "groups", params)


def finite_difference_gradcheck(loss_fn: LossFn, params, epsilon: float = 1e-5,
                                tolerance: float = 1e-4, max_per_tensor: int | None = None,
                                seed: int = 0, value_fn=None, reference_dtype=None) -> GradcheckReport:
    """Compare analytic gradients with central differences.

    ``params`` maps group id -> name -> float64 array (a
    ``ParameterStore`` works too).  ``loss_fn(params)`` returns
    ``(loss, grads)`` with ``grads`` shaped like ``params``; groups or
    names missing from ``grads`` are taken as zero.  ``value_fn(params)``
    returns just the loss and is used for the perturbed evaluations when
    given.  ``max_per_tensor`` samples that many entries per array instead
    of checking every one.

    The differences are taken on a copy of ``params`` cast to
    ``reference_dtype`` (default: the parameters' own dtype).  With
    float64 the loss is only known to about 1e-16 relative, so a gradient
    entry of size 1e-8 cannot be resolved to 1e-4 with eps 1e-5; an
    extended-precision reference (``np.longdouble``) removes that floor
    without touching the analytic float64 gradients under test.
    """
    groups = _as_groups(params)
    for gid in groups:
        for name, arr in groups[gid].items():
            if arr.dtype != np.float64:
                raise ContractError(f"gradcheck needs float64 parameters, {gid}/{name} is {arr.dtype}")
    if value_fn is None:
        def value_fn(q):
            return loss_fn(q)[0]
    _, grads = loss_fn(params)
    _, grads1 = loss_fn(params)
    if any(not np.array_equal(grads[g][n], grads1[g][n]) for g in grads for n in grads[g]):
        raise ContractError("loss_fn is not deterministic")

    if reference_dtype is None or np.dtype(reference_dtype) == np.float64:
        ref = params
    elif hasattr(params, "astype"):
        ref = params.astype(reference_dtype)
    else:
        ref = {g: {n: a.astype(reference_dtype) for n, a in d.items()} for g, d in groups.items()}
    ref_groups = _as_groups(ref)
    if value_fn(ref) != value_fn(ref):
        raise ContractError("loss_fn is not deterministic")

    rng = np.random.default_rng(seed)
    report = GradcheckReport(tolerance=tolerance)
    for gid in sorted(groups):
        for name in sorted(groups[gid]):
            arr = ref_groups[gid][name]
            g = grads.get(gid, {}).get(name)
            g = np.zeros(arr.shape) if g is None else np.asarray(g)
            if g.shape != arr.shape:
                raise _shape_error(f"gradient {gid}/{name}", g.shape, arr.shape)
            flat = arr.reshape(-1)
            if not np.shares_memory(flat, arr):
                raise ContractError(f"{gid}/{name} is not contiguous")
            idx = np.arange(flat.size)
            if max_per_tensor is not None and flat.size > max_per_tensor:
                idx = np.sort(rng.choice(flat.size, size=max_per_tensor, replace=False))
            for i in idx:
                orig = flat[i]
                flat[i] = orig + epsilon
                lp = value_fn(ref)
                flat[i] = orig - epsilon
                lm = value_fn(ref)
                flat[i] = orig
                num = float((lp - lm) / (2 * epsilon))
                ana = float(g.reshape(-1)[i])
                err = relative_error(ana, num)
                report.checked += 1
                best = report.worst.get(gid)
                if best is None or err > best.rel_error:
                    report.worst[gid] = GradcheckEntry(
                        name, tuple(int(j) for j in np.unravel_index(i, arr.shape)), ana, num, err)
    return report
