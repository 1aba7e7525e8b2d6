"""Shared numeric primitives: seeded RNG streams, stable softmax, entropy.

Everything downstream funnels its probability math through this module so
that masking and normalization behave identically in the verifiers, the
attention paths, and the trained model.
"""
from __future__ import annotations

import numpy as np

Array = np.ndarray

PROB_SUM_TOL = 1e-9


def make_rng(seed: int, *stream: int | str) -> np.random.Generator:
    """Counter-based generator for a named stream.

    Philox is splittable: distinct ``stream`` labels yield statistically
    independent draws from one root seed, and the same (seed, stream) pair
    reproduces the same draws on any platform. String labels are folded to
    integers so call sites can use readable names.
    """
    key = tuple(_fold_label(s) for s in stream)
    ss = np.random.SeedSequence(seed, spawn_key=key)
    return np.random.Generator(np.random.Philox(ss))


def _fold_label(label: int | str) -> int:
    if isinstance(label, bool):
        raise TypeError("stream labels must be int or str, not bool")
    if isinstance(label, int):
        if label < 0:
            raise ValueError(f"stream label must be nonnegative, got {label}")
        return label
    # Stable 64-bit fold of the utf-8 bytes (builtin hash() is salted per process).
    h = 1469598103934665603
    for byte in label.encode("utf-8"):
        h = ((h ^ byte) * 1099511628211) % (1 << 64)
    return h


def stable_softmax_row(logits: Array, mask: Array | None = None) -> Array:
    """Softmax over one row with optional boolean support mask.

    Masked-out entries get exactly 0. The max of the supported entries is
    subtracted before exponentiation, so any finite logit range is safe.
    """
    x = np.asarray(logits, dtype=np.float64)
    if x.ndim != 1:
        raise ValueError(f"expected a 1-d row of logits, got shape {x.shape}")
    if mask is None:
        support = np.ones(x.shape, dtype=bool)
    else:
        support = np.asarray(mask, dtype=bool)
        if support.shape != x.shape:
            raise ValueError(
                f"mask shape {support.shape} does not match logits shape {x.shape}"
            )
    if not support.any():
        raise ValueError("softmax has empty support: every position is masked")
    if not np.isfinite(x[support]).all():
        raise ValueError("softmax requires finite logits at supported positions")
    shifted = np.where(support, x - x[support].max(), -np.inf)
    e = np.where(support, np.exp(shifted), 0.0)
    return e / e.sum()


def causal_softmax_matrix(logits: Array) -> Array:
    """Row softmax of an (L, L) logit matrix under the causal mask j <= i.

    Equivalent to calling :func:`stable_softmax_row` on each row with the
    corresponding prefix mask; vectorized for the verifier loops.
    """
    x = np.asarray(logits, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] != x.shape[1]:
        raise ValueError(f"expected a square logit matrix, got shape {x.shape}")
    n = x.shape[0]
    support = np.tril(np.ones((n, n), dtype=bool))
    if not np.isfinite(x[support]).all():
        raise ValueError("softmax requires finite logits at supported positions")
    shifted = np.where(support, x, -np.inf)
    shifted = shifted - shifted.max(axis=1, keepdims=True)
    e = np.where(support, np.exp(shifted), 0.0)
    return e / e.sum(axis=1, keepdims=True)


def shannon_entropy(p: Array) -> float:
    """Entropy in nats of a probability vector, with 0 * log 0 := 0."""
    v = np.asarray(p, dtype=np.float64)
    if v.ndim != 1:
        raise ValueError(f"expected a 1-d probability vector, got shape {v.shape}")
    if v.size == 0:
        raise ValueError("entropy of an empty vector is undefined")
    if (v < -PROB_SUM_TOL).any() or (v > 1.0 + PROB_SUM_TOL).any():
        raise ValueError("probabilities must lie in [0, 1]")
    total = v.sum()
    if abs(total - 1.0) > PROB_SUM_TOL:
        raise ValueError(f"probabilities must sum to 1 (got {total!r})")
    v = np.clip(v, 0.0, 1.0)
    nz = v > 0.0
    return float(-(v[nz] * np.log(v[nz])).sum())


def sigmoid(x: Array | float) -> Array | float:
    """Numerically stable logistic function."""
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    if out.ndim == 0:
        return float(out)
    return out


def softplus(x: Array | float) -> Array | float:
    """log(1 + e^x) computed without overflow for large |x|."""
    x = np.asarray(x, dtype=np.float64)
    out = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))
    if out.ndim == 0:
        return float(out)
    return out


def matmul(a: Array, b: Array) -> Array:
    """2-d matrix product with an explicit inner-dimension check."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError("matmul expects 2-d operands")
    if a.shape[1] != b.shape[0]:
        raise ValueError(
            f"inner dimensions differ: {a.shape} @ {b.shape}"
        )
    return a @ b


def transpose(a: Array) -> Array:
    a = np.asarray(a)
    if a.ndim != 2:
        raise ValueError("transpose expects a 2-d operand")
    return a.T.copy()


def row_l2_norms(a: Array) -> Array:
    a = np.asarray(a)
    if a.ndim != 2:
        raise ValueError("row_l2_norms expects a 2-d operand")
    return np.sqrt((a * a).sum(axis=1))
