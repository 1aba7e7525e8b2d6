"""Single-head causal attention with interchangeable gated-mask paths.

This is the reference implementation used by verifiers and tests: float64,
one head at a time, softmax routed through numerics. The trained decoder
has its own batched float32 forward that must agree with this one.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from . import numerics
from .gape import GateParams, augment_qk, compute_gates, mask_gape_matrix, mask_hat_matrix
from .posenc import (
    EncodingKind,
    FrequencySpectrum,
    alibi_bias,
    apply_rotary,
    rotated_dim_count,
    semantic_logits,
)


class MaskPath(enum.Enum):
    """How the gated mask enters the logits.

    EXPLICIT_M adds the absolute form, EXPLICIT_M_HAT the relative form,
    FUSED_AUGMENTED folds the absolute form into the dot product via two
    appended coordinates. All three yield identical attention weights.
    """

    EXPLICIT_M = "explicit_m"
    EXPLICIT_M_HAT = "explicit_m_hat"
    FUSED_AUGMENTED = "fused_augmented"


@dataclass
class AttentionInputs:
    """One head's inputs.

    q, k: (L, d_sem) semantic projections (pre-rotation). v: (L, d_v).
    positions: absolute token positions, default 0..L-1. gape: optional
    (GateParams, T) pair; when present the effective head width is
    d_sem + 2 and the dot product is scaled by that full width. head picks
    the slope for the distance-bias kind. gates_from_rotated switches the
    gate projections to post-rotation q/k (off by default).
    """

    q: np.ndarray
    k: np.ndarray
    v: np.ndarray
    positions: np.ndarray | None = None
    kind: EncodingKind = field(default_factory=EncodingKind.nope)
    gape: tuple[GateParams, int] | None = None
    head: int = 0
    gates_from_rotated: bool = False


@dataclass
class AttentionOutput:
    context: np.ndarray
    weights: np.ndarray
    logits: np.ndarray


def attend(inputs: AttentionInputs, path: MaskPath = MaskPath.EXPLICIT_M) -> AttentionOutput:
    """Causal attention for one head along the chosen mask path."""
    q = np.asarray(inputs.q, dtype=np.float64)
    k = np.asarray(inputs.k, dtype=np.float64)
    v = np.asarray(inputs.v, dtype=np.float64)
    if q.ndim != 2 or q.shape != k.shape:
        raise ValueError(f"q and k must share an (L, d) shape, got {q.shape} vs {k.shape}")
    length, d_sem = q.shape
    if length < 1:
        raise ValueError("need at least one position")
    if v.ndim != 2 or v.shape[0] != length:
        raise ValueError("v must provide one row per position")
    for name, arr in (("q", q), ("k", k), ("v", v)):
        if not np.isfinite(arr).all():
            raise ValueError(f"{name} contains non-finite entries")
    if inputs.positions is None:
        positions = np.arange(length)
    else:
        positions = np.asarray(inputs.positions)
        if positions.shape != (length,):
            raise ValueError("positions must have one entry per row")

    if inputs.gape is not None:
        if inputs.kind.variant == "alibi":
            raise ValueError("gated mask and distance bias do not combine")
        logits = _gated_logits(q, k, positions, inputs, path)
    else:
        logits = semantic_logits(q, k, inputs.kind, positions=positions)
        if inputs.kind.variant == "alibi":
            if not 0 <= inputs.head < len(inputs.kind.slopes):
                raise ValueError(
                    f"head {inputs.head} has no slope (got {len(inputs.kind.slopes)})"
                )
            logits = logits + alibi_bias(length, inputs.kind.slopes[inputs.head])

    weights = np.empty_like(logits)
    support = np.zeros(length, dtype=bool)
    for i in range(length):
        support[i] = True
        weights[i] = numerics.stable_softmax_row(logits[i], support.copy())
    context = weights @ v
    return AttentionOutput(context=context, weights=weights, logits=logits)


def _gated_logits(
    q: np.ndarray,
    k: np.ndarray,
    positions: np.ndarray,
    inputs: AttentionInputs,
    path: MaskPath,
) -> np.ndarray:
    params, T = inputs.gape
    d_sem = q.shape[1]
    full_dim = d_sem + 2
    if full_dim < 4:
        raise ValueError("gated attention needs a semantic width of at least 2")

    if inputs.kind.rotary:
        spectrum = FrequencySpectrum.create(d_sem, inputs.kind.theta)
        rotated = (
            d_sem
            if inputs.kind.variant == "rope"
            else rotated_dim_count(d_sem, inputs.kind.fraction)
        )
        q_rot = apply_rotary(q, positions, spectrum, rotated)
        k_rot = apply_rotary(k, positions, spectrum, rotated)
    else:
        q_rot, k_rot = q, k

    gate_q, gate_k = (q_rot, k_rot) if inputs.gates_from_rotated else (q, k)
    gates = compute_gates(gate_q, gate_k, params, T)

    if path is MaskPath.FUSED_AUGMENTED:
        q_aug, k_aug = augment_qk(q_rot, k_rot, gates, positions)
        return (q_aug @ k_aug.T) / np.sqrt(float(full_dim))

    s = (q_rot @ k_rot.T) / np.sqrt(float(full_dim))
    if path is MaskPath.EXPLICIT_M:
        return s + mask_gape_matrix(gates, positions)
    if path is MaskPath.EXPLICIT_M_HAT:
        return s + mask_hat_matrix(gates, positions)
    raise ValueError(f"unknown mask path {path!r}")


def kv_cache_shapes(
    kind: EncodingKind,
    with_gape: bool,
    context_length: int,
    n_head: int,
    head_dim: int,
    batch: int = 1,
) -> tuple[tuple[int, int, int, int], tuple[int, int, int, int]]:
    """Per-layer key/value cache shapes for incremental decoding.

    The gated mask stores its two routing coordinates inside the key
    vectors, so the cache layout is (batch, n_head, context, head_dim) for
    every kind, gated or not: enabling the mask changes no cache shape.
    A zero-length context is a valid empty cache.
    """
    if context_length < 0:
        raise ValueError("context_length must be >= 0")
    if n_head < 1 or head_dim < 1 or batch < 1:
        raise ValueError("n_head, head_dim and batch must be >= 1")
    if with_gape and head_dim < 4:
        raise ValueError("gated attention needs head_dim >= 4")
    if with_gape and kind.variant == "alibi":
        raise ValueError("gated mask and distance bias do not combine")
    shape = (batch, n_head, context_length, head_dim)
    return shape, shape
