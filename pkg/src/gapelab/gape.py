"""Gated additive attention mask in its three equivalent forms.

A landmark gate l_j in [0, 1] marks keys worth keeping; a query gate
g_i > 0 sets how aggressively query i discounts distance; an amplitude
Gamma > 0 scales the whole head. Three forms of the resulting additive
mask coexist:

  * relative:   -Gamma * g_i * (1 - l_j) * (i - j) / T
  * absolute:    Gamma * g_i / T * (j * (1 - l_j) + i * l_j)
  * fused:      two extra coordinates appended to q and k so the absolute
                form appears inside the ordinary scaled dot product.

The relative and absolute forms differ by a per-row constant, so all three
produce identical attention weights after the row softmax.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import Array, sigmoid, softplus


@dataclass(frozen=True)
class GateParams:
    """Learnable gate parameters for one head.

    ``w_l``/``b_l`` project keys onto the landmark gate (sigmoid), ``w_g``/
    ``b_g`` project queries onto the query gate (softplus), ``gamma_raw``
    parameterizes the amplitude Gamma = softplus(gamma_raw).
    """

    w_l: Array
    b_l: float
    w_g: Array
    b_g: float
    gamma_raw: float

    def __post_init__(self) -> None:
        w_l = np.asarray(self.w_l, dtype=np.float64)
        w_g = np.asarray(self.w_g, dtype=np.float64)
        if w_l.ndim != 1 or w_g.ndim != 1:
            raise ValueError("gate projections must be 1-d vectors")
        if w_l.shape != w_g.shape:
            raise ValueError("landmark and query projections must share a width")
        object.__setattr__(self, "w_l", w_l)
        object.__setattr__(self, "w_g", w_g)

    @classmethod
    def fresh(cls, dim: int, b_g: float = -3.0, b_l: float = 0.0,
              gamma_raw: float = 0.5413) -> "GateParams":
        """Untrained defaults: zero projections, nearly-closed query gate,
        undecided landmarks, unit amplitude."""
        return cls(w_l=np.zeros(dim), b_l=b_l, w_g=np.zeros(dim), b_g=b_g,
                   gamma_raw=gamma_raw)

    @classmethod
    def random(cls, dim: int, rng: np.random.Generator) -> "GateParams":
        scale = 1.0 / np.sqrt(dim)
        return cls(
            w_l=rng.normal(0.0, scale, size=dim),
            b_l=float(rng.normal(0.0, 1.0)),
            w_g=rng.normal(0.0, scale, size=dim),
            b_g=float(rng.normal(0.0, 1.0)),
            gamma_raw=float(rng.normal(0.5, 0.5)),
        )


@dataclass(frozen=True)
class GateValues:
    """Gate activations for one (head, sequence) pair.

    ``l``: landmark gate per key, each in [0, 1]. ``g``: query gate per
    query, each > 0. ``Gamma``: head amplitude > 0. ``T``: positive integer
    normalizer, fixed at the training context length.
    """

    l: Array
    g: Array
    Gamma: float
    T: int

    def __post_init__(self) -> None:
        l = np.asarray(self.l, dtype=np.float64)
        g = np.asarray(self.g, dtype=np.float64)
        if l.ndim != 1 or g.ndim != 1 or l.shape != g.shape:
            raise ValueError("l and g must be 1-d arrays of equal length")
        if ((l < 0.0) | (l > 1.0)).any():
            raise ValueError("landmark gates must lie in [0, 1]")
        if (g < 0.0).any():
            raise ValueError("query gates must be nonnegative")
        if self.Gamma <= 0.0:
            raise ValueError("Gamma must be positive")
        if not isinstance(self.T, (int, np.integer)) or self.T < 1:
            raise ValueError("T must be a positive integer")
        object.__setattr__(self, "l", l)
        object.__setattr__(self, "g", g)
        object.__setattr__(self, "T", int(self.T))

    def __len__(self) -> int:
        return self.l.shape[0]


@dataclass(frozen=True)
class PartitionSets:
    """Protected / unprotected split of the context of one query."""

    protected: tuple[int, ...]
    unprotected: tuple[int, ...]
    landmark_threshold: float


def compute_gates(q: Array, k: Array, params: GateParams, T: int) -> GateValues:
    """Evaluate both gates and the amplitude on raw (unrotated) projections."""
    q = np.asarray(q, dtype=np.float64)
    k = np.asarray(k, dtype=np.float64)
    if q.ndim != 2 or q.shape != k.shape:
        raise ValueError(f"q and k must share an (L, d) shape, got {q.shape} vs {k.shape}")
    if q.shape[1] != params.w_l.shape[0]:
        raise ValueError(
            f"gate projections expect width {params.w_l.shape[0]}, got {q.shape[1]}"
        )
    l = sigmoid(k @ params.w_l + params.b_l)
    g = softplus(q @ params.w_g + params.b_g)
    return GateValues(l=l, g=g, Gamma=float(softplus(params.gamma_raw)), T=T)


def _check_pair(i: int, j: int, n: int) -> None:
    if not 0 <= j <= i < n:
        raise ValueError(
            f"need 0 <= j <= i < {n} under the causal mask, got i={i}, j={j}"
        )


def mask_hat(i: int, j: int, gates: GateValues) -> float:
    """Relative-form entry: -Gamma * g_i * (1 - l_j) * (i - j) / T."""
    _check_pair(i, j, len(gates))
    return float(
        -gates.Gamma * gates.g[i] * (1.0 - gates.l[j]) * (i - j) / gates.T
    )


def mask_gape(i: int, j: int, gates: GateValues) -> float:
    """Absolute-form entry: Gamma * g_i / T * (j * (1 - l_j) + i * l_j)."""
    _check_pair(i, j, len(gates))
    return float(
        gates.Gamma * gates.g[i] / gates.T
        * (j * (1.0 - gates.l[j]) + i * gates.l[j])
    )


def mask_hat_matrix(gates: GateValues, positions: Array | None = None) -> Array:
    """Full (L, L) relative-form mask; entries above the diagonal are 0."""
    pos = _positions(gates, positions)
    dist = pos[:, None] - pos[None, :]
    m = -gates.Gamma * gates.g[:, None] * (1.0 - gates.l)[None, :] * dist / gates.T
    return np.tril(m)


def mask_gape_matrix(gates: GateValues, positions: Array | None = None) -> Array:
    """Full (L, L) absolute-form mask; entries above the diagonal are 0."""
    pos = _positions(gates, positions)
    keep = pos[None, :] * (1.0 - gates.l)[None, :] + pos[:, None] * gates.l[None, :]
    m = gates.Gamma * gates.g[:, None] / gates.T * keep
    return np.tril(m)


def _positions(gates: GateValues, positions: Array | None) -> Array:
    if positions is None:
        return np.arange(len(gates), dtype=np.float64)
    pos = np.asarray(positions, dtype=np.float64)
    if pos.shape != (len(gates),):
        raise ValueError("positions must have one entry per token")
    return pos


def augment_qk(
    q: Array,
    k: Array,
    gates: GateValues,
    positions: Array | None = None,
) -> tuple[Array, Array]:
    """Append the two routing coordinates that realize the absolute mask.

    With d the augmented width (semantic width + 2):

      q~_i = [q_i, Gamma g_i sqrt(d), Gamma g_i (i / T) sqrt(d)]
      k~_j = [k_j, j (1 - l_j) / T, l_j]

    so (1/sqrt(d)) q~_i . k~_j equals the plain scaled dot product plus the
    absolute-form mask entry, exactly.
    """
    q = np.asarray(q, dtype=np.float64)
    k = np.asarray(k, dtype=np.float64)
    if q.ndim != 2 or q.shape != k.shape:
        raise ValueError(f"q and k must share an (L, d) shape, got {q.shape} vs {k.shape}")
    if q.shape[0] != len(gates):
        raise ValueError("gates were computed for a different sequence length")
    full_dim = q.shape[1] + 2
    if full_dim < 4:
        raise ValueError("augmented head width must be at least 4")
    pos = _positions(gates, positions)
    root = np.sqrt(float(full_dim))
    gg = gates.Gamma * gates.g
    q_aug = np.concatenate(
        [q, (gg * root)[:, None], (gg * pos / gates.T * root)[:, None]], axis=1
    )
    k_aug = np.concatenate(
        [k, (pos * (1.0 - gates.l) / gates.T)[:, None], gates.l[:, None]], axis=1
    )
    return q_aug, k_aug


def partition_context(gates: GateValues, i: int, tau: float) -> PartitionSets:
    """Split the causal context of query i by landmark threshold tau.

    Position i itself is always protected; earlier positions are protected
    iff l_j >= tau.
    """
    if not 0 <= i < len(gates):
        raise ValueError(f"query index {i} out of range")
    if not 0.0 <= tau <= 1.0:
        raise ValueError("tau must lie in [0, 1]")
    protected = [j for j in range(i) if gates.l[j] >= tau] + [i]
    unprotected = [j for j in range(i) if gates.l[j] < tau]
    return PartitionSets(tuple(protected), tuple(unprotected), tau)


def landmark_dominance_threshold(i: int, a: int, b: int, l_b: float) -> float:
    """Minimum landmark value at the older key a that beats key b.

    For keys a < b < i with landmark l_b < 1 at b, query i ranks key a above
    key b (all else equal) exactly when

        l_a > ((i - b) * l_b + (b - a)) / (i - a).

    Returns that threshold; it lies in (0, 1] whenever it is attainable.
    """
    if not 0 <= a < b < i:
        raise ValueError(f"need 0 <= a < b < i, got a={a}, b={b}, i={i}")
    if not 0.0 <= l_b < 1.0:
        raise ValueError("l_b must lie in [0, 1)")
    return ((i - b) * l_b + (b - a)) / (i - a)
