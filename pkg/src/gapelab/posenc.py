"""Positional encodings for the semantic attention channel.

Four kinds are supported: no positional encoding, full rotary, partial
rotary (only the highest-frequency channel pairs are rotated), and a
linear distance bias added per head. Rotations act on (q, k) pairs before
the scaled dot product; the distance bias is additive on the logits and is
handled by the attention layer because its slope is per head.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import Array

VARIANTS = ("nope", "rope", "prope", "alibi")


@dataclass(frozen=True)
class EncodingKind:
    """Which positional mechanism the semantic channel uses.

    ``theta`` is the rotary wavelength base, ``fraction`` the share of
    channel pairs rotated (partial rotary only), ``slopes`` the per-head
    bias slopes (distance bias only).
    """

    variant: str
    theta: float = 10000.0
    fraction: float = 1.0
    slopes: tuple[float, ...] = ()

    def __post_init__(self) -> None:
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown encoding variant {self.variant!r}")
        if self.theta <= 0:
            raise ValueError("theta must be positive")
        if not 0.0 <= self.fraction <= 1.0:
            raise ValueError("fraction must lie in [0, 1]")
        if self.variant == "alibi" and not self.slopes:
            raise ValueError("alibi requires at least one slope")
        if any(s < 0 for s in self.slopes):
            raise ValueError("slopes must be nonnegative")

    @classmethod
    def nope(cls) -> "EncodingKind":
        return cls("nope")

    @classmethod
    def rope(cls, theta: float = 10000.0) -> "EncodingKind":
        return cls("rope", theta=theta)

    @classmethod
    def prope(cls, fraction: float = 0.75, theta: float = 10000.0) -> "EncodingKind":
        return cls("prope", theta=theta, fraction=fraction)

    @classmethod
    def alibi(cls, n_head: int) -> "EncodingKind":
        return cls("alibi", slopes=default_alibi_slopes(n_head))

    @property
    def rotary(self) -> bool:
        return self.variant in ("rope", "prope")

    def spec_string(self) -> str:
        """Round-trippable text form, used by the CLI and checkpoints."""
        if self.variant == "nope":
            return "nope"
        if self.variant == "rope":
            return f"rope:theta={self.theta!r}"
        if self.variant == "prope":
            return f"prope:fraction={self.fraction!r},theta={self.theta!r}"
        slopes = ";".join(repr(s) for s in self.slopes)
        return f"alibi:slopes={slopes}"

    @classmethod
    def from_spec_string(cls, text: str) -> "EncodingKind":
        name, _, rest = text.partition(":")
        kwargs: dict[str, object] = {}
        if rest:
            for item in rest.split(","):
                key, _, value = item.partition("=")
                if key == "slopes":
                    kwargs["slopes"] = tuple(float(v) for v in value.split(";"))
                elif key in ("theta", "fraction"):
                    kwargs[key] = float(value)
                else:
                    raise ValueError(f"unknown encoding option {key!r}")
        return cls(name, **kwargs)  # type: ignore[arg-type]


def default_alibi_slopes(n_head: int) -> tuple[float, ...]:
    """Geometric slope ladder 2^(-8h/H) for heads h = 1..H."""
    if n_head < 1:
        raise ValueError("need at least one head")
    return tuple(2.0 ** (-8.0 * (h + 1) / n_head) for h in range(n_head))


@dataclass(frozen=True)
class FrequencySpectrum:
    """Rotary frequencies for one head: freqs[k] = base^(-2k / head_dim).

    Pair k (dims 2k, 2k+1) rotates by angle position * freqs[k]; k = 0 is
    the fastest-turning pair and frequencies decay geometrically from there.
    """

    head_dim: int
    base: float
    freqs: Array

    @classmethod
    def create(cls, head_dim: int, base: float = 10000.0) -> "FrequencySpectrum":
        if head_dim < 2 or head_dim % 2 != 0:
            raise ValueError(f"head_dim must be even and >= 2, got {head_dim}")
        if base <= 0:
            raise ValueError("base must be positive")
        k = np.arange(head_dim // 2, dtype=np.float64)
        freqs = base ** (-2.0 * k / head_dim)
        return cls(head_dim=head_dim, base=base, freqs=freqs)


def rotated_dim_count(head_dim: int, fraction: float) -> int:
    """Number of coordinates rotated for a given pair fraction (always even)."""
    if head_dim < 2 or head_dim % 2 != 0:
        raise ValueError(f"head_dim must be even and >= 2, got {head_dim}")
    if not 0.0 <= fraction <= 1.0:
        raise ValueError("fraction must lie in [0, 1]")
    return 2 * round(fraction * head_dim / 2)


def apply_rotary(
    vecs: Array,
    positions: Array,
    spectrum: FrequencySpectrum,
    rotated_dims: int | None = None,
) -> Array:
    """Rotate the leading ``rotated_dims`` coordinates of each row.

    Coordinates (2k, 2k+1) turn by angle positions[t] * freqs[k]; the
    remaining coordinates pass through unchanged. Rotation preserves norms,
    and positions may be any integers (translation tests rely on this).
    """
    v = np.asarray(vecs, dtype=np.float64)
    pos = np.asarray(positions, dtype=np.float64)
    if v.ndim != 2:
        raise ValueError(f"expected (L, d) vectors, got shape {v.shape}")
    if pos.shape != (v.shape[0],):
        raise ValueError("positions must have one entry per row")
    if rotated_dims is None:
        rotated_dims = min(v.shape[1], spectrum.head_dim)
    if rotated_dims % 2 != 0 or rotated_dims < 0:
        raise ValueError(f"rotated_dims must be even and >= 0, got {rotated_dims}")
    if rotated_dims > v.shape[1]:
        raise ValueError("rotated_dims exceeds the vector width")
    if rotated_dims // 2 > spectrum.freqs.size:
        raise ValueError("spectrum has too few frequencies for rotated_dims")
    out = v.copy()
    if rotated_dims == 0:
        return out
    half = rotated_dims // 2
    angles = pos[:, None] * spectrum.freqs[None, :half]
    cos, sin = np.cos(angles), np.sin(angles)
    x = v[:, :rotated_dims].reshape(v.shape[0], half, 2)
    out[:, 0:rotated_dims:2] = cos * x[:, :, 0] - sin * x[:, :, 1]
    out[:, 1:rotated_dims:2] = sin * x[:, :, 0] + cos * x[:, :, 1]
    return out


def alibi_bias(length: int, slope: float) -> Array:
    """Additive bias matrix -slope * (i - j) on the causal triangle."""
    if length < 1:
        raise ValueError("length must be >= 1")
    if slope < 0:
        raise ValueError("slope must be nonnegative")
    i = np.arange(length, dtype=np.float64)
    return np.tril(-slope * (i[:, None] - i[None, :]))


def semantic_logits(
    q: Array,
    k: Array,
    kind: EncodingKind,
    positions: Array | None = None,
    scale_dim: int | None = None,
) -> Array:
    """Scaled dot-product logits for the semantic channel.

    Rotary kinds rotate copies of q and k before the product. ``scale_dim``
    overrides the 1/sqrt(d) denominator; the attention layer passes the full
    head width there when two routing coordinates ride along. The per-head
    distance bias of the "alibi" kind is not included here (no head context).
    """
    q = np.asarray(q, dtype=np.float64)
    k = np.asarray(k, dtype=np.float64)
    if q.ndim != 2 or q.shape != k.shape:
        raise ValueError(f"q and k must share an (L, d) shape, got {q.shape} vs {k.shape}")
    length, dim = q.shape
    if positions is None:
        positions = np.arange(length)
    positions = np.asarray(positions)
    if positions.shape != (length,):
        raise ValueError("positions must have one entry per row")
    if kind.rotary:
        spectrum = FrequencySpectrum.create(dim, kind.theta)
        rotated = dim if kind.variant == "rope" else rotated_dim_count(dim, kind.fraction)
        q = apply_rotary(q, positions, spectrum, rotated)
        k = apply_rotary(k, positions, spectrum, rotated)
    denom = scale_dim if scale_dim is not None else dim
    if denom < 1:
        raise ValueError("scale_dim must be >= 1")
    return (q @ k.T) / np.sqrt(float(denom))
