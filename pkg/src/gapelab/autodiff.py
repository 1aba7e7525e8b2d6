"""Minimal reverse-mode engine on numpy arrays.

Tape-free micrograd style: each tensor produced by an op carries a closure
that routes its output gradient to its parents. Fused ops (layernorm,
causal softmax, gelu, rotary, cross-entropy) keep the hot paths at a few
BLAS calls and elementwise passes per step, which is what makes CPU
training of the toy decoder practical.

All ops preserve the dtype of their inputs: training runs in float32, the
finite-difference checks in float64.
"""
from __future__ import annotations

import contextlib
from functools import lru_cache
from typing import Callable, Iterable, Sequence

import numpy as np

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable graph construction (inference / evaluation)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_bwd")

    def __init__(self, data: np.ndarray, requires_grad: bool = False):
        self.data = np.asarray(data)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._bwd: Callable[[np.ndarray], None] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def _acc(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = g.copy() if isinstance(g, np.ndarray) else np.asarray(g)
        else:
            self.grad += g

    def backward(self) -> None:
        """Reverse pass from this (scalar) tensor through the graph."""
        if self.data.size != 1:
            raise ValueError("backward() expects a scalar loss")
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._bwd is not None and node.grad is not None:
                node._bwd(node.grad)

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __mul__(self, other: "Tensor") -> "Tensor":
        return mul(self, other)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)


def _make(data: np.ndarray, parents: Sequence[Tensor],
          bwd: Callable[[np.ndarray], None]) -> Tensor:
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._bwd = bwd
    return out


def constant(data: np.ndarray) -> Tensor:
    return Tensor(np.asarray(data))


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a gradient down to the shape it was broadcast from."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def add(a: Tensor, b: Tensor) -> Tensor:
    data = a.data + b.data

    def bwd(g: np.ndarray) -> None:
        if a.requires_grad:
            a._acc(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b._acc(_unbroadcast(g, b.data.shape))

    return _make(data, (a, b), bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    data = a.data * b.data

    def bwd(g: np.ndarray) -> None:
        if a.requires_grad:
            a._acc(_unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            b._acc(_unbroadcast(g * a.data, b.data.shape))

    return _make(data, (a, b), bwd)


def scale(x: Tensor, c: float) -> Tensor:
    cv = np.asarray(c, dtype=x.data.dtype)
    data = x.data * cv

    def bwd(g: np.ndarray) -> None:
        x._acc(g * cv)

    return _make(data, (x,), bwd)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    data = np.matmul(a.data, b.data)

    def bwd(g: np.ndarray) -> None:
        if a.requires_grad:
            ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
            a._acc(_unbroadcast(ga, a.data.shape))
        if b.requires_grad:
            gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
            b._acc(_unbroadcast(gb, b.data.shape))

    return _make(data, (a, b), bwd)


def swapaxes(x: Tensor, ax1: int, ax2: int) -> Tensor:
    # Contiguous copy so downstream BLAS calls never work on strided views.
    data = np.ascontiguousarray(np.swapaxes(x.data, ax1, ax2))

    def bwd(g: np.ndarray) -> None:
        x._acc(np.ascontiguousarray(np.swapaxes(g, ax1, ax2)))

    return _make(data, (x,), bwd)


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    data = x.data.reshape(shape)

    def bwd(g: np.ndarray) -> None:
        x._acc(g.reshape(x.data.shape))

    return _make(data, (x,), bwd)


def concat_last(parts: Iterable[Tensor]) -> Tensor:
    parts = list(parts)
    widths = [p.data.shape[-1] for p in parts]
    data = np.concatenate([p.data for p in parts], axis=-1)

    def bwd(g: np.ndarray) -> None:
        offset = 0
        for p, w in zip(parts, widths):
            if p.requires_grad:
                p._acc(g[..., offset:offset + w])
            offset += w

    return _make(data, parts, bwd)


def slice_last(x: Tensor, start: int, stop: int) -> Tensor:
    data = x.data[..., start:stop]

    def bwd(g: np.ndarray) -> None:
        full = np.zeros_like(x.data)
        full[..., start:stop] = g
        x._acc(full)

    return _make(data, (x,), bwd)


def slice_axis(x: Tensor, axis: int, start: int, stop: int) -> Tensor:
    """Contiguous slice along one axis (gradient zero-fills the rest)."""
    sl = [slice(None)] * x.data.ndim
    sl[axis] = slice(start, stop)
    data = x.data[tuple(sl)]

    def bwd(g: np.ndarray) -> None:
        full = np.zeros_like(x.data)
        full[tuple(sl)] = g
        x._acc(full)

    return _make(data, (x,), bwd)


def take_index(x: Tensor, axis: int, index: int) -> Tensor:
    """Select one index along an axis, dropping that axis."""
    data = np.take(x.data, index, axis=axis)

    def bwd(g: np.ndarray) -> None:
        full = np.zeros_like(x.data)
        sl = [slice(None)] * x.data.ndim
        sl[axis] = index
        full[tuple(sl)] = g
        x._acc(full)

    return _make(data, (x,), bwd)


def sum_axis(x: Tensor, axis: int) -> Tensor:
    data = x.data.sum(axis=axis)

    def bwd(g: np.ndarray) -> None:
        x._acc(np.broadcast_to(np.expand_dims(g, axis), x.data.shape))

    return _make(data, (x,), bwd)


def gather_rows(table: Tensor, ids: np.ndarray) -> Tensor:
    """Embedding lookup: out[..., :] = table[ids[...], :]."""
    ids = np.asarray(ids)
    data = table.data[ids]

    def bwd(g: np.ndarray) -> None:
        full = np.zeros_like(table.data)
        np.add.at(full, ids, g)
        table._acc(full)

    return _make(data, (table,), bwd)


def sigmoid(x: Tensor) -> Tensor:
    d = x.data
    out = np.empty_like(d)
    pos = d >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-d[pos]))
    ex = np.exp(d[~pos])
    out[~pos] = ex / (1.0 + ex)

    def bwd(g: np.ndarray) -> None:
        x._acc(g * out * (1.0 - out))

    return _make(out, (x,), bwd)


def softplus(x: Tensor) -> Tensor:
    d = x.data
    out = np.maximum(d, 0) + np.log1p(np.exp(-np.abs(d)))

    def bwd(g: np.ndarray) -> None:
        # sigmoid recovered from the output: sigma(x) = 1 - e^(-softplus(x)).
        x._acc(g * (1.0 - np.exp(-out)))

    return _make(out, (x,), bwd)


_GELU_C = 0.7978845608028654  # sqrt(2 / pi)
_GELU_A = 0.044715


def gelu(x: Tensor) -> Tensor:
    d = x.data
    c = np.asarray(_GELU_C, dtype=d.dtype)
    a = np.asarray(_GELU_A, dtype=d.dtype)
    inner = c * (d + a * d * d * d)
    t = np.tanh(inner)
    out = 0.5 * d * (1.0 + t)

    def bwd(g: np.ndarray) -> None:
        sech2 = 1.0 - t * t
        deriv = 0.5 * (1.0 + t) + 0.5 * d * sech2 * c * (1.0 + 3.0 * a * d * d)
        x._acc(g * deriv)

    return _make(out.astype(d.dtype, copy=False), (x,), bwd)


def layernorm(x: Tensor, w: Tensor, b: Tensor, eps: float = 1e-5) -> Tensor:
    d = x.data
    mu = d.mean(axis=-1, keepdims=True)
    xc = d - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + np.asarray(eps, dtype=d.dtype))
    xhat = xc * inv
    out = xhat * w.data + b.data

    def bwd(g: np.ndarray) -> None:
        n_axes = tuple(range(g.ndim - 1))
        if w.requires_grad:
            w._acc((g * xhat).sum(axis=n_axes))
        if b.requires_grad:
            b._acc(g.sum(axis=n_axes))
        if x.requires_grad:
            gx = g * w.data
            m1 = gx.mean(axis=-1, keepdims=True)
            m2 = (gx * xhat).mean(axis=-1, keepdims=True)
            x._acc(inv * (gx - m1 - xhat * m2))

    return _make(out.astype(d.dtype, copy=False), (x, w, b), bwd)


@lru_cache(maxsize=8)
def _causal_mask(length: int) -> np.ndarray:
    return np.tril(np.ones((length, length), dtype=bool))


def row_softmax(scores: Tensor) -> Tensor:
    """Softmax over the last axis with full support (for a query that may
    attend everywhere, e.g. the final position of a causal sequence)."""
    d = scores.data
    shifted = d - d.max(axis=-1, keepdims=True)
    probs = np.exp(shifted)
    probs /= probs.sum(axis=-1, keepdims=True)

    def bwd(g: np.ndarray) -> None:
        t = g * probs
        scores._acc(t - probs * t.sum(axis=-1, keepdims=True))

    return _make(probs, (scores,), bwd)


def causal_softmax(scores: Tensor) -> Tensor:
    """Row softmax over the last axis restricted to j <= i."""
    d = scores.data
    length = d.shape[-1]
    if d.shape[-2] != length:
        raise ValueError(f"expected square score matrices, got {d.shape}")
    mask = _causal_mask(length)
    masked = np.where(mask, d, np.asarray(-np.inf, dtype=d.dtype))
    masked -= masked.max(axis=-1, keepdims=True)
    probs = np.exp(masked)
    probs /= probs.sum(axis=-1, keepdims=True)

    def bwd(g: np.ndarray) -> None:
        t = g * probs
        scores._acc(t - probs * t.sum(axis=-1, keepdims=True))

    return _make(probs, (scores,), bwd)


def apply_rotary(x: Tensor, cos: np.ndarray, sin: np.ndarray, rotated: int) -> Tensor:
    """Rotate the first ``rotated`` coordinates of the last axis pairwise.

    cos/sin have shape (L, rotated / 2) and broadcast over leading axes;
    the last-but-one axis of x must be the position axis. The inverse
    rotation is its own adjoint, which is what the backward pass applies.
    """
    if rotated % 2 != 0 or rotated < 0:
        raise ValueError(f"rotated must be even and >= 0, got {rotated}")
    d = x.data
    if rotated > d.shape[-1]:
        raise ValueError("rotated exceeds the vector width")
    if rotated == 0:
        return x
    half = rotated // 2
    if cos.shape != (d.shape[-2], half) or sin.shape != cos.shape:
        raise ValueError("cos/sin tables do not match (positions, rotated/2)")
    out = d.copy()
    xe = d[..., 0:rotated:2]
    xo = d[..., 1:rotated:2]
    out[..., 0:rotated:2] = cos * xe - sin * xo
    out[..., 1:rotated:2] = sin * xe + cos * xo

    def bwd(g: np.ndarray) -> None:
        gx = g.copy()
        ge = g[..., 0:rotated:2]
        go = g[..., 1:rotated:2]
        gx[..., 0:rotated:2] = cos * ge + sin * go
        gx[..., 1:rotated:2] = -sin * ge + cos * go
        x._acc(gx)

    return _make(out, (x,), bwd)


def mean_cross_entropy(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean cross-entropy of (B, K) logits against integer targets."""
    d = logits.data
    if d.ndim != 2:
        raise ValueError(f"expected (batch, classes) logits, got {d.shape}")
    targets = np.asarray(targets)
    if targets.shape != (d.shape[0],):
        raise ValueError("need one target per row")
    if targets.min() < 0 or targets.max() >= d.shape[1]:
        raise ValueError("target out of range")
    m = d.max(axis=1, keepdims=True)
    z = d - m
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True)) + m
    rows = np.arange(d.shape[0])
    losses = (lse[:, 0] - d[rows, targets])
    out = np.asarray(losses.mean(), dtype=d.dtype)
    probs = np.exp(d - lse)

    def bwd(g: np.ndarray) -> None:
        gl = probs.copy()
        gl[rows, targets] -= 1.0
        gl *= g / d.shape[0]
        logits._acc(gl.astype(d.dtype, copy=False))

    return _make(out, (logits,), bwd)
