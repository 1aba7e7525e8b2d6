"""Tiny pre-norm decoder with optional gated positional masking.

Two-layer GPT-2 style stack: embeddings, per-head causal attention with
one of the supported positional mechanisms, 4x GELU MLPs, untied output
head. When the gated mask is on, each head's q/k projections give up two
coordinates to the routing channel (so cache shapes never change) and the
mask rides inside the ordinary scaled dot product via the fused augmented
form. Logits are always scaled by the full head width so gated and
ungated models with matching projection widths are directly comparable.
"""
from __future__ import annotations

import ast
import hashlib
import io
import math
from dataclasses import dataclass, fields
from functools import lru_cache

import numpy as np

from . import autodiff as ad
from .niah import N_DIGITS, VOCAB_SIZE
from .numerics import make_rng
from .posenc import EncodingKind, FrequencySpectrum, alibi_bias, rotated_dim_count

GAPE_INIT_B_G = -3.0
GAPE_INIT_B_L = 0.0
GAPE_INIT_GAMMA_RAW = 0.5413  # softplus of this is 1.0 to four decimals
INIT_STD = 0.02
LN_EPS = 1e-5


@dataclass(frozen=True)
class ModelConfig:
    n_layer: int = 2
    n_head: int = 2
    d_model: int = 64
    vocab_size: int = VOCAB_SIZE
    kind_spec: str = "nope"
    gape: bool = False
    T_train: int = 256
    gates_from_rotated: bool = False
    d_qk: int | None = None

    def __post_init__(self) -> None:
        if self.d_model % self.n_head != 0:
            raise ValueError("d_model must be divisible by n_head")
        if self.T_train < 1:
            raise ValueError("T_train must be >= 1")
        kind = self.kind
        if self.gape and kind.variant == "alibi":
            raise ValueError("gated mask and distance bias do not combine")
        if self.gape and self.head_dim < 4:
            raise ValueError("gated attention needs head_dim >= 4")
        if self.qk_dim < 1 or self.qk_dim > self.head_dim:
            raise ValueError("q/k width must lie in [1, head_dim]")
        if kind.rotary and self.qk_dim % 2 != 0:
            raise ValueError("rotary q/k width must be even")
        if kind.variant == "alibi" and len(kind.slopes) != self.n_head:
            raise ValueError("need one bias slope per head")

    @property
    def kind(self) -> EncodingKind:
        return EncodingKind.from_spec_string(self.kind_spec)

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_head

    @property
    def qk_dim(self) -> int:
        if self.d_qk is not None:
            return self.d_qk
        return self.head_dim - 2 if self.gape else self.head_dim


def make_model_config(pe: str, gape: bool, n_layer: int = 2, n_head: int = 2,
                      d_model: int = 64, t_train: int = 256,
                      d_qk: int | None = None) -> ModelConfig:
    """Resolve a CLI-level (pe, gape) choice into a full config."""
    if pe == "alibi":
        kind = EncodingKind.alibi(n_head)
    elif pe == "nope":
        kind = EncodingKind.nope()
    elif pe == "rope":
        kind = EncodingKind.rope()
    elif pe == "prope":
        kind = EncodingKind.prope()
    else:
        raise ValueError(f"unknown positional encoding {pe!r}")
    return ModelConfig(n_layer=n_layer, n_head=n_head, d_model=d_model,
                       kind_spec=kind.spec_string(), gape=gape,
                       T_train=t_train, d_qk=d_qk)


@dataclass
class Param:
    name: str
    data: np.ndarray
    decay: bool
    gape: bool = False


class ParamStore:
    """Ordered named parameters; iteration order is creation order."""

    def __init__(self) -> None:
        self._params: dict[str, Param] = {}

    def add(self, name: str, data: np.ndarray, decay: bool, gape: bool = False) -> None:
        if name in self._params:
            raise ValueError(f"duplicate parameter {name!r}")
        self._params[name] = Param(name, data, decay, gape)

    def __getitem__(self, name: str) -> Param:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self):
        return iter(self._params.values())

    def names(self) -> list[str]:
        return list(self._params)

    def tensors(self) -> dict[str, ad.Tensor]:
        """Fresh autodiff handles sharing this store's arrays."""
        return {p.name: ad.Tensor(p.data, requires_grad=True) for p in self}

    def astype(self, dtype) -> "ParamStore":
        out = ParamStore()
        for p in self:
            out.add(p.name, p.data.astype(dtype), p.decay, p.gape)
        return out

    def n_parameters(self) -> int:
        return sum(p.data.size for p in self)


def init_params(cfg: ModelConfig, seed: int, dtype=np.float32) -> ParamStore:
    """Seeded initialization.

    Matrices draw N(0, 0.02); biases and layer norms are deterministic, and
    the gate parameters start at their fixed defaults (zero projections,
    nearly-closed query gate, undecided landmarks, unit amplitude), so a
    gated and an ungated model with the same seed share every common weight.
    """
    rng = make_rng(seed, "init")
    store = ParamStore()

    def mat(name: str, shape: tuple[int, ...], decay: bool = True) -> None:
        store.add(name, rng.normal(0.0, INIT_STD, size=shape).astype(dtype), decay)

    def vec(name: str, shape: tuple[int, ...], value: float = 0.0,
            gape: bool = False) -> None:
        store.add(name, np.full(shape, value, dtype=dtype), decay=False, gape=gape)

    d, h = cfg.d_model, cfg.n_head
    dq, dh = cfg.qk_dim, cfg.head_dim
    mat("wte", (cfg.vocab_size, d))
    for i in range(cfg.n_layer):
        vec(f"h{i}.ln1.w", (d,), 1.0)
        vec(f"h{i}.ln1.b", (d,))
        mat(f"h{i}.attn.wq", (d, h * dq))
        vec(f"h{i}.attn.bq", (h * dq,))
        mat(f"h{i}.attn.wk", (d, h * dq))
        vec(f"h{i}.attn.bk", (h * dq,))
        mat(f"h{i}.attn.wv", (d, h * dh))
        vec(f"h{i}.attn.bv", (h * dh,))
        mat(f"h{i}.attn.wo", (h * dh, d))
        vec(f"h{i}.attn.bo", (d,))
        if cfg.gape:
            store.add(f"h{i}.gape.wl", np.zeros((h, dq), dtype=dtype), False, True)
            vec(f"h{i}.gape.bl", (h,), GAPE_INIT_B_L, gape=True)
            store.add(f"h{i}.gape.wg", np.zeros((h, dq), dtype=dtype), False, True)
            vec(f"h{i}.gape.bg", (h,), GAPE_INIT_B_G, gape=True)
            vec(f"h{i}.gape.gamma", (h,), GAPE_INIT_GAMMA_RAW, gape=True)
        vec(f"h{i}.ln2.w", (d,), 1.0)
        vec(f"h{i}.ln2.b", (d,))
        mat(f"h{i}.mlp.w1", (d, 4 * d))
        vec(f"h{i}.mlp.b1", (4 * d,))
        mat(f"h{i}.mlp.w2", (4 * d, d))
        vec(f"h{i}.mlp.b2", (d,))
    vec("lnf.w", (d,), 1.0)
    vec("lnf.b", (d,))
    mat("head.w", (d, cfg.vocab_size))
    return store


def set_gape_off(store: ParamStore, cfg: ModelConfig) -> None:
    """Drive every query gate to exactly zero (mask vanishes identically)."""
    if not cfg.gape:
        raise ValueError("model has no gate parameters")
    for i in range(cfg.n_layer):
        store[f"h{i}.gape.wg"].data[:] = 0.0
        store[f"h{i}.gape.bg"].data[:] = -1e6


@lru_cache(maxsize=16)
def _rotary_tables(length: int, qk_dim: int, theta: float, rotated: int,
                   dtype_str: str) -> tuple[np.ndarray, np.ndarray]:
    spectrum = FrequencySpectrum.create(qk_dim, theta)
    pos = np.arange(length, dtype=np.float64)
    angles = pos[:, None] * spectrum.freqs[None, : rotated // 2]
    dtype = np.dtype(dtype_str)
    return np.cos(angles).astype(dtype), np.sin(angles).astype(dtype)


@lru_cache(maxsize=16)
def _alibi_table(length: int, slopes: tuple[float, ...], dtype_str: str) -> np.ndarray:
    dtype = np.dtype(dtype_str)
    return np.stack(
        [alibi_bias(length, s) for s in slopes]
    )[None].astype(dtype)


def _linear(x: ad.Tensor, w: ad.Tensor, b: ad.Tensor) -> ad.Tensor:
    return ad.add(ad.matmul(x, w), b)


def _heads(x: ad.Tensor, batch: int, length: int, n_head: int, width: int) -> ad.Tensor:
    return ad.swapaxes(ad.reshape(x, (batch, length, n_head, width)), 1, 2)


def forward_batch(
    store: ParamStore,
    cfg: ModelConfig,
    tokens: np.ndarray,
    final_only: bool = True,
    capture: dict | None = None,
    params: dict[str, ad.Tensor] | None = None,
) -> ad.Tensor:
    """Logits over the vocabulary: (B, V) at the last position when
    ``final_only``, else (B, L, V).

    ``capture``, when a dict, receives per-layer numpy snapshots (attention
    weights, gate activations, pre-rotation q/k) for analysis. ``params``
    lets a caller pass pre-built autodiff handles (the training step reuses
    them to read gradients back).
    """
    tokens = np.asarray(tokens)
    if tokens.ndim != 2:
        raise ValueError(f"tokens must be (batch, length), got {tokens.shape}")
    if tokens.min() < 0 or tokens.max() >= cfg.vocab_size:
        raise ValueError("token id out of range")
    batch, length = tokens.shape
    p = params if params is not None else store.tensors()
    dtype = store["wte"].data.dtype
    kind = cfg.kind
    dq, dh, nh = cfg.qk_dim, cfg.head_dim, cfg.n_head
    inv_sqrt = 1.0 / math.sqrt(float(dh))
    positions = np.arange(length, dtype=dtype)
    pos_over_t = positions[:, None] / dtype.type(cfg.T_train)

    if capture is not None:
        capture["layers"] = [dict() for _ in range(cfg.n_layer)]

    rot = 0
    cos = sin = None
    if kind.rotary:
        rot = dq if kind.variant == "rope" else rotated_dim_count(dq, kind.fraction)
        if rot:
            cos, sin = _rotary_tables(length, dq, kind.theta, rot, dtype.str)

    x = ad.gather_rows(p["wte"], tokens)
    for i in range(cfg.n_layer):
        # Only the final query feeds the loss, so the last layer can restrict
        # its query side to that one position; keys/values (and every earlier
        # layer) stay full. The dropped computations carry zero gradient.
        last_fast = final_only and capture is None and i == cfg.n_layer - 1
        q_lo = length - 1 if last_fast else 0
        n_q = length - q_lo

        h = ad.layernorm(x, p[f"h{i}.ln1.w"], p[f"h{i}.ln1.b"], LN_EPS)
        h_q = ad.slice_axis(h, 1, q_lo, length) if last_fast else h
        q = _heads(_linear(h_q, p[f"h{i}.attn.wq"], p[f"h{i}.attn.bq"]), batch, n_q, nh, dq)
        k = _heads(_linear(h, p[f"h{i}.attn.wk"], p[f"h{i}.attn.bk"]), batch, length, nh, dq)
        v = _heads(_linear(h, p[f"h{i}.attn.wv"], p[f"h{i}.attn.bv"]), batch, length, nh, dh)

        q_rot, k_rot = q, k
        if rot:
            q_rot = ad.apply_rotary(q, cos[q_lo:], sin[q_lo:], rot)
            k_rot = ad.apply_rotary(k, cos, sin, rot)

        if cfg.gape:
            gate_q, gate_k = (q_rot, k_rot) if cfg.gates_from_rotated else (q, k)
            wl = ad.reshape(p[f"h{i}.gape.wl"], (1, nh, 1, dq))
            wg = ad.reshape(p[f"h{i}.gape.wg"], (1, nh, 1, dq))
            bl = ad.reshape(p[f"h{i}.gape.bl"], (1, nh, 1))
            bg = ad.reshape(p[f"h{i}.gape.bg"], (1, nh, 1))
            l_gate = ad.sigmoid(ad.add(ad.sum_axis(ad.mul(gate_k, wl), -1), bl))
            g_gate = ad.softplus(ad.add(ad.sum_axis(ad.mul(gate_q, wg), -1), bg))
            gamma = ad.reshape(ad.softplus(p[f"h{i}.gape.gamma"]), (1, nh, 1, 1))

            g3 = ad.reshape(g_gate, (batch, nh, n_q, 1))
            l3 = ad.reshape(l_gate, (batch, nh, length, 1))
            amp = ad.mul(gamma, g3)
            q_route_1 = ad.scale(amp, math.sqrt(float(dh)))
            q_route_2 = ad.mul(q_route_1, ad.constant(pos_over_t[q_lo:]))
            one = ad.constant(np.ones(1, dtype=dtype))
            k_route_1 = ad.mul(ad.constant(pos_over_t),
                               ad.add(ad.scale(l3, -1.0), one))
            k_route_2 = l3
            q_full = ad.concat_last([q_rot, q_route_1, q_route_2])
            k_full = ad.concat_last([k_rot, k_route_1, k_route_2])
            scores = ad.scale(ad.matmul(q_full, ad.swapaxes(k_full, -1, -2)), inv_sqrt)
        else:
            scores = ad.scale(ad.matmul(q_rot, ad.swapaxes(k_rot, -1, -2)), inv_sqrt)
            if kind.variant == "alibi":
                bias = _alibi_table(length, kind.slopes, dtype.str)
                scores = ad.add(scores, ad.constant(bias[:, :, q_lo:, :]))

        # The final position attends everywhere, so its sliced row needs no
        # causal mask at all.
        probs = ad.row_softmax(scores) if last_fast else ad.causal_softmax(scores)
        ctx = ad.matmul(probs, v)
        merged = ad.reshape(ad.swapaxes(ctx, 1, 2), (batch, n_q, nh * dh))
        x_res = ad.slice_axis(x, 1, q_lo, length) if last_fast else x
        x = ad.add(x_res, _linear(merged, p[f"h{i}.attn.wo"], p[f"h{i}.attn.bo"]))
        h2 = ad.layernorm(x, p[f"h{i}.ln2.w"], p[f"h{i}.ln2.b"], LN_EPS)
        mlp = _linear(ad.gelu(_linear(h2, p[f"h{i}.mlp.w1"], p[f"h{i}.mlp.b1"])),
                      p[f"h{i}.mlp.w2"], p[f"h{i}.mlp.b2"])
        x = ad.add(x, mlp)

        if capture is not None:
            snap = capture["layers"][i]
            snap["weights"] = probs.data.copy()
            snap["q_sem"] = q.data.copy()
            snap["k_sem"] = k.data.copy()
            if cfg.gape:
                snap["l"] = l_gate.data.copy()
                snap["g"] = g_gate.data.copy()
                snap["Gamma"] = gamma.data.reshape(nh).copy()

    x = ad.layernorm(x, p["lnf.w"], p["lnf.b"], LN_EPS)
    if final_only:
        x = ad.take_index(x, 1, x.data.shape[1] - 1)
    return ad.matmul(x, p["head.w"])


def digit_logits(full_logits: ad.Tensor) -> ad.Tensor:
    return ad.slice_last(full_logits, 0, N_DIGITS)


def loss_and_grads(
    store: ParamStore,
    cfg: ModelConfig,
    tokens: np.ndarray,
    targets: np.ndarray,
) -> tuple[float, dict[str, np.ndarray]]:
    """Mean digit cross-entropy at the final position, plus all gradients."""
    handles = store.tensors()
    logits = forward_batch(store, cfg, tokens, final_only=True, params=handles)
    loss = ad.mean_cross_entropy(digit_logits(logits), targets)
    loss.backward()
    grads = {
        name: (t.grad if t.grad is not None else np.zeros_like(t.data))
        for name, t in handles.items()
    }
    return float(loss.data), grads


def predict_digits(store: ParamStore, cfg: ModelConfig, tokens: np.ndarray,
                   capture: dict | None = None) -> np.ndarray:
    """Argmax digit at the final position. Ties break to the lowest digit."""
    with ad.no_grad():
        logits = forward_batch(store, cfg, tokens, final_only=True, capture=capture)
    return np.argmax(logits.data[:, :N_DIGITS], axis=1)


# ----------------------------------------------------------------------------
# checkpoint format: text header + raw little-endian arrays + sha256 trailer


_MAGIC = b"GAPELABCKPT1\n"


def _cfg_to_lines(cfg: ModelConfig) -> list[str]:
    out = []
    for f in fields(cfg):
        out.append(f"cfg.{f.name}={getattr(cfg, f.name)!r}")
    return out


def _cfg_from_lines(lines: dict[str, str]) -> ModelConfig:
    kwargs = {}
    for f in fields(ModelConfig):
        kwargs[f.name] = ast.literal_eval(lines[f"cfg.{f.name}"])
    return ModelConfig(**kwargs)


def save_checkpoint(path: str, cfg: ModelConfig, store: ParamStore,
                    meta: dict[str, str] | None = None) -> None:
    buf = io.BytesIO()
    buf.write(_MAGIC)
    header = list(_cfg_to_lines(cfg))
    for key, value in (meta or {}).items():
        if any(c in key or c in str(value) for c in "\n="):
            raise ValueError("meta entries must be single-line and '='-free")
        header.append(f"meta.{key}={value}")
    buf.write(("\n".join(header) + "\n").encode("ascii"))
    buf.write(f"params {sum(1 for _ in store)}\n".encode("ascii"))
    for p in store:
        arr = np.ascontiguousarray(p.data)
        le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        dims = ",".join(str(n) for n in arr.shape) or "scalar"
        buf.write(f"param {p.name} {arr.dtype.name} {dims} {int(p.decay)} "
                  f"{int(p.gape)}\n".encode("ascii"))
        buf.write(le.tobytes())
        buf.write(b"\n")
    digest = hashlib.sha256(buf.getvalue()).hexdigest()
    buf.write(f"sha256 {digest}\n".encode("ascii"))
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_checkpoint(path: str) -> tuple[ModelConfig, ParamStore, dict[str, str]]:
    with open(path, "rb") as fh:
        blob = fh.read()
    trailer_at = blob.rfind(b"sha256 ")
    if trailer_at < 0 or not blob.startswith(_MAGIC):
        raise ValueError(f"{path} is not a checkpoint")
    stated = blob[trailer_at:].decode("ascii").strip().split()[1]
    if hashlib.sha256(blob[:trailer_at]).hexdigest() != stated:
        raise ValueError(f"{path} failed its integrity check")
    view = io.BytesIO(blob[len(_MAGIC):trailer_at])

    cfg_lines: dict[str, str] = {}
    meta: dict[str, str] = {}
    n_params = None
    while True:
        line = view.readline().decode("ascii").rstrip("\n")
        if line.startswith("params "):
            n_params = int(line.split()[1])
            break
        key, _, value = line.partition("=")
        if key.startswith("cfg."):
            cfg_lines[key] = value
        elif key.startswith("meta."):
            meta[key[5:]] = value
        else:
            raise ValueError(f"unexpected checkpoint line {line!r}")
    cfg = _cfg_from_lines(cfg_lines)
    store = ParamStore()
    for _ in range(n_params):
        head = view.readline().decode("ascii").split()
        _, name, dtype_name, dims, decay, gape = head
        shape = () if dims == "scalar" else tuple(int(n) for n in dims.split(","))
        dtype = np.dtype(dtype_name).newbyteorder("<")
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        raw = view.read(count * dtype.itemsize)
        view.read(1)
        arr = np.frombuffer(raw, dtype=dtype).reshape(shape).astype(np.dtype(dtype_name))
        store.add(name, arr.copy(), bool(int(decay)), bool(int(gape)))
    return cfg, store, meta


# ----------------------------------------------------------------------------
# gradient verification


def finite_difference_check(
    cfg: ModelConfig,
    seed: int = 0,
    n_coords: int = 60,
    h: float = 1e-4,
    batch: int = 2,
    length: int = 32,
) -> tuple[float, list[tuple[str, int, float, float, float]]]:
    """Central-difference check of the full training gradient in float64.

    Coordinates cover every gate parameter group plus a random sample from
    each weight family. Returns the max relative error and per-coordinate
    rows (name, flat index, analytic, numeric, rel error).
    """
    rng = make_rng(seed, "fdcheck")
    store = init_params(cfg, seed).astype(np.float64)
    tokens = rng.integers(0, cfg.vocab_size, size=(batch, length))
    targets = rng.integers(0, N_DIGITS, size=batch)
    # Perturb the gate params off their symmetric init so gradients there
    # are generic rather than structurally zero.
    for p in store:
        if p.gape:
            p.data += rng.normal(0.0, 0.05, size=p.data.shape)

    _, grads = loss_and_grads(store, cfg, tokens, targets)

    def loss_at() -> float:
        with ad.no_grad():
            logits = forward_batch(store, cfg, tokens, final_only=True)
            loss = ad.mean_cross_entropy(digit_logits(logits), targets)
        return float(loss.data)

    coords: list[tuple[str, int]] = []
    gape_names = [p.name for p in store if p.gape]
    for name in gape_names:
        size = store[name].data.size
        take = min(2, size)
        for idx in rng.choice(size, size=take, replace=False):
            coords.append((name, int(idx)))
    other = [p.name for p in store if not p.gape]
    while len(coords) < n_coords:
        name = other[int(rng.integers(0, len(other)))]
        coords.append((name, int(rng.integers(0, store[name].data.size))))

    rows = []
    worst = 0.0
    for name, idx in coords:
        flat = store[name].data.reshape(-1)
        keep = flat[idx]
        flat[idx] = keep + h
        up = loss_at()
        flat[idx] = keep - h
        down = loss_at()
        flat[idx] = keep
        numeric = (up - down) / (2.0 * h)
        analytic = float(grads[name].reshape(-1)[idx])
        rel = abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-6)
        rows.append((name, idx, analytic, numeric, rel))
        worst = max(worst, rel)
    return worst, rows
