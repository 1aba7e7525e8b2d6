"""Post-training diagnostics: attention entropy, gate statistics, rotary
channel norms.

Everything here runs the model forward with capture enabled on a fixed,
seeded set of task samples and reduces the snapshots to small CSV tables.
Entropy is Shannon entropy in nats of each query's causal attention row;
comparisons between two checkpoints always reuse the identical samples.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import ModelConfig, ParamStore, predict_digits
from .niah import NiahSample, batch_arrays, generate_batch
from .numerics import shannon_entropy
from .posenc import FrequencySpectrum, rotated_dim_count
from .train import derive_seed, eval_batch_cap


@dataclass(frozen=True)
class EntropyRow:
    layer: int
    head: int
    mean_entropy: float
    std_entropy: float


@dataclass(frozen=True)
class GateRow:
    layer: int
    head: int
    mask_mean: float
    landmark_mean: float
    query_gate_mean: float
    amplitude: float


@dataclass(frozen=True)
class ChannelRow:
    layer: int
    head: int
    channel: int
    frequency: float
    q_norm: float
    k_norm: float


def analysis_samples(length: int, regime: str, count: int, seed: int):
    """Seeded task batch for diagnostics: (samples, tokens, targets)."""
    samples = generate_batch(length, regime, count, derive_seed(seed, "analysis"))
    tokens, targets = batch_arrays(samples)
    return samples, tokens, targets


def needle_marked_positions(samples: list[NiahSample]) -> list[np.ndarray]:
    """Key and digit positions of every needle, one array per sample."""
    out = []
    for s in samples:
        starts = np.asarray(s.needle_starts, dtype=np.int64)
        out.append(np.sort(np.concatenate([starts, starts + 2])))
    return out


def _captures(store: ParamStore, cfg: ModelConfig, tokens: np.ndarray):
    """Per-batch capture snapshots, chunked the same way as evaluation."""
    cap_batches = []
    cap = eval_batch_cap(tokens.shape[1])
    for lo in range(0, tokens.shape[0], cap):
        capture: dict = {}
        predict_digits(store, cfg, tokens[lo:lo + cap], capture=capture)
        cap_batches.append(capture)
    return cap_batches


def _row_entropies(weights: np.ndarray) -> np.ndarray:
    """(B, H, L, L) attention rows -> (B, H) mean entropy over queries.

    Captured rows are single precision, so they are renormalized in double
    before the entropy validation sees them.
    """
    b, h, length, _ = weights.shape
    out = np.empty((b, h))
    for bi in range(b):
        for hi in range(h):
            vals = []
            for i in range(length):
                row = weights[bi, hi, i, : i + 1].astype(np.float64)
                vals.append(shannon_entropy(row / row.sum()))
            out[bi, hi] = float(np.mean(vals))
    return out


def entropy_profile(store: ParamStore, cfg: ModelConfig,
                    tokens: np.ndarray) -> tuple[list[EntropyRow], np.ndarray]:
    """Mean and spread of attention entropy per (layer, head).

    Each sample contributes its mean row entropy; rows aggregate over
    samples. Also returns the raw (layer, head, sample) tensor so callers
    can difference two models on identical samples.
    """
    per_sample: list[np.ndarray] = []
    for capture in _captures(store, cfg, tokens):
        batch_vals = np.stack(
            [_row_entropies(snap["weights"]) for snap in capture["layers"]]
        )  # (layer, B, H)
        per_sample.append(batch_vals)
    stacked = np.concatenate(per_sample, axis=1)  # (layer, N, H)
    rows = []
    for layer in range(stacked.shape[0]):
        for head in range(stacked.shape[2]):
            vals = stacked[layer, :, head]
            rows.append(EntropyRow(layer, head, float(vals.mean()), float(vals.std())))
    return rows, stacked.transpose(0, 2, 1)  # (layer, head, sample)


def delta_entropy(store_a: ParamStore, cfg_a: ModelConfig,
                  store_b: ParamStore, cfg_b: ModelConfig,
                  tokens: np.ndarray) -> list[tuple[int, int, float]]:
    """Per (layer, head) mean entropy difference A minus B on shared samples."""
    if cfg_a.n_layer != cfg_b.n_layer or cfg_a.n_head != cfg_b.n_head:
        raise ValueError("entropy comparison needs matching layer/head counts")
    _, ea = entropy_profile(store_a, cfg_a, tokens)
    _, eb = entropy_profile(store_b, cfg_b, tokens)
    out = []
    for layer in range(ea.shape[0]):
        for head in range(ea.shape[1]):
            out.append((layer, head, float((ea[layer, head] - eb[layer, head]).mean())))
    return out


def gate_stats(store: ParamStore, cfg: ModelConfig,
               tokens: np.ndarray) -> list[GateRow]:
    """Mean mask value over causal pairs plus mean gate activations."""
    if not cfg.gape:
        raise ValueError("model has no gates to report")
    length = tokens.shape[1]
    pos = np.arange(length, dtype=np.float64)
    sums = None
    count = 0
    for capture in _captures(store, cfg, tokens):
        for li, snap in enumerate(capture["layers"]):
            l = snap["l"].astype(np.float64)  # (B, H, L)
            g = snap["g"].astype(np.float64)
            gamma = snap["Gamma"].astype(np.float64)  # (H,)
            b, h, _ = l.shape
            keep = pos[None, None, None, :] * (1.0 - l[:, :, None, :]) \
                + pos[None, None, :, None] * l[:, :, None, :]
            m = gamma[None, :, None, None] * g[:, :, :, None] / cfg.T_train * keep
            tri = np.tril_indices(length)
            m_mean = m[:, :, tri[0], tri[1]].mean(axis=-1)  # (B, H)
            if sums is None:
                n_layer = cfg.n_layer
                sums = {
                    "m": np.zeros((n_layer, h)), "l": np.zeros((n_layer, h)),
                    "g": np.zeros((n_layer, h)), "gamma": np.zeros((n_layer, h)),
                }
            sums["m"][li] += m_mean.sum(axis=0)
            sums["l"][li] += l.mean(axis=2).sum(axis=0)
            sums["g"][li] += g.mean(axis=2).sum(axis=0)
            sums["gamma"][li] += gamma * b
        count += b
    rows = []
    for layer in range(cfg.n_layer):
        for head in range(cfg.n_head):
            rows.append(GateRow(
                layer, head,
                mask_mean=float(sums["m"][layer, head] / count),
                landmark_mean=float(sums["l"][layer, head] / count),
                query_gate_mean=float(sums["g"][layer, head] / count),
                amplitude=float(sums["gamma"][layer, head] / count),
            ))
    return rows


def landmark_positional_means(store: ParamStore, cfg: ModelConfig,
                              tokens: np.ndarray,
                              marked: list[np.ndarray]) -> list[tuple[int, int, float, float]]:
    """Mean landmark gate at marked positions vs all other positions.

    ``marked[i]`` lists the positions of interest for sample i (for the
    retrieval task: the needle's key and digit slots). Returns one row per
    (layer, head): (layer, head, marked mean, other mean).
    """
    if not cfg.gape:
        raise ValueError("model has no gates to report")
    if len(marked) != tokens.shape[0]:
        raise ValueError("need one marked-position list per sample")
    mask = np.zeros(tokens.shape, dtype=bool)
    for i, cols in enumerate(marked):
        mask[i, cols] = True
    shape = (cfg.n_layer, cfg.n_head)
    sum_marked, sum_other = np.zeros(shape), np.zeros(shape)
    n_marked = n_other = 0
    done = 0
    for capture in _captures(store, cfg, tokens):
        b = capture["layers"][0]["l"].shape[0]
        sel = mask[done:done + b]
        for li, snap in enumerate(capture["layers"]):
            l = snap["l"].astype(np.float64).transpose(1, 0, 2)  # (H, B, L)
            sum_marked[li] += l[:, sel].sum(axis=-1)
            sum_other[li] += l[:, ~sel].sum(axis=-1)
        n_marked += int(sel.sum())
        n_other += int((~sel).sum())
        done += b
    rows = []
    for layer in range(cfg.n_layer):
        for head in range(cfg.n_head):
            rows.append((layer, head,
                         float(sum_marked[layer, head] / n_marked),
                         float(sum_other[layer, head] / n_other)))
    return rows


def channel_norms(store: ParamStore, cfg: ModelConfig,
                  tokens: np.ndarray) -> list[ChannelRow]:
    """Mean 2-norm of each rotary channel pair of q and k.

    Pair norms are rotation invariant, so the pre-rotation snapshots are
    used directly. Only rotary kinds have channels to report.
    """
    kind = cfg.kind
    if not kind.rotary:
        raise ValueError(f"{kind.variant!r} has no rotary channels")
    rot = cfg.qk_dim if kind.variant == "rope" else rotated_dim_count(cfg.qk_dim, kind.fraction)
    if rot < 2:
        raise ValueError("no rotated channel pairs at this fraction")
    spectrum = FrequencySpectrum.create(cfg.qk_dim, kind.theta)
    half = rot // 2
    sums_q = np.zeros((cfg.n_layer, cfg.n_head, half))
    sums_k = np.zeros_like(sums_q)
    count = 0
    for capture in _captures(store, cfg, tokens):
        for li, snap in enumerate(capture["layers"]):
            for name, sums in (("q_sem", sums_q), ("k_sem", sums_k)):
                arr = snap[name].astype(np.float64)  # (B, H, L, dq)
                pairs = arr[..., :rot].reshape(*arr.shape[:-1], half, 2)
                norms = np.sqrt((pairs * pairs).sum(axis=-1))  # (B, H, L, half)
                sums[li] += norms.mean(axis=2).sum(axis=0)
        count += capture["layers"][0]["q_sem"].shape[0]
    rows = []
    for layer in range(cfg.n_layer):
        for head in range(cfg.n_head):
            for ch in range(half):
                rows.append(ChannelRow(
                    layer, head, ch, float(spectrum.freqs[ch]),
                    q_norm=float(sums_q[layer, head, ch] / count),
                    k_norm=float(sums_k[layer, head, ch] / count),
                ))
    return rows


def entropy_rows_to_csv(rows: list[EntropyRow]) -> str:
    lines = ["layer,head,mean_entropy,std_entropy"]
    for r in rows:
        lines.append(f"{r.layer},{r.head},{r.mean_entropy:.6e},{r.std_entropy:.6e}")
    return "\n".join(lines) + "\n"


def delta_rows_to_csv(rows: list[tuple[int, int, float]]) -> str:
    lines = ["layer,head,delta_entropy"]
    for layer, head, value in rows:
        lines.append(f"{layer},{head},{value:.6e}")
    return "\n".join(lines) + "\n"


def landmark_rows_to_csv(rows: list[tuple[int, int, float, float]]) -> str:
    lines = ["layer,head,needle_mean,filler_mean,ratio"]
    for layer, head, needle, filler in rows:
        ratio = needle / filler if filler > 0 else float("inf")
        lines.append(f"{layer},{head},{needle:.6e},{filler:.6e},{ratio:.6e}")
    return "\n".join(lines) + "\n"


def gate_rows_to_csv(rows: list[GateRow]) -> str:
    lines = ["layer,head,mask_mean,landmark_mean,query_gate_mean,amplitude"]
    for r in rows:
        lines.append(f"{r.layer},{r.head},{r.mask_mean:.6e},{r.landmark_mean:.6e},"
                     f"{r.query_gate_mean:.6e},{r.amplitude:.6e}")
    return "\n".join(lines) + "\n"


def channel_rows_to_csv(rows: list[ChannelRow]) -> str:
    lines = ["layer,head,channel,frequency,q_norm,k_norm"]
    for r in rows:
        lines.append(f"{r.layer},{r.head},{r.channel},{r.frequency:.6e},"
                     f"{r.q_norm:.6e},{r.k_norm:.6e}")
    return "\n".join(lines) + "\n"
