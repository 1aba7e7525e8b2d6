"""Synthetic needle-in-a-haystack retrieval task.

A sequence of filler tokens hides several key/value triples
(KEY, =, digit); the final token is a query marker and the label is the
digit of one designated triple: the first, the middle, or the last one.
Needle count scales with length (one per 64 tokens) and each needle lands
uniformly inside its own chunk of the prefix, so spacing stays roughly
even at every length.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import stats

from .numerics import make_rng

N_DIGITS = 10
KEY_TOKEN = 10
EQ_TOKEN = 11
QUERY_TOKEN = 12
FILLER_BASE = 13
N_FILLERS = 14
VOCAB_SIZE = FILLER_BASE + N_FILLERS

REGIMES = ("first", "middle", "last")

NEEDLE_LEN = 3
TOKENS_PER_NEEDLE = 64


@dataclass(frozen=True)
class NiahSample:
    """One generated sequence with its bookkeeping.

    ``tokens`` has length L and ends with the query marker. ``needle_starts``
    are the KEY positions in ascending order; ``digits`` the corresponding
    values; ``target`` the digit the model must produce.
    """

    tokens: np.ndarray
    needle_starts: tuple[int, ...]
    digits: tuple[int, ...]
    target: int
    regime: str


def needle_count(length: int) -> int:
    """One needle per 64 tokens of context."""
    if length < 1:
        raise ValueError("length must be >= 1")
    return length // TOKENS_PER_NEEDLE


def _chunk_bounds(prefix_len: int, n: int) -> list[tuple[int, int]]:
    return [(k * prefix_len // n, (k + 1) * prefix_len // n) for k in range(n)]


def generate(length: int, regime: str, rng: np.random.Generator,
             n_needles: int | None = None) -> NiahSample:
    """Generate one sample.

    The prefix is everything before the final query marker. Chunk k of the
    prefix receives one needle whose start is drawn uniformly from the
    chunk, redrawn (up to 100 times) if the triple would not fit before the
    query or would overlap the previous needle.
    """
    if regime not in REGIMES:
        raise ValueError(f"regime must be one of {REGIMES}, got {regime!r}")
    n = needle_count(length) if n_needles is None else n_needles
    if n < 1:
        raise ValueError(f"length {length} is too short for any needle")
    if NEEDLE_LEN * n + 1 > length:
        raise ValueError(f"{n} needles do not fit in length {length}")
    prefix_len = length - 1
    starts: list[int] = []
    for lo, hi in _chunk_bounds(prefix_len, n):
        for attempt in range(100):
            start = int(rng.integers(lo, hi))
            fits = start + NEEDLE_LEN <= prefix_len
            clear = not starts or start >= starts[-1] + NEEDLE_LEN
            if fits and clear:
                starts.append(start)
                break
        else:
            raise ValueError(
                f"could not place a needle in chunk [{lo}, {hi}) of length {length}"
            )
    digits = rng.integers(0, N_DIGITS, size=n)
    tokens = FILLER_BASE + rng.integers(0, N_FILLERS, size=length)
    for start, digit in zip(starts, digits):
        tokens[start] = KEY_TOKEN
        tokens[start + 1] = EQ_TOKEN
        tokens[start + 2] = digit
    tokens[-1] = QUERY_TOKEN
    ordinal = {"first": 0, "middle": n // 2, "last": n - 1}[regime]
    return NiahSample(
        tokens=tokens.astype(np.int64),
        needle_starts=tuple(starts),
        digits=tuple(int(d) for d in digits),
        target=int(digits[ordinal]),
        regime=regime,
    )


def generate_batch(length: int, regime: str, count: int, seed: int) -> list[NiahSample]:
    """Deterministic batch: sample t uses the (seed, "niah", t) stream."""
    if count < 1:
        raise ValueError("count must be >= 1")
    return [
        generate(length, regime, make_rng(seed, "niah", t)) for t in range(count)
    ]


def batch_arrays(samples: list[NiahSample]) -> tuple[np.ndarray, np.ndarray]:
    """(count, L) token matrix and (count,) target vector."""
    if not samples:
        raise ValueError("need at least one sample")
    lengths = {s.tokens.shape[0] for s in samples}
    if len(lengths) != 1:
        raise ValueError("samples in one batch must share a length")
    tokens = np.stack([s.tokens for s in samples])
    targets = np.array([s.target for s in samples], dtype=np.int64)
    return tokens, targets


def decode_target(sample: NiahSample, digit_logits: np.ndarray) -> tuple[int, bool]:
    """Predicted digit (argmax, lowest index on ties) and its correctness."""
    logits = np.asarray(digit_logits)
    if logits.shape != (N_DIGITS,):
        raise ValueError(f"expected {N_DIGITS} digit logits, got shape {logits.shape}")
    pred = int(np.argmax(logits))
    return pred, pred == sample.target


def save_dataset(path: str, samples: list[NiahSample], length: int,
                 regime: str, seed: int) -> None:
    """Plain-text dataset: one header line, then one tab-separated line per
    sample (tokens, needle starts, digits, target). Integers only, so a
    round trip is byte-stable."""
    lines = [f"L={length} n={needle_count(length)} regime={regime} "
             f"seed={seed} count={len(samples)}"]
    for s in samples:
        lines.append("\t".join([
            " ".join(str(t) for t in s.tokens),
            " ".join(str(p) for p in s.needle_starts),
            " ".join(str(d) for d in s.digits),
            str(s.target),
        ]))
    with open(path, "w", encoding="ascii") as fh:
        fh.write("\n".join(lines) + "\n")


def load_dataset(path: str) -> tuple[list[NiahSample], dict[str, int | str]]:
    with open(path, "r", encoding="ascii") as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise ValueError(f"{path} is empty")
    meta: dict[str, int | str] = {}
    for item in lines[0].split():
        key, _, value = item.partition("=")
        meta[key] = value if key == "regime" else int(value)
    samples = []
    for line in lines[1:]:
        tok_s, starts_s, digits_s, target_s = line.split("\t")
        samples.append(NiahSample(
            tokens=np.array([int(t) for t in tok_s.split()], dtype=np.int64),
            needle_starts=tuple(int(p) for p in starts_s.split()),
            digits=tuple(int(d) for d in digits_s.split()),
            target=int(target_s),
            regime=str(meta["regime"]),
        ))
    if len(samples) != meta["count"]:
        raise ValueError(f"{path}: header promises {meta['count']} samples, "
                         f"found {len(samples)}")
    return samples, meta


def first_chunk_uniformity_pvalue(samples: list[NiahSample], length: int) -> float:
    """Chi-square p-value for needle starts being uniform over chunk 0.

    Only the first chunk is tested: with two or more chunks its feasible
    set is the whole chunk (no predecessor, and the query-fit cap bites
    later chunks only), so the marginal is exactly uniform by construction.
    """
    n = needle_count(length)
    if n < 2:
        raise ValueError("uniformity check needs at least two chunks")
    lo, hi = _chunk_bounds(length - 1, n)[0]
    counts = np.zeros(hi - lo, dtype=np.int64)
    for s in samples:
        counts[s.needle_starts[0] - lo] += 1
    return float(stats.chisquare(counts).pvalue)
