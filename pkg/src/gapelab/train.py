"""Training and length-extrapolation evaluation for the tiny decoder.

Decoupled-weight-decay Adam with linear warmup into a cosine decay, fresh
task batches drawn from per-step seeded streams, validation on a fixed
held-out set, and early stop after a run of perfect validations. Every
array op is deterministic for a given seed, so reruns reproduce metrics
and checkpoints byte for byte.
"""
from __future__ import annotations

import math
import os
import time
from dataclasses import asdict, dataclass, fields

import numpy as np

from .model import (
    ModelConfig,
    ParamStore,
    init_params,
    loss_and_grads,
    predict_digits,
    save_checkpoint,
)
from .niah import batch_arrays, generate_batch
from .numerics import make_rng


def derive_seed(seed: int, *labels: int | str) -> int:
    """Independent 63-bit seed for a named substream."""
    return int(make_rng(seed, *labels).integers(0, 2 ** 63))


@dataclass(frozen=True)
class TrainConfig:
    steps_max: int = 5000
    batch_size: int = 64
    lr: float = 3e-4
    lr_min: float = 3e-5
    warmup: int = 100
    weight_decay: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.95
    adam_eps: float = 1e-8
    grad_clip: float = 1.0
    val_every: int = 100
    val_size: int = 1000
    patience: int = 3
    seed: int = 0
    length: int = 256
    regime: str = "last"

    def __post_init__(self) -> None:
        if self.steps_max < 1 or self.batch_size < 1:
            raise ValueError("steps_max and batch_size must be >= 1")
        if self.warmup < 1 or self.val_every < 1 or self.patience < 1:
            raise ValueError("warmup, val_every and patience must be >= 1")
        if not 0 < self.lr_min <= self.lr:
            raise ValueError("need 0 < lr_min <= lr")


def lr_at(cfg: TrainConfig, step: int) -> float:
    """Linear warmup over the first ``warmup`` steps, then cosine from lr
    down to lr_min at steps_max. ``step`` is 0-based."""
    if step < 0 or step >= cfg.steps_max:
        raise ValueError(f"step {step} outside [0, {cfg.steps_max})")
    if step < cfg.warmup:
        return cfg.lr * (step + 1) / cfg.warmup
    span = max(1, cfg.steps_max - cfg.warmup)
    frac = (step - cfg.warmup) / span
    return cfg.lr_min + 0.5 * (cfg.lr - cfg.lr_min) * (1.0 + math.cos(math.pi * frac))


class AdamW:
    """Decoupled weight decay; decay applies only to flagged parameters."""

    def __init__(self, store: ParamStore, cfg: TrainConfig):
        self.store = store
        self.cfg = cfg
        self.t = 0
        self.m = {p.name: np.zeros_like(p.data) for p in store}
        self.v = {p.name: np.zeros_like(p.data) for p in store}

    def step(self, grads: dict[str, np.ndarray], lr: float) -> None:
        c = self.cfg
        self.t += 1
        bc1 = 1.0 - c.beta1 ** self.t
        bc2 = 1.0 - c.beta2 ** self.t
        for p in self.store:
            g = grads[p.name]
            m = self.m[p.name]
            v = self.v[p.name]
            m *= c.beta1
            m += (1.0 - c.beta1) * g
            v *= c.beta2
            v += (1.0 - c.beta2) * g * g
            if p.decay and c.weight_decay:
                p.data *= 1.0 - lr * c.weight_decay
            p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + c.adam_eps)


def clip_gradients(grads: dict[str, np.ndarray], max_norm: float) -> float:
    """Scale all gradients so their joint L2 norm is at most max_norm.
    Returns the pre-clip norm."""
    total = 0.0
    for g in grads.values():
        total += float(np.square(g, dtype=np.float64).sum())
    norm = math.sqrt(total)
    if norm > max_norm:
        factor = np.asarray(max_norm / (norm + 1e-6), dtype=list(grads.values())[0].dtype)
        for g in grads.values():
            g *= factor
    return norm


@dataclass
class TrainResult:
    checkpoint_path: str
    metrics_path: str
    steps_run: int
    final_val_acc: float
    wall_seconds: float
    history: list[dict[str, float]]


def _gate_means(store: ParamStore, cfg: ModelConfig,
                tokens: np.ndarray) -> list[tuple[float, float, float]]:
    """Mean landmark gate, query gate and amplitude per layer on one batch."""
    capture: dict = {}
    predict_digits(store, cfg, tokens, capture=capture)
    out = []
    for snap in capture["layers"]:
        if "l" in snap:
            out.append((float(snap["l"].mean()), float(snap["g"].mean()),
                        float(snap["Gamma"].mean())))
        else:
            out.append((float("nan"), float("nan"), float("nan")))
    return out


def _accuracy(store: ParamStore, cfg: ModelConfig, tokens: np.ndarray,
              targets: np.ndarray, batch_cap: int) -> float:
    correct = 0
    for lo in range(0, tokens.shape[0], batch_cap):
        preds = predict_digits(store, cfg, tokens[lo:lo + batch_cap])
        correct += int((preds == targets[lo:lo + batch_cap]).sum())
    return correct / tokens.shape[0]


def metrics_to_csv(model_cfg: ModelConfig, train_cfg: TrainConfig,
                   history: list[dict[str, float]]) -> str:
    """Deterministic metrics text: resolved configs in comment lines, then
    one row per validation."""
    lines = []
    for name, cfg in (("model", model_cfg), ("train", train_cfg)):
        kv = " ".join(f"{f.name}={getattr(cfg, f.name)!r}" for f in fields(cfg))
        lines.append(f"# {name} {kv}")
    n_layer = model_cfg.n_layer
    cols = ["step", "lr", "train_loss", "val_acc"]
    for i in range(n_layer):
        cols += [f"l_mean_L{i}", f"g_mean_L{i}", f"gamma_mean_L{i}"]
    lines.append(",".join(cols))
    for row in history:
        lines.append(",".join(_fmt(row[c]) for c in cols))
    return "\n".join(lines) + "\n"


def _fmt(x: float) -> str:
    if isinstance(x, float) and not float(x).is_integer():
        return f"{x:.6e}"
    if isinstance(x, float) and math.isnan(x):
        return "nan"
    return str(int(x))


def train(model_cfg: ModelConfig, train_cfg: TrainConfig, out_dir: str,
          name: str, log=None) -> TrainResult:
    """Run the loop and leave <name>.ckpt and <name>_metrics.csv in out_dir."""
    os.makedirs(out_dir, exist_ok=True)
    t_start = time.perf_counter()
    store = init_params(model_cfg, train_cfg.seed)
    opt = AdamW(store, train_cfg)
    length = train_cfg.length

    val_samples = generate_batch(length, train_cfg.regime, train_cfg.val_size,
                                 derive_seed(train_cfg.seed, "val"))
    val_tokens, val_targets = batch_arrays(val_samples)
    probe_tokens = val_tokens[: min(8, val_tokens.shape[0])]

    history: list[dict[str, float]] = []
    perfect_streak = 0
    steps_run = 0
    last_loss = float("nan")
    for step in range(train_cfg.steps_max):
        batch = generate_batch(length, train_cfg.regime, train_cfg.batch_size,
                               derive_seed(train_cfg.seed, "train", step))
        tokens, targets = batch_arrays(batch)
        loss, grads = loss_and_grads(store, model_cfg, tokens, targets)
        if not math.isfinite(loss):
            raise RuntimeError(
                f"non-finite loss {loss!r} at step {step}; "
                f"model={model_cfg} train={train_cfg}"
            )
        clip_gradients(grads, train_cfg.grad_clip)
        opt.step(grads, lr_at(train_cfg, step))
        steps_run = step + 1
        last_loss = loss

        if steps_run % train_cfg.val_every == 0:
            val_acc = _accuracy(store, model_cfg, val_tokens, val_targets, 64)
            row: dict[str, float] = {
                "step": float(steps_run),
                "lr": lr_at(train_cfg, step),
                "train_loss": loss,
                "val_acc": val_acc,
            }
            for i, (lm, gm, am) in enumerate(_gate_means(store, model_cfg, probe_tokens)):
                row[f"l_mean_L{i}"] = lm
                row[f"g_mean_L{i}"] = gm
                row[f"gamma_mean_L{i}"] = am
            history.append(row)
            if log:
                log(f"step {steps_run:5d} loss {loss:.4f} val_acc {val_acc:.4f}")
            perfect_streak = perfect_streak + 1 if val_acc == 1.0 else 0
            if perfect_streak >= train_cfg.patience:
                break

    final_acc = history[-1]["val_acc"] if history else _accuracy(
        store, model_cfg, val_tokens, val_targets, 64)
    ckpt_path = os.path.join(out_dir, f"{name}.ckpt")
    meta = {
        "regime": train_cfg.regime,
        "seed": str(train_cfg.seed),
        "steps": str(steps_run),
        "length": str(length),
        "final_val_acc": f"{final_acc:.6f}",
    }
    save_checkpoint(ckpt_path, model_cfg, store, meta)
    metrics_path = os.path.join(out_dir, f"{name}_metrics.csv")
    with open(metrics_path, "w", encoding="ascii") as fh:
        fh.write(metrics_to_csv(model_cfg, train_cfg, history))
    return TrainResult(
        checkpoint_path=ckpt_path,
        metrics_path=metrics_path,
        steps_run=steps_run,
        final_val_acc=final_acc,
        wall_seconds=time.perf_counter() - t_start,
        history=history,
    )


@dataclass
class EvalResult:
    length: int
    multiplier: int
    regime: str
    n_eval: int
    accuracy: float


def eval_batch_cap(length: int) -> int:
    """Batch size that keeps the (B, H, L, L) probability block near 16k rows."""
    return max(1, 16384 // length)


def evaluate_lengths(
    store: ParamStore,
    model_cfg: ModelConfig,
    regime: str,
    multipliers: tuple[int, ...],
    n_eval: int,
    seed: int,
    base_length: int | None = None,
) -> list[EvalResult]:
    """Accuracy at base_length * multiplier for each multiplier.

    Evaluation sets are seeded per (seed, multiplier) and independent of
    batch slicing, so accuracies are exactly reproducible.
    """
    base = base_length if base_length is not None else model_cfg.T_train
    out = []
    for mult in multipliers:
        if mult < 1:
            raise ValueError("multipliers must be >= 1")
        length = base * mult
        samples = generate_batch(length, regime, n_eval,
                                 derive_seed(seed, "eval", mult))
        tokens, targets = batch_arrays(samples)
        acc = _accuracy(store, model_cfg, tokens, targets, eval_batch_cap(length))
        out.append(EvalResult(length=length, multiplier=mult, regime=regime,
                              n_eval=n_eval, accuracy=acc))
    return out


def eval_results_to_csv(model_cfg: ModelConfig, results: list[EvalResult]) -> str:
    lines = ["pe,gape,regime,length,multiplier,n_eval,accuracy"]
    pe = model_cfg.kind.variant
    for r in results:
        lines.append(f"{pe},{int(model_cfg.gape)},{r.regime},{r.length},"
                     f"{r.multiplier},{r.n_eval},{r.accuracy:.6f}")
    return "\n".join(lines) + "\n"
