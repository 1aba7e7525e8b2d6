"""Command line front end.

Subcommands cover the three kinds of work the package does: randomized
verification of the closed-form guarantees (``verify``), the retrieval
task pipeline (``niah gen`` / ``train`` / ``eval``), and post-hoc
diagnostics (``analyze`` / ``report``).

Settings resolve from four sources with fixed precedence: command line,
then ``--config`` file (``key = value`` lines, ``#`` comments), then the
GAPE_SEED environment variable (seed only), then built-in defaults. Each
run appends the winning value and source per key to
``<out-dir>/resolved_config.txt``. Timestamps go only to
``<out-dir>/run.log``; every other artifact is a pure function of the
resolved settings, so a same-seed rerun reproduces it byte for byte.

Exit status is 0 only when the command completed and every check it ran
passed; 1 reports check failures, 2 reports usage or config errors.
"""
from __future__ import annotations

import argparse
import os
import sys
from dataclasses import fields
from datetime import datetime

from .analysis import (analysis_samples, channel_norms, channel_rows_to_csv,
                       delta_entropy, delta_rows_to_csv, entropy_profile,
                       entropy_rows_to_csv, gate_rows_to_csv, gate_stats,
                       landmark_positional_means, landmark_rows_to_csv,
                       needle_marked_positions)
from .model import load_checkpoint, make_model_config
from .niah import REGIMES, generate_batch, save_dataset
from .theory import SUITES, reports_to_csv, run_suites
from .train import (TrainConfig, eval_results_to_csv, evaluate_lengths,
                    train)

DEFAULT_OUT_DIR = "runs"
SEED_ENV_VAR = "GAPE_SEED"


class ConfigError(Exception):
    """Malformed config file or an unusable resolved value."""


def _on_off(raw) -> bool:
    if isinstance(raw, bool):
        return raw
    text = str(raw).strip().lower()
    if text in ("on", "true", "1", "yes"):
        return True
    if text in ("off", "false", "0", "no"):
        return False
    raise ConfigError(f"expected on/off, got {raw!r}")


def _multipliers(raw) -> tuple[int, ...]:
    if isinstance(raw, tuple):
        return raw
    try:
        parts = tuple(int(p) for p in str(raw).split(",") if p.strip())
    except ValueError as exc:
        raise ConfigError(f"bad multiplier list {raw!r}") from exc
    if not parts:
        raise ConfigError("multiplier list is empty")
    return parts


_TRAIN_DEFAULTS = {f.name: f.default for f in fields(TrainConfig)}

# Every key a config file may set: caster and default. Trainer keys share
# their defaults with TrainConfig so the two cannot drift apart.
KEYS: dict[str, tuple] = {
    "seed": (int, 0),
    "threads": (int, 1),
    "suite": (str, "all"),
    "trials": (int, 200),
    "length": (int, 256),
    "regime": (str, "last"),
    "count": (int, 100),
    "pe": (str, "nope"),
    "gape": (_on_off, False),
    "n_layer": (int, 2),
    "n_head": (int, 2),
    "d_model": (int, 64),
    "steps_max": (int, _TRAIN_DEFAULTS["steps_max"]),
    "batch_size": (int, _TRAIN_DEFAULTS["batch_size"]),
    "lr": (float, _TRAIN_DEFAULTS["lr"]),
    "lr_min": (float, _TRAIN_DEFAULTS["lr_min"]),
    "warmup": (int, _TRAIN_DEFAULTS["warmup"]),
    "weight_decay": (float, _TRAIN_DEFAULTS["weight_decay"]),
    "val_every": (int, _TRAIN_DEFAULTS["val_every"]),
    "val_size": (int, _TRAIN_DEFAULTS["val_size"]),
    "patience": (int, _TRAIN_DEFAULTS["patience"]),
    "n_eval": (int, 500),
    "multipliers": (_multipliers, (1, 2, 4)),
    "samples": (int, 32),
}


def parse_config_file(path: str) -> dict[str, str]:
    """Read ``key = value`` lines; unknown keys are hard errors."""
    raw: dict[str, str] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            text = line.strip()
            if not text or text.startswith("#"):
                continue
            if "=" not in text:
                raise ConfigError(f"{path}:{lineno}: expected key=value, got {text!r}")
            key, _, value = text.partition("=")
            key = key.strip()
            if key not in KEYS:
                raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
            if key in raw:
                raise ConfigError(f"{path}:{lineno}: duplicate key {key!r}")
            raw[key] = value.strip()
    return raw


def _fmt_value(value) -> str:
    if isinstance(value, bool):
        return "on" if value else "off"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    return str(value)


def resolve(ns: argparse.Namespace, file_cfg: dict[str, str],
            wanted: list[str]) -> tuple[dict, dict[str, str]]:
    """Settle each wanted key and remember where its value came from."""
    values: dict = {}
    sources: dict[str, str] = {}
    for key in wanted:
        caster, default = KEYS[key]
        cli_val = getattr(ns, key, None)
        if cli_val is not None:
            values[key], sources[key] = caster(cli_val), "cli"
        elif key in file_cfg:
            values[key], sources[key] = caster(file_cfg[key]), "file"
        elif key == "seed" and os.environ.get(SEED_ENV_VAR) is not None:
            values[key], sources[key] = int(os.environ[SEED_ENV_VAR]), "env"
        else:
            values[key], sources[key] = default, "default"
    return values, sources


def _write_resolved(out_dir: str, command: str, values: dict,
                    sources: dict[str, str]) -> None:
    lines = [f"[{command}]"]
    for key in sorted(values):
        lines.append(f"{key}={_fmt_value(values[key])} source={sources[key]}")
    path = os.path.join(out_dir, "resolved_config.txt")
    with open(path, "a", encoding="ascii") as fh:
        fh.write("\n".join(lines) + "\n\n")


def _log(out_dir: str, text: str) -> None:
    stamp = datetime.now().isoformat(timespec="seconds")
    with open(os.path.join(out_dir, "run.log"), "a", encoding="ascii") as fh:
        fh.write(f"[{stamp}] {text}\n")


def _prepare(ns: argparse.Namespace, command: str,
             wanted: list[str]) -> tuple[str, dict]:
    out_dir = ns.out_dir or DEFAULT_OUT_DIR
    os.makedirs(out_dir, exist_ok=True)
    file_cfg = parse_config_file(ns.config) if ns.config else {}
    values, sources = resolve(ns, file_cfg, wanted)
    _write_resolved(out_dir, command, values, sources)
    _log(out_dir, command + " " + " ".join(
        f"{k}={_fmt_value(values[k])}" for k in sorted(values)))
    return out_dir, values


def cmd_verify(ns: argparse.Namespace) -> int:
    out_dir, v = _prepare(ns, "verify", ["suite", "trials", "seed", "threads"])
    names = list(SUITES) if v["suite"] == "all" else [v["suite"]]
    reports = run_suites(names, v["trials"], v["seed"], v["threads"])
    csv_path = os.path.join(out_dir, "verify_report.csv")
    with open(csv_path, "w", encoding="ascii") as fh:
        fh.write(reports_to_csv(reports))
    failures = 0
    for r in reports:
        status = "pass" if r.passed else "FAIL"
        failures += not r.passed
        print(f"{status}  {r.suite}/{r.check}: {r.violations}/{r.trials} "
              f"violations, worst excess {r.worst_excess:.3e} "
              f"(tolerance {r.tolerance:.1e})")
    print(f"{len(reports) - failures}/{len(reports)} checks passed; "
          f"report written to {csv_path}")
    _log(out_dir, f"verify finished with {failures} failing checks")
    return 0 if failures == 0 else 1


def cmd_niah_gen(ns: argparse.Namespace) -> int:
    out_dir, v = _prepare(ns, "niah gen", ["length", "regime", "count", "seed"])
    samples = generate_batch(v["length"], v["regime"], v["count"], v["seed"])
    path = ns.out or os.path.join(
        out_dir, f"niah_L{v['length']}_{v['regime']}_n{v['count']}.txt")
    save_dataset(path, samples, v["length"], v["regime"], v["seed"])
    print(f"wrote {len(samples)} samples to {path}")
    _log(out_dir, f"niah gen wrote {path}")
    return 0


def cmd_train(ns: argparse.Namespace) -> int:
    wanted = ["pe", "gape", "regime", "length", "n_layer", "n_head", "d_model",
              "steps_max", "batch_size", "lr", "lr_min", "warmup",
              "weight_decay", "val_every", "val_size", "patience", "seed"]
    out_dir, v = _prepare(ns, "train", wanted)
    model_cfg = make_model_config(v["pe"], v["gape"], n_layer=v["n_layer"],
                                  n_head=v["n_head"], d_model=v["d_model"],
                                  t_train=v["length"])
    train_cfg = TrainConfig(
        steps_max=v["steps_max"], batch_size=v["batch_size"], lr=v["lr"],
        lr_min=v["lr_min"], warmup=v["warmup"],
        weight_decay=v["weight_decay"], val_every=v["val_every"],
        val_size=v["val_size"], patience=v["patience"], seed=v["seed"],
        length=v["length"], regime=v["regime"],
    )
    name = ns.name or f"{v['pe']}{'_gape' if v['gape'] else ''}_{v['regime']}"

    def log(line: str) -> None:
        print(line, flush=True)
        _log(out_dir, line)

    result = train(model_cfg, train_cfg, out_dir, name, log=log)
    print(f"trained {name}: {result.steps_run} steps, final validation "
          f"accuracy {result.final_val_acc:.4f}")
    print(f"checkpoint {result.checkpoint_path}")
    print(f"metrics    {result.metrics_path}")
    _log(out_dir, f"train finished {name} in {result.wall_seconds:.1f}s")
    return 0


def _eval_regime(ns: argparse.Namespace, file_cfg: dict[str, str],
                 meta: dict[str, str]) -> tuple[str, str]:
    if getattr(ns, "regime", None) is not None:
        return ns.regime, "cli"
    if "regime" in file_cfg:
        return file_cfg["regime"], "file"
    if "regime" in meta:
        return meta["regime"], "ckpt"
    return KEYS["regime"][1], "default"


def cmd_eval(ns: argparse.Namespace) -> int:
    out_dir = ns.out_dir or DEFAULT_OUT_DIR
    os.makedirs(out_dir, exist_ok=True)
    file_cfg = parse_config_file(ns.config) if ns.config else {}
    values, sources = resolve(ns, file_cfg, ["multipliers", "n_eval", "seed"])
    cfg, store, meta = load_checkpoint(ns.ckpt)
    values["regime"], sources["regime"] = _eval_regime(ns, file_cfg, meta)
    _write_resolved(out_dir, "eval", values, sources)
    _log(out_dir, f"eval {ns.ckpt}")
    results = evaluate_lengths(store, cfg, values["regime"],
                               values["multipliers"], values["n_eval"],
                               values["seed"])
    stem = os.path.splitext(os.path.basename(ns.ckpt))[0]
    csv_path = os.path.join(out_dir, f"{stem}_eval.csv")
    with open(csv_path, "w", encoding="ascii") as fh:
        fh.write(eval_results_to_csv(cfg, results))
    for r in results:
        print(f"L={r.length} ({r.multiplier}x, {r.regime}): "
              f"accuracy {r.accuracy:.4f} over {r.n_eval} samples")
    print(f"results written to {csv_path}")
    _log(out_dir, f"eval finished {stem}")
    return 0


def cmd_analyze(ns: argparse.Namespace) -> int:
    out_dir = ns.out_dir or DEFAULT_OUT_DIR
    os.makedirs(out_dir, exist_ok=True)
    file_cfg = parse_config_file(ns.config) if ns.config else {}
    values, sources = resolve(ns, file_cfg, ["samples", "seed"])
    cfg, store, meta = load_checkpoint(ns.ckpt)
    values["regime"], sources["regime"] = _eval_regime(ns, file_cfg, meta)
    values["length"], sources["length"] = (
        (ns.length, "cli") if ns.length is not None else (cfg.T_train, "ckpt"))
    _write_resolved(out_dir, f"analyze {ns.what}", values, sources)
    _log(out_dir, f"analyze {ns.what} {ns.ckpt}")
    samples, tokens, _ = analysis_samples(values["length"], values["regime"],
                                          values["samples"], values["seed"])
    stem = os.path.splitext(os.path.basename(ns.ckpt))[0]

    def write(suffix: str, text: str) -> str:
        path = os.path.join(out_dir, f"{stem}_{suffix}.csv")
        with open(path, "w", encoding="ascii") as fh:
            fh.write(text)
        print(f"wrote {path}")
        return path

    if ns.what == "entropy":
        rows, _ = entropy_profile(store, cfg, tokens)
        write("entropy", entropy_rows_to_csv(rows))
        if ns.baseline_ckpt:
            bcfg, bstore, _ = load_checkpoint(ns.baseline_ckpt)
            deltas = delta_entropy(store, cfg, bstore, bcfg, tokens)
            bstem = os.path.splitext(os.path.basename(ns.baseline_ckpt))[0]
            path = os.path.join(out_dir, f"{stem}_vs_{bstem}_entropy_delta.csv")
            with open(path, "w", encoding="ascii") as fh:
                fh.write(delta_rows_to_csv(deltas))
            print(f"wrote {path}")
            final = [d for layer, _, d in deltas if layer == cfg.n_layer - 1]
            mean_final = sum(final) / len(final)
            print(f"final-layer mean entropy delta: {mean_final:+.4f} nats")
    elif ns.what == "gates":
        write("gates", gate_rows_to_csv(gate_stats(store, cfg, tokens)))
        marked = needle_marked_positions(samples)
        lm = landmark_positional_means(store, cfg, tokens, marked)
        write("landmarks", landmark_rows_to_csv(lm))
        best = max(needle / filler if filler > 0 else float("inf")
                   for _, _, needle, filler in lm)
        print(f"best needle-to-filler landmark ratio: {best:.2f}")
    else:
        write("channels", channel_rows_to_csv(channel_norms(store, cfg, tokens)))
    _log(out_dir, f"analyze {ns.what} finished {stem}")
    return 0


def _report_verify_section(path: str) -> tuple[list[str], int]:
    lines = [f"== verification ({os.path.basename(path)}) =="]
    failures = 0
    with open(path, encoding="ascii") as fh:
        rows = fh.read().strip().splitlines()
    for row in rows[1:]:
        parts = row.split(",")
        if parts[-1] != "pass":
            failures += 1
        lines.append(f"  {parts[0]}/{parts[1]}: {parts[-1]} "
                     f"({parts[3]}/{parts[2]} violations)")
    lines.append(f"  -> {len(rows) - 1 - failures}/{len(rows) - 1} checks passed")
    return lines, failures


def _report_table_section(title: str, path: str) -> list[str]:
    lines = [f"== {title} ({os.path.basename(path)}) =="]
    with open(path, encoding="ascii") as fh:
        for row in fh.read().strip().splitlines():
            if row.startswith("#"):
                continue
            lines.append("  " + row.replace(",", "  "))
    return lines


def cmd_report(ns: argparse.Namespace) -> int:
    out_dir = ns.out_dir or DEFAULT_OUT_DIR
    if not os.path.isdir(out_dir):
        print(f"no artifact directory {out_dir!r}", file=sys.stderr)
        return 2
    entries = sorted(os.listdir(out_dir))
    sections: list[str] = []
    failures = 0
    if "verify_report.csv" in entries:
        lines, fails = _report_verify_section(
            os.path.join(out_dir, "verify_report.csv"))
        sections.extend(lines + [""])
        failures += fails
    groups = (
        ("length sweep", "_eval.csv"),
        ("attention entropy", "_entropy.csv"),
        ("entropy difference", "_entropy_delta.csv"),
        ("gate summary", "_gates.csv"),
        ("landmark firing", "_landmarks.csv"),
        ("rotary channels", "_channels.csv"),
    )
    for title, suffix in groups:
        for entry in entries:
            if entry.endswith(suffix):
                sections.extend(
                    _report_table_section(title, os.path.join(out_dir, entry)))
                sections.append("")
    for entry in entries:
        if entry.endswith("_metrics.csv"):
            with open(os.path.join(out_dir, entry), encoding="ascii") as fh:
                rows = [r for r in fh.read().strip().splitlines()
                        if not r.startswith("#")]
            if len(rows) > 1:
                last = rows[-1].split(",")
                cols = rows[0].split(",")
                acc = last[cols.index("val_acc")]
                sections.append(f"== training ({entry}) ==")
                sections.append(f"  final step {last[0]}, "
                                f"validation accuracy {acc}")
                sections.append("")
    if not sections:
        print(f"nothing to report in {out_dir!r}", file=sys.stderr)
        return 2
    verdict = "all checks passed" if failures == 0 else \
        f"{failures} checks FAILED"
    text = "\n".join(sections) + verdict + "\n"
    path = os.path.join(out_dir, "report.txt")
    with open(path, "w", encoding="ascii") as fh:
        fh.write(text)
    print(text, end="")
    print(f"report written to {path}")
    return 0 if failures == 0 else 1


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--seed", type=int, default=None,
                        help=f"master seed (falls back to ${SEED_ENV_VAR}, then 0)")
    parser.add_argument("--out-dir", default=None,
                        help=f"artifact directory (default {DEFAULT_OUT_DIR!r})")
    parser.add_argument("--config", default=None,
                        help="key=value settings file")
    parser.add_argument("--threads", type=int, default=None,
                        help="worker threads for verification trials")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="gapelab",
        description="Gated positional attention: verification, retrieval "
                    "benchmark, diagnostics.")
    sub = parser.add_subparsers(dest="command", metavar="command")

    p = sub.add_parser("verify", help="run randomized closed-form checks")
    _add_common(p)
    p.add_argument("--suite", default=None, choices=["all", *SUITES],
                   help="which check suite to run (default all)")
    p.add_argument("--trials", type=int, default=None,
                   help="random instances per check (default 200)")
    p.set_defaults(func=cmd_verify)

    niah = sub.add_parser("niah", help="retrieval task utilities")
    nsub = niah.add_subparsers(dest="niah_command", metavar="action")
    p = nsub.add_parser("gen", help="write a dataset file")
    _add_common(p)
    p.add_argument("--len", dest="length", type=int, default=None,
                   help="sequence length (default 256)")
    p.add_argument("--regime", default=None, choices=list(REGIMES),
                   help="which needle is queried (default last)")
    p.add_argument("--count", type=int, default=None,
                   help="number of samples (default 100)")
    p.add_argument("--out", default=None, help="output path")
    p.set_defaults(func=cmd_niah_gen)

    p = sub.add_parser("train", help="train a decoder on the retrieval task")
    _add_common(p)
    p.add_argument("--pe", default=None,
                   choices=["nope", "rope", "prope", "alibi"],
                   help="positional encoding (default nope)")
    p.add_argument("--gape", default=None, choices=["on", "off"],
                   help="gated positional mask (default off)")
    p.add_argument("--regime", default=None, choices=list(REGIMES))
    p.add_argument("--len", dest="length", type=int, default=None,
                   help="training length and mask normalizer (default 256)")
    p.add_argument("--name", default=None, help="artifact basename")
    for key in ("steps-max", "batch-size", "warmup", "val-every",
                "val-size", "patience", "n-layer", "n-head", "d-model"):
        p.add_argument(f"--{key}", type=int, default=None)
    for key in ("lr", "lr-min", "weight-decay"):
        p.add_argument(f"--{key}", type=float, default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="accuracy at multiples of the training length")
    _add_common(p)
    p.add_argument("--ckpt", required=True, help="checkpoint to evaluate")
    p.add_argument("--multipliers", default=None,
                   help="comma-separated length multiples (default 1,2,4)")
    p.add_argument("--n-eval", type=int, default=None,
                   help="samples per length (default 500)")
    p.add_argument("--regime", default=None, choices=list(REGIMES),
                   help="defaults to the regime the checkpoint trained on")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("analyze", help="attention and gate diagnostics")
    _add_common(p)
    p.add_argument("what", choices=["entropy", "gates", "channels"])
    p.add_argument("--ckpt", required=True)
    p.add_argument("--baseline-ckpt", default=None,
                   help="second checkpoint to difference entropy against")
    p.add_argument("--samples", type=int, default=None,
                   help="task samples to average over (default 32)")
    p.add_argument("--regime", default=None, choices=list(REGIMES))
    p.add_argument("--len", dest="length", type=int, default=None,
                   help="sample length (defaults to the training length)")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("report", help="collate artifacts in the output directory")
    _add_common(p)
    p.set_defaults(func=cmd_report)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    ns = parser.parse_args(argv)
    if ns.command is None:
        parser.print_usage(sys.stderr)
        return 2
    if ns.command == "niah" and getattr(ns, "niah_command", None) is None:
        print("usage: gapelab niah gen [options]", file=sys.stderr)
        return 2
    try:
        return ns.func(ns)
    except (ConfigError, FileNotFoundError, ValueError) as exc:
        print(f"gapelab: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
