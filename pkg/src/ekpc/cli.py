"""Command-line entry point.

Subcommands: run (one experiment), ablate (variant x seed grid),
importance-dump (per-layer importance report), report (aggregate metric
files). Configuration is a JSON file with three sections (stream, model,
train); unknown keys are rejected, and --override key=value beats file
values. Config errors exit 2, runtime failures exit 1, data goes to files
or stdout, diagnostics to stderr.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import bench, importance, model, trainer
from .drift import write_prototypes
from .trainer import TrainConfig

VARIANTS = ("baseline", "ipr", "tsdc", "ekpc")


class ConfigError(ValueError):
    """Invalid configuration; maps to exit code 2."""


_STREAM_KEYS = {
    "kind": str,
    "tasks": int,
    "classes_per_task": int,
    "d_t": int,
    "d": int,
    "cluster_spread": float,
    "samples_per_class": int,
    "path": str,
}
_MODEL_KEYS = {"d_h": int, "n_layers": int, "serial": bool}
_TRAIN_KEYS = {
    "lr": float, "weight_decay": float, "batch_size": int,
    "epochs_first": int, "epochs_rest": int, "epochs_unified": int,
    "s": float, "m": float, "eta1": float, "eta2": float,
    "w1": float, "w2": float, "eps": float, "n_replay": int,
    "seed": int, "tsdc": bool, "normalize_importance": bool, "cosine_decay": bool,
}
_SECTIONS = {"stream": _STREAM_KEYS, "model": _MODEL_KEYS, "train": _TRAIN_KEYS}

_STREAM_DEFAULTS = {
    "kind": "synthetic", "tasks": 10, "classes_per_task": 5, "d_t": 4,
    "d": 32, "cluster_spread": 0.4, "samples_per_class": 50, "path": "",
}
_MODEL_DEFAULTS = {"d_h": 8, "n_layers": 4, "serial": False}


def _check_section(name: str, given: dict, allowed: dict) -> dict:
    if not isinstance(given, dict):
        raise ConfigError(f"{name}: expected an object")
    out = {}
    for key, value in given.items():
        if key not in allowed:
            raise ConfigError(f"{name}.{key}: unknown key")
        want = allowed[key]
        if want is float and isinstance(value, (int, float)) and not isinstance(value, bool):
            value = float(value)
        elif want is int and isinstance(value, bool):
            raise ConfigError(f"{name}.{key}: expected {want.__name__}, got bool")
        elif not isinstance(value, want):
            raise ConfigError(f"{name}.{key}: expected {want.__name__}, got {type(value).__name__}")
        out[key] = value
    return out


def load_config(path: str) -> tuple[dict, str]:
    """Parse and validate the config file; returns (config dict, raw text)."""
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {path}")
    text = p.read_text()
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f"config is not valid JSON: line {e.lineno} col {e.colno}: {e.msg}")
    if not isinstance(raw, dict):
        raise ConfigError("top-level config must be an object")
    cfg = {}
    for section, content in raw.items():
        if section not in _SECTIONS:
            raise ConfigError(f"{section}: unknown section")
        cfg[section] = _check_section(section, content, _SECTIONS[section])
    cfg.setdefault("stream", {})
    cfg.setdefault("model", {})
    cfg.setdefault("train", {})
    return cfg, text


def apply_overrides(cfg: dict, overrides: list[str]) -> None:
    """`section.key=value` pairs; values parsed as JSON, else raw strings."""
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override '{item}' is not key=value")
        key, value = item.split("=", 1)
        parts = key.split(".")
        if len(parts) != 2 or parts[0] not in _SECTIONS:
            raise ConfigError(f"override key '{key}' must be section.key with section in "
                              f"{sorted(_SECTIONS)}")
        section, name = parts
        try:
            parsed = json.loads(value)
        except json.JSONDecodeError:
            parsed = value
        cfg[section].update(_check_section(section, {name: parsed}, _SECTIONS[section]))


def apply_variant(cfg: dict, variant: str) -> None:
    """Variant flags map exactly to (importance regularizer on?, drift on?).

    A variant that requires a loss term forces its weight positive even if
    the config file zeroed it; configured positive weights are kept.
    """
    if variant not in VARIANTS:
        raise ConfigError(f"unknown variant '{variant}'")
    train = cfg["train"]

    def force_positive(key):
        if float(train.get(key, 1.0)) <= 0.0:
            train[key] = 1.0

    if variant == "baseline":
        train.update(w1=0.0, w2=0.0, tsdc=False)
    elif variant == "ipr":
        train.update(w2=0.0, tsdc=False)
        force_positive("w1")
    elif variant == "tsdc":
        train.update(w1=0.0, tsdc=True)
        force_positive("w2")
    else:  # ekpc: full method
        train.update(tsdc=True)
        force_positive("w1")
        force_positive("w2")
    cfg["train"] = train


def resolve(cfg: dict) -> tuple[dict, dict, TrainConfig]:
    stream = dict(_STREAM_DEFAULTS, **cfg["stream"])
    mdl = dict(_MODEL_DEFAULTS, **cfg["model"])
    try:
        tc = TrainConfig(**cfg["train"])
        tc.validate()
    except (TypeError, ValueError) as e:
        raise ConfigError(f"train: {e}")
    if stream["kind"] not in ("synthetic", "ekft"):
        raise ConfigError(f"stream.kind: must be 'synthetic' or 'ekft', got '{stream['kind']}'")
    if stream["kind"] == "ekft" and not stream["path"]:
        raise ConfigError("stream.path: required for kind 'ekft'")
    return stream, mdl, tc


def build_stream(stream_cfg: dict, seed: int) -> bench.TaskStream:
    if stream_cfg["kind"] == "synthetic":
        return bench.make_synthetic_stream(
            stream_cfg["tasks"], stream_cfg["classes_per_task"],
            stream_cfg["d_t"], stream_cfg["d"], stream_cfg["cluster_spread"],
            seed, stream_cfg["samples_per_class"])
    return bench.load_feature_stream(stream_cfg["path"], stream_cfg["tasks"], seed)


def _echo(stream_cfg: dict, mdl_cfg: dict, tc: TrainConfig, variant: str | None) -> dict:
    echo = {
        "stream": {k: stream_cfg[k] for k in sorted(stream_cfg)},
        "model": {k: mdl_cfg[k] for k in sorted(mdl_cfg)},
        "train": {k: getattr(tc, k) for k in sorted(_TRAIN_KEYS)},
    }
    if variant:
        echo["variant"] = variant
    return echo


def _run_one(cfg: dict, variant: str | None, out_dir: Path, raw_text: str) -> bench.MetricsReport:
    stream_cfg, mdl_cfg, tc = resolve(cfg)
    stream = build_stream(stream_cfg, tc.seed)
    echo = _echo(stream_cfg, mdl_cfg, tc, variant)
    state, report = trainer.run_stream(stream, tc, mdl_cfg["d_h"],
                                       mdl_cfg["n_layers"], mdl_cfg["serial"],
                                       config_echo=echo)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = {"config_file_text": raw_text, "effective": echo, "seed": tc.seed}
    (out_dir / "manifest.json").write_text(json.dumps(manifest, sort_keys=True, indent=2) + "\n")
    bench.write_metrics(out_dir / "metrics.jsonl", report)
    model.write_checkpoint(out_dir / "checkpoint.ekpc", state.backbone, state.classifier)
    importance.write_importance(out_dir / "importance.ekpi", state.importance)
    if state.prototypes:
        write_prototypes(out_dir / "prototypes.ekpp", state.prototypes)
    return report


def cmd_run(args) -> int:
    cfg, raw_text = load_config(args.config)
    if args.variant:
        apply_variant(cfg, args.variant)
    apply_overrides(cfg, args.override)
    if args.seed is not None:
        cfg["train"]["seed"] = args.seed
    report = _run_one(cfg, args.variant, Path(args.out), raw_text)
    print(f"a_last={report.a_last:.4f} a_avg={report.a_avg:.4f} "
          f"af={'-' if report.af is None else format(report.af, '.4f')}")
    return 0


def _aggregate(records_by_variant: dict[str, list[dict]]) -> dict:
    """Per-variant mean and population std of each summary metric."""
    table = {}
    for variant in sorted(records_by_variant):
        rows = records_by_variant[variant]
        entry = {"runs": len(rows)}
        for metric in ("a_last", "a_avg", "af"):
            values = [r[metric] for r in rows if r.get(metric) is not None]
            if values:
                entry[metric] = {
                    "mean": float(np.mean(values)),
                    "std": float(np.std(values)),
                }
        sdv_means = []
        for r in rows:
            vals = [v for v in r.get("sdv_trace", []) if v is not None]
            if vals:
                sdv_means.append(float(np.mean(vals)))
        if sdv_means:
            entry["sdv"] = {"mean": float(np.mean(sdv_means)),
                            "std": float(np.std(sdv_means))}
        table[variant] = entry
    return table


def _print_table(table: dict) -> None:
    print(f"{'variant':<10} {'runs':>4} {'a_last':>16} {'a_avg':>16} {'af':>16}")
    for variant, entry in table.items():
        cells = []
        for metric in ("a_last", "a_avg", "af"):
            if metric in entry:
                cells.append(f"{entry[metric]['mean']:7.2f}±{entry[metric]['std']:.2f}")
            else:
                cells.append("-")
        print(f"{variant:<10} {entry['runs']:>4} {cells[0]:>16} {cells[1]:>16} {cells[2]:>16}")


def cmd_ablate(args) -> int:
    cfg_base, raw_text = load_config(args.config)
    seeds = [int(s) for s in args.seeds.split(",") if s != ""]
    if not seeds:
        raise ConfigError("--seeds produced an empty list")
    variants = args.variants.split(",") if args.variants else list(VARIANTS)
    for v in variants:
        if v not in VARIANTS:
            raise ConfigError(f"unknown variant '{v}'")
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    summaries: dict[str, list[dict]] = {v: [] for v in variants}
    for variant in variants:
        for seed in seeds:
            cfg = json.loads(json.dumps(cfg_base))  # deep copy
            apply_variant(cfg, variant)
            apply_overrides(cfg, args.override)
            cfg["train"]["seed"] = seed
            cell_dir = out_dir / f"{variant}-s{seed}"
            report = _run_one(cfg, variant, cell_dir, raw_text)
            rec = report.to_records()[-1]
            summaries[variant].append(rec)
            print(f"[{variant} seed={seed}] a_last={report.a_last:.2f} "
                  f"a_avg={report.a_avg:.2f} "
                  f"af={'-' if report.af is None else format(report.af, '.2f')}",
                  file=sys.stderr)
    table = _aggregate(summaries)
    (out_dir / "ablate_summary.json").write_text(
        json.dumps(table, sort_keys=True, indent=2) + "\n")
    _print_table(table)
    return 0


def cmd_importance_dump(args) -> int:
    ckpt_path = Path(args.checkpoint)
    if ckpt_path.is_dir():
        imp_path = ckpt_path / "importance.ekpi"
        ckpt_path = ckpt_path / "checkpoint.ekpc"
    else:
        imp_path = Path(args.importance) if args.importance else ckpt_path.with_suffix(".ekpi")
    bb, _clf = model.read_checkpoint(ckpt_path)
    imp = importance.read_importance(imp_path)
    if imp.l_dm.shape[0] != bb.n_layers:
        raise ValueError(f"importance store has {imp.l_dm.shape[0]} layers, "
                         f"checkpoint has {bb.n_layers}")
    text = importance.format_importance_report(imp, full=args.full)
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return 0


def cmd_report(args) -> int:
    out_dir = Path(args.out)
    if not out_dir.is_dir():
        raise ConfigError(f"not a directory: {args.out}")
    files = sorted(out_dir.rglob("metrics.jsonl"))
    if not files:
        raise ConfigError(f"no metrics.jsonl files under {args.out}")
    records_by_variant: dict[str, list[dict]] = {}
    for fp in files:
        for rec in bench.read_metrics(fp):
            if rec.get("record") == "summary":
                variant = rec.get("config", {}).get("variant", "run")
                records_by_variant.setdefault(variant, []).append(rec)
    _print_table(_aggregate(records_by_variant))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ekpc",
                                     description="continual-learning benchmark engine")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run one experiment")
    run.add_argument("--config", required=True)
    run.add_argument("--seed", type=int, default=None)
    run.add_argument("--out", default="out")
    run.add_argument("--override", action="append", default=[], metavar="KEY=VALUE")
    run.add_argument("--variant", choices=VARIANTS, default=None)
    run.set_defaults(func=cmd_run)

    ablate = sub.add_parser("ablate", help="variant x seed grid")
    ablate.add_argument("--config", required=True)
    ablate.add_argument("--seeds", default="0,1,2")
    ablate.add_argument("--variants", default=None,
                        help="comma list, default all four")
    ablate.add_argument("--out", default="ablate-out")
    ablate.add_argument("--override", action="append", default=[], metavar="KEY=VALUE")
    ablate.set_defaults(func=cmd_ablate)

    dump = sub.add_parser("importance-dump", help="per-layer importance report")
    dump.add_argument("--checkpoint", required=True,
                      help="checkpoint file or run directory")
    dump.add_argument("--importance", default=None,
                      help="importance store (defaults next to the checkpoint)")
    dump.add_argument("--out", default=None, help="output file (default stdout)")
    dump.add_argument("--full", action="store_true", help="include full matrices")
    dump.set_defaults(func=cmd_importance_dump)

    rep = sub.add_parser("report", help="aggregate metric files in a directory")
    rep.add_argument("--out", required=True, help="directory holding run outputs")
    rep.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except Exception as e:  # runtime failure
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
