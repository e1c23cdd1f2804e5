"""Command-line surface: preprocess, synth, train, ablate, report.

Exit codes: 0 success, 2 usage/config/parse errors, 3 numeric failure
during training. Every command writes a run manifest capturing the
effective configuration, seed and artifact paths.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import struct
import sys
from dataclasses import asdict
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__, data, metrics
from .errors import (
    ConfigError,
    InputError,
    IntegrityError,
    ParseError,
    TrainingDiverged,
    UsageError,
)
from .model import DystanConfig, save_checkpoint
from .training import TrainConfig, run_cv

ABLATION_VARIANTS = ("FULL", "NSN", "NB", "NA")
TABLE_METRICS = (
    ("sed_accuracy", "Sedentary Acc."),
    ("sed_macro_f1", "Sedentary Macro F1"),
    ("soc_accuracy", "Social Acc."),
    ("soc_macro_f1", "Social Macro F1"),
    ("joint_accuracy", "Joint Acc."),
)

_USAGE_ERRORS = (
    ConfigError,
    ParseError,
    IntegrityError,
    InputError,
    UsageError,
    FileNotFoundError,
)


def _utc_now():
    return datetime.now(timezone.utc).isoformat()


def _write_json_atomic(path, payload):
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    os.replace(tmp, path)


def _write_manifest(path, command, args_ns, config_snapshot, artifacts, started_at):
    _write_json_atomic(
        path,
        {
            "command": command,
            "argv": {k: _jsonable(v) for k, v in vars(args_ns).items() if k != "func"},
            "seed": getattr(args_ns, "seed", None),
            "config": config_snapshot,
            "artifacts": sorted(str(a) for a in artifacts),
            "tool_version": __version__,
            "started_at": started_at,
            "finished_at": _utc_now(),
        },
    )


def _jsonable(value):
    if isinstance(value, Path):
        return str(value)
    return value


# -- config file handling ------------------------------------------------------

MODEL_FILE_FIELDS = (
    "in_channels",
    "seq_len",
    "shared_conv",
    "branch_conv",
    "dcsu_hidden",
    "attention_heads",
    "lstm_hidden",
    "head_hidden",
    "dropout",
    "num_sed",
    "num_soc",
)
TRAIN_FILE_FIELDS = ("lr", "batch_size", "max_epochs", "select_metric")


def _load_config_file(path, variant, seed):
    """Every field is required in the file; variant and seed stay CLI-owned."""
    try:
        raw = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    for section, fields in (("model", MODEL_FILE_FIELDS), ("train", TRAIN_FILE_FIELDS)):
        if section not in raw:
            raise ConfigError(f"{path}: missing section {section!r}")
        missing = [f for f in fields if f not in raw[section]]
        extra = [f for f in raw[section] if f not in fields]
        if missing:
            raise ConfigError(f"{path}: {section} section missing fields {missing}")
        if extra:
            raise ConfigError(f"{path}: {section} section has unknown fields {extra}")
    model_cfg = DystanConfig(variant=variant, **raw["model"])
    train_cfg = TrainConfig(seed=seed, **raw["train"])
    return model_cfg, train_cfg


def _default_configs(variant, seed):
    return DystanConfig(variant=variant), TrainConfig(seed=seed)


# -- embeddings dump (dataset-cache container with D-dim records) ----------------


def write_embeddings(path, embeddings, sed, soc, pids):
    with open(path, "wb") as fh:
        fh.write(data.CACHE_MAGIC)
        fh.write(struct.pack("<HI", data.CACHE_VERSION, len(embeddings)))
        for vec, s, c, pid in zip(embeddings, sed, soc, pids):
            fh.write(np.ascontiguousarray(vec, dtype="<f8").tobytes())
            encoded = pid.encode("utf-8")
            fh.write(struct.pack("<BBH", int(s), int(c), len(encoded)))
            fh.write(encoded)


# -- commands --------------------------------------------------------------------


def cmd_preprocess(args):
    started = _utc_now()
    recordings = data.load_recordings(args.input)
    windows = data.windows_from_recordings(recordings, keep_other=args.keep_other)
    data.write_window_cache(args.output, windows)
    if not windows:
        print("warning: no windows produced (empty or fully filtered input)")
    print(f"{len(windows)} windows -> {args.output}")
    histogram = {}
    for w in windows:
        sed_name = "OTHER" if w.sed == data.OTHER_CODE else data.SED_CLASSES[w.sed]
        key = f"{sed_name}/{data.SOC_CLASSES[w.soc]}"
        histogram[key] = histogram.get(key, 0) + 1
    for key in sorted(histogram):
        print(f"  {key}: {histogram[key]}")
    _write_manifest(
        str(args.output) + ".manifest.json",
        "preprocess",
        args,
        {"input": str(args.input), "keep_other": args.keep_other},
        [args.output],
        started,
    )
    return 0


def cmd_synth(args):
    started = _utc_now()
    config = data.SynthConfig(
        samples_per_joint_class=args.per_class,
        noise_std=args.noise,
        coupling=args.coupling,
        seed=args.seed,
    )
    windows = data.synth_windows(config)
    data.write_window_cache(args.out, windows)
    print(f"{len(windows)} synthetic windows -> {args.out}")
    _write_manifest(
        str(args.out) + ".manifest.json",
        "synth",
        args,
        {"synth": asdict(config)},
        [args.out],
        started,
    )
    return 0


def _load_training_windows(path):
    windows = [w for w in data.read_window_cache(path) if w.sed != data.OTHER_CODE]
    if not windows:
        raise InputError(f"{path}: no modelable windows (all OTHER or empty)")
    return data.window_arrays(windows)


def _train_run(out_dir, features, sed, soc, pids, model_cfg, train_cfg, args):
    """Run CV and write the full artifact set into out_dir."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    participant_ids = pids if args.group_by_participant else None
    result = run_cv(
        features,
        sed,
        soc,
        model_cfg,
        train_cfg,
        participant_ids=participant_ids,
        parallel=args.parallel_folds,
    )
    artifacts = []
    for outcome in result.folds:
        i = outcome.fold_index
        ckpt = out_dir / f"fold{i}_best.ckpt"
        save_checkpoint(ckpt, model_cfg, outcome.state)
        _write_json_atomic(out_dir / f"fold{i}_report.json", outcome.report.to_dict())
        with open(out_dir / f"fold{i}_epochs.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(
                "epoch,train_loss,val_loss,val_sed_acc,val_soc_acc,"
                "val_joint_acc,wall_time_s".split(",")
            )
            for log in outcome.logs:
                writer.writerow(
                    [
                        log.epoch,
                        repr(log.train_loss),
                        repr(log.val_loss),
                        repr(log.val_sed_acc),
                        repr(log.val_soc_acc),
                        repr(log.val_joint_acc),
                        f"{log.wall_time_s:.3f}",
                    ]
                )
        test_ids = result.plan.folds[i].test_ids
        with open(out_dir / f"fold{i}_predictions.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["window_id", "sed_true", "sed_pred", "soc_true", "soc_pred"])
            ev = outcome.evaluation
            for wid, st, sp, ct, cp in zip(
                test_ids, sed[test_ids], ev.sed_pred, soc[test_ids], ev.soc_pred
            ):
                writer.writerow([wid, st, sp, ct, cp])
        for task, emb in (("sed", outcome.evaluation.sed_embeddings),
                          ("soc", outcome.evaluation.soc_embeddings)):
            emb_path = out_dir / f"fold{i}_{task}_embeddings.bin"
            write_embeddings(
                emb_path,
                emb,
                sed[test_ids],
                soc[test_ids],
                [pids[j] for j in test_ids],
            )
            artifacts.append(emb_path)
        artifacts += [
            ckpt,
            out_dir / f"fold{i}_report.json",
            out_dir / f"fold{i}_epochs.csv",
            out_dir / f"fold{i}_predictions.csv",
        ]
    aggregate = {
        "variant": model_cfg.variant,
        "k": result.plan.k,
        "split_hash": result.plan.split_hash(),
        "metrics": result.aggregate,
    }
    _write_json_atomic(out_dir / "aggregate.json", aggregate)
    artifacts.append(out_dir / "aggregate.json")
    return result, artifacts


def cmd_train(args):
    started = _utc_now()
    variant = args.model.upper()
    if args.config:
        model_cfg, train_cfg = _load_config_file(args.config, variant, args.seed)
    else:
        model_cfg, train_cfg = _default_configs(variant, args.seed)
    features, sed, soc, pids = _load_training_windows(args.data)
    result, artifacts = _train_run(
        args.out, features, sed, soc, pids, model_cfg, train_cfg, args
    )
    joint = result.aggregate["joint_accuracy"]
    print(
        f"{variant}: joint accuracy {joint['mean']:.4f} +/- {joint['std']:.4f} "
        f"over {result.plan.k} folds"
    )
    _write_manifest(
        Path(args.out) / "manifest.json",
        "train",
        args,
        {"model": asdict(model_cfg), "train": asdict(train_cfg)},
        artifacts,
        started,
    )
    return 0


def cmd_ablate(args):
    started = _utc_now()
    features, sed, soc, pids = _load_training_windows(args.data)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    aggregates = {}
    split_hashes = {}
    artifacts = []
    for variant in ABLATION_VARIANTS:
        if args.config:
            model_cfg, train_cfg = _load_config_file(args.config, variant, args.seed)
        else:
            model_cfg, train_cfg = _default_configs(variant, args.seed)
        result, sub_artifacts = _train_run(
            out_dir / variant.lower(), features, sed, soc, pids, model_cfg,
            train_cfg, args
        )
        aggregates[variant] = result.aggregate
        split_hashes[variant] = result.plan.split_hash()
        artifacts += sub_artifacts
        joint = result.aggregate["joint_accuracy"]
        print(f"{variant}: joint {joint['mean']:.4f} +/- {joint['std']:.4f}")
    if len(set(split_hashes.values())) != 1:
        raise UsageError("variants ran on different fold assignments")

    ordering = [aggregates[v]["joint_accuracy"]["mean"] for v in ("FULL", "NA", "NB")]
    ordering_ok = ordering[0] >= ordering[1] >= ordering[2]
    comparison_csv = out_dir / "comparison.csv"
    with open(comparison_csv, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["model"] + [f"{k} (mean+/-std)" for k, _ in TABLE_METRICS])
        for variant in ABLATION_VARIANTS:
            row = [variant]
            for key, _ in TABLE_METRICS:
                cell = aggregates[variant][key]
                row.append(f"{cell['mean']:.4f}+/-{cell['std']:.4f}")
            writer.writerow(row)
    lines = [_format_ablation_table(aggregates)]
    if not ordering_ok:
        lines.append(
            "WARNING: joint-accuracy ordering FULL >= NA >= NB violated: "
            + " vs ".join(f"{v:.4f}" for v in ordering)
        )
    comparison_txt = out_dir / "comparison.txt"
    comparison_txt.write_text("\n".join(lines) + "\n")
    print("\n".join(lines))
    artifacts += [comparison_csv, comparison_txt]
    _write_manifest(
        out_dir / "manifest.json",
        "ablate",
        args,
        {
            "variants": list(ABLATION_VARIANTS),
            "split_hash": split_hashes["FULL"],
            "ordering_ok": ordering_ok,
        },
        artifacts,
        started,
    )
    return 0


def _format_ablation_table(aggregates):
    headers = ["Model"] + [label for _, label in TABLE_METRICS]
    rows = []
    for variant in ABLATION_VARIANTS:
        row = [variant]
        for key, _ in TABLE_METRICS:
            cell = aggregates[variant][key]
            row.append(f"{cell['mean']:.4f} +/- {cell['std']:.4f}")
        rows.append(row)
    widths = [max(len(r[i]) for r in [headers] + rows) for i in range(len(headers))]
    fmt = "  ".join(f"{{:<{w}}}" for w in widths)
    return "\n".join([fmt.format(*headers)] + [fmt.format(*r) for r in rows])


def cmd_report(args):
    started = _utc_now()
    run_dir = Path(args.run)
    if not run_dir.is_dir():
        raise InputError(f"run directory {run_dir} does not exist")
    agg_path = run_dir / "aggregate.json"
    if not agg_path.exists():
        raise InputError(f"{agg_path} missing; not a training run directory")
    aggregate = json.loads(agg_path.read_text())
    reports = []
    for path in sorted(run_dir.glob("fold*_report.json")):
        reports.append(metrics.FoldReport.from_dict(json.loads(path.read_text())))
    if not reports:
        raise InputError(f"{run_dir}: no fold reports found")
    if args.format == "csv":
        writer = csv.writer(sys.stdout)
        writer.writerow(["fold"] + list(metrics.SCALAR_METRICS))
        for r in reports:
            writer.writerow(
                [r.fold_index] + [f"{getattr(r, m):.6f}" for m in metrics.SCALAR_METRICS]
            )
        writer.writerow(
            ["mean"]
            + [f"{aggregate['metrics'][m]['mean']:.6f}" for m in metrics.SCALAR_METRICS]
        )
        writer.writerow(
            ["std"]
            + [f"{aggregate['metrics'][m]['std']:.6f}" for m in metrics.SCALAR_METRICS]
        )
    else:
        print(f"variant: {aggregate['variant']}   folds: {aggregate['k']}")
        for name in metrics.SCALAR_METRICS:
            cell = aggregate["metrics"][name]
            print(f"  {name:<28s} {cell['mean']:.4f} +/- {cell['std']:.4f}")
        for r in reports:
            print(f"\nfold {r.fold_index} (seed {r.seed})")
            for label, matrix, classes in (
                ("sedentary", r.sed_confusion, data.SED_CLASSES),
                ("social", r.soc_confusion, data.SOC_CLASSES),
            ):
                print(f"  {label} confusion (rows = truth):")
                for cls, row in zip(classes, matrix):
                    cells = " ".join(f"{v:5.2f}" for v in row)
                    print(f"    {cls:<7s} {cells}")
    _write_manifest(
        run_dir / "report_manifest.json",
        "report",
        args,
        {"run": str(run_dir), "format": args.format},
        [agg_path],
        started,
    )
    return 0


# -- argument parsing --------------------------------------------------------------


def build_parser():
    parser = argparse.ArgumentParser(
        prog="dystan",
        description="Joint sedentary-activity / social-context model toolkit",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("preprocess", help="CSV recordings -> window cache")
    p.add_argument("--input", required=True, type=Path)
    p.add_argument("--output", required=True, type=Path)
    p.add_argument("--keep-other", action="store_true",
                   help="keep OTHER-labeled windows (sed byte 255) in the cache")
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("synth", help="write a deterministic synthetic window cache")
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--per-class", required=True, type=int)
    p.add_argument("--noise", type=float, default=0.0)
    p.add_argument("--coupling", type=float, default=0.0)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="5-fold cross-validated training")
    p.add_argument("--data", required=True, type=Path)
    p.add_argument("--model", required=True,
                   choices=["full", "nsn", "nb", "na", "cs", "cbg"])
    p.add_argument("--config", type=Path, default=None,
                   help="JSON with complete model/train sections")
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--parallel-folds", action="store_true")
    p.add_argument("--group-by-participant", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("ablate", help="train FULL/NSN/NB/NA on shared splits")
    p.add_argument("--data", required=True, type=Path)
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--config", type=Path, default=None)
    p.add_argument("--parallel-folds", action="store_true")
    p.add_argument("--group-by-participant", action="store_true")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("report", help="render stored run artifacts")
    p.add_argument("--run", required=True, type=Path)
    p.add_argument("--format", choices=["csv", "text"], default="text")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if exc.code is not None else 0
    try:
        return args.func(args)
    except TrainingDiverged as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except _USAGE_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
