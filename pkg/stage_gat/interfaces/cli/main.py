"""Command-line entry point: train, eval, gradcheck, params, flops, synth and ablate."""

from __future__ import annotations

import argparse
import csv
import json
import sys
from collections.abc import Sequence
from pathlib import Path
from typing import Any

import numpy as np
import structlog
from pydantic import ValidationError

from stage_gat import __version__
from stage_gat.core.errors import StageError
from stage_gat.core.model import StageModel, count_params, flop_breakdown, load_checkpoint
from stage_gat.data.dataset import feature_widths, label_count, read_clips, sha256_digest
from stage_gat.data.synth import SynthSpec, load_synth_spec, synth_generate, write_synth
from stage_gat.learning.evaluation import load_class_names, load_groups
from stage_gat.learning.gradcheck import run_gradcheck
from stage_gat.learning.trainer import evaluate, fit
from stage_gat.models.config import ABLATIONS, PRESETS, StageConfig, load_stage_config
from stage_gat.utils.config import Settings, load_settings
from stage_gat.utils.logging import configure_logging

logger = structlog.get_logger("stage_gat.cli")

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2
DEFAULT_SYNTH_SPEC = Path("config/synth.example.yaml")


class UsageError(Exception):
    """Bad flag combination or missing input file; maps to exit code 2."""


def format_payload(payload: Any) -> str:
    try:
        return json.dumps(payload, indent=2, sort_keys=True)
    except TypeError:
        return str(payload)


def _require_file(path: Path | None, flag: str) -> Path:
    if path is None:
        raise UsageError(f"{flag} is required")
    if not path.is_file():
        raise UsageError(f"{flag}: file not found: {path}")
    return path


def _out_dir(args: argparse.Namespace, settings: Settings, command: str) -> Path:
    out = args.out or settings.output_root / command
    out.mkdir(parents=True, exist_ok=True)
    return out


def write_report(out_dir: Path, name: str, payload: Any) -> Path:
    path = out_dir / name
    path.write_text(format_payload(payload) + "\n", encoding="utf-8")
    return path


def write_manifest(
    out_dir: Path,
    settings: Settings,
    command: str,
    *,
    config: StageConfig | None = None,
    seed: int | None = None,
    inputs: Sequence[Path] = (),
    outputs: Sequence[Path] = (),
    extra: dict[str, Any] | None = None,
) -> Path:
    """manifest.json: enough to rerun ``command`` (config echo, seed, input digests)."""
    manifest = {
        "tool": "stage-gat",
        "version": __version__,
        "command": command,
        "argv": sys.argv[1:],
        "config": config.model_dump() if config is not None else None,
        "seed": seed,
        "inputs": {str(p): sha256_digest(p) for p in inputs},
        "outputs": sorted(str(p) for p in outputs),
        "settings_file": settings.file_path,
        "settings": settings.to_dict(),
    }
    if extra:
        manifest.update(extra)
    path = out_dir / "manifest.json"
    path.write_text(format_payload(manifest) + "\n", encoding="utf-8")
    return path


# ---------------------------------------------------------------------------
# configuration from flags
# ---------------------------------------------------------------------------


def _flag_overrides(args: argparse.Namespace) -> dict[str, Any]:
    return {
        "n_heads": getattr(args, "heads", None),
        "n_layers": getattr(args, "layers", None),
        "window": getattr(args, "window", None),
        "rf_direct": getattr(args, "rf_direct", None),
        "lr": getattr(args, "lr", None),
        "keep": getattr(args, "keep", None),
        "max_epochs": getattr(args, "epochs", None),
        "seed": getattr(args, "seed", None),
        "min_class_examples": getattr(args, "min_class_examples", None),
    }


def resolve_config(
    args: argparse.Namespace, settings: Settings, data: Sequence | None = None
) -> StageConfig:
    """Preset, then model-config YAML, then settings defaults, then data widths, then flags."""
    config = load_stage_config(getattr(args, "model_config", None), args.preset)
    config = config.with_overrides(**settings.training)
    if data is not None:
        actor_dim, object_dim = feature_widths(data)
        config = config.with_overrides(
            actor_dim=actor_dim,
            object_dim=object_dim,
            n_classes=getattr(args, "classes", None) or max(label_count(data), 1),
        )
    config = config.with_overrides(**_flag_overrides(args))
    ablation = getattr(args, "ablate", None)
    return config.with_ablation(ablation) if ablation else config


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_train(args: argparse.Namespace, settings: Settings) -> int:
    train_path = _require_file(args.train, "--train")
    val_path = _require_file(args.val, "--val")
    train, val = read_clips(train_path), read_clips(val_path)
    config = resolve_config(args, settings, train + val)
    out = _out_dir(args, settings, "train")

    _, history = fit(config, train, val, checkpoint_dir=out)
    checkpoint = out / "best.npz"
    _, params, _ = load_checkpoint(checkpoint)
    report = evaluate(StageModel(config, params), val, threads=settings.threads)
    report_path = report.write_csv(out / "eval_val.csv")

    outputs = [checkpoint, out / "last.npz", out / "history.csv", report_path]
    write_manifest(
        out,
        settings,
        "train",
        config=config,
        seed=config.seed,
        inputs=[train_path, val_path],
        outputs=outputs,
        extra={"best_epoch": history.best_epoch, "epochs": len(history)},
    )
    print(f"best epoch {history.best_epoch} of {len(history)}: {report.summary()}")
    return EXIT_OK


def cmd_eval(args: argparse.Namespace, settings: Settings) -> int:
    checkpoint = _require_file(args.checkpoint, "--checkpoint")
    data_path = _require_file(args.data, "--data")
    groups = load_groups(_require_file(args.groups, "--groups")) if args.groups else None
    names = (
        load_class_names(_require_file(args.class_names, "--class-names"))
        if args.class_names
        else None
    )

    config, params, _ = load_checkpoint(checkpoint)
    clips = read_clips(data_path)
    config.check_data(*feature_widths(clips), label_count(clips))
    min_examples = args.min_class_examples
    if min_examples is None:
        min_examples = settings.evaluation.get("min_class_examples")
    report = evaluate(
        StageModel(config, params),
        clips,
        min_class_examples=min_examples,
        groups=groups,
        class_names=names,
        threads=settings.threads,
    )
    out = _out_dir(args, settings, "eval")
    csv_path = report.write_csv(out / "eval.csv")
    inputs = [checkpoint, data_path] + [p for p in (args.groups, args.class_names) if p]
    write_manifest(
        out, settings, "eval", config=config, seed=config.seed, inputs=inputs, outputs=[csv_path]
    )
    print(report.summary())
    print(report.to_json())
    return EXIT_OK


def cmd_gradcheck(args: argparse.Namespace, settings: Settings) -> int:
    overrides = {}
    if args.heads is not None:
        overrides["n_heads"] = args.heads
    if args.layers is not None:
        overrides["n_layers"] = args.layers
    report = run_gradcheck(args.seed, n_clips=args.clips, max_entities=args.entities, **overrides)
    verdict = "PASS" if report.passed else "FAIL"
    out = _out_dir(args, settings, "gradcheck")
    payload = {
        "max_relative_error": report.max_relative_error,
        "worst_parameter": report.worst_parameter,
        "n_parameters": report.n_parameters,
        "threshold": report.threshold,
        "verdict": verdict,
    }
    report_path = write_report(out, "gradcheck.json", payload)
    write_manifest(
        out,
        settings,
        "gradcheck",
        seed=args.seed,
        outputs=[report_path],
        extra={"overrides": overrides, "clips": args.clips, "entities": args.entities},
    )
    print(
        f"max relative error {report.max_relative_error:.3e} "
        f"({report.worst_parameter}, {report.n_parameters} parameters): {verdict}"
    )
    return EXIT_OK if report.passed else EXIT_FAILURE


def cmd_params(args: argparse.Namespace, settings: Settings) -> int:
    names = [args.preset] if args.preset else list(PRESETS)
    rows = []
    for name in names:
        config = preset_from_flags(name, args)
        rows.append({"preset": name, "parameters": count_params(config)})
    out = _out_dir(args, settings, "params")
    report_path = write_report(out, "params.json", rows)
    write_manifest(
        out,
        settings,
        "params",
        config=preset_from_flags(args.preset, args) if args.preset else None,
        outputs=[report_path],
        extra={"presets": names},
    )
    for row in rows:
        print(f"{row['preset']:<16} {row['parameters']:>12,d}  ({row['parameters'] / 1e6:.2f}M)")
    return EXIT_OK


def cmd_flops(args: argparse.Namespace, settings: Settings) -> int:
    config = preset_from_flags(args.preset, args)
    report = flop_breakdown(config, args.actors, args.objects)
    payload = {
        "preset": args.preset,
        "actors": args.actors,
        "objects": args.objects,
        "terms": {
            "projection": report.projection,
            "fc11": report.fc11,
            "fc12": report.fc12,
            "weighted_sum": report.weighted_sum,
            "fc13": report.fc13,
            "classifier": report.classifier,
        },
        "macs": report.macs,
        "flops": report.flops(),
        "gmacs": report.macs / 1e9,
        "gflops": report.flops() / 1e9,
    }
    out = _out_dir(args, settings, "flops")
    report_path = write_report(out, "flops.json", payload)
    write_manifest(out, settings, "flops", config=config, seed=config.seed, outputs=[report_path])
    print(format_payload(payload))
    return EXIT_OK


def preset_from_flags(name: str, args: argparse.Namespace) -> StageConfig:
    config = load_stage_config(None, name).with_overrides(**_flag_overrides(args))
    ablation = getattr(args, "ablate", None)
    return config.with_ablation(ablation) if ablation else config


def cmd_synth(args: argparse.Namespace, settings: Settings) -> int:
    if args.spec is not None:
        spec = load_synth_spec(_require_file(args.spec, "--spec"))
    elif DEFAULT_SYNTH_SPEC.is_file():
        spec = load_synth_spec(DEFAULT_SYNTH_SPEC)
    else:
        spec = SynthSpec()
    if args.seed is not None:
        spec = spec.model_copy(update={"seed": args.seed})

    result = synth_generate(spec)
    out = _out_dir(args, settings, "synth")
    paths = write_synth(result, out)
    inputs = [args.spec] if args.spec else []
    write_manifest(
        out,
        settings,
        "synth",
        seed=spec.seed,
        inputs=inputs,
        outputs=list(paths.values()),
        extra={"synth_spec": spec.model_dump(mode="json")},
    )
    print(format_payload(result.report.to_dict()))
    return EXIT_OK


def cmd_ablate(args: argparse.Namespace, settings: Settings) -> int:
    train_path = _require_file(args.train, "--train")
    val_path = _require_file(args.val, "--val")
    train, val = read_clips(train_path), read_clips(val_path)
    base = resolve_config(args, settings, train + val)
    names = args.ablations or list(ABLATIONS)
    for name in names:
        if name not in ABLATIONS:
            raise UsageError(f"unknown ablation {name!r}; choose from {sorted(ABLATIONS)}")
    seeds = args.seeds or [base.seed]
    out = _out_dir(args, settings, "ablate")

    rows = []
    for name in names:
        for seed in seeds:
            config = base.with_ablation(name).with_overrides(seed=seed)
            params, history = fit(config, train, val)
            report = evaluate(StageModel(config, params), val, threads=settings.threads)
            row: dict[str, Any] = {
                "ablation": name,
                "seed": seed,
                "epochs": len(history),
                "mean_ap": report.mean_ap,
            }
            row.update({f"ap_{c}": report.per_class_ap.get(c, "") for c in range(config.n_classes)})
            rows.append(row)
            logger.info("ablation finished", ablation=name, seed=seed, mean_ap=report.mean_ap)

    csv_path = out / "ablations.csv"
    with csv_path.open("w", newline="", encoding="utf-8") as handle:
        writer = csv.DictWriter(handle, fieldnames=list(rows[0]))
        writer.writeheader()
        writer.writerows(rows)
    write_manifest(
        out,
        settings,
        "ablate",
        config=base,
        seed=base.seed,
        inputs=[train_path, val_path],
        outputs=[csv_path],
        extra={"ablations": names, "seeds": seeds},
    )
    for name in names:
        scores = [r["mean_ap"] for r in rows if r["ablation"] == name]
        print(f"{name:<18} median mAP {float(np.median(scores)):.4f}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def _model_flags(parser: argparse.ArgumentParser, *, training: bool) -> None:
    parser.add_argument("--preset", choices=sorted(PRESETS), default="tiny")
    parser.add_argument("--model-config", type=Path, help="YAML file with StageConfig fields.")
    parser.add_argument("--heads", type=int)
    parser.add_argument("--layers", type=int)
    parser.add_argument("--window", type=int, help="Consecutive clips per window.")
    parser.add_argument("--rf-direct", type=int, help="Directly connected clips (odd).")
    parser.add_argument("--ablate", choices=sorted(ABLATIONS))
    if training:
        parser.add_argument("--classes", type=int, help="Number of classes (default: from data).")
        parser.add_argument("--lr", type=float)
        parser.add_argument("--keep", type=float, help="Dropout keep probability.")
        parser.add_argument("--epochs", type=int)
        parser.add_argument("--seed", type=int)
        parser.add_argument("--min-class-examples", type=int)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="Settings YAML (logging, runtime, defaults).")
    common.add_argument("--log-level", help="Override the configured log level.")
    common.add_argument(
        "--json-logs", action="store_true", default=None, help="Emit JSON log lines."
    )
    common.add_argument("--out", type=Path, help="Output directory.")

    parser = argparse.ArgumentParser(
        prog="stage-gat", description="Spatio-temporal graph attention for action detection"
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    train = sub.add_parser("train", parents=[common], help="Train and keep the best checkpoint.")
    train.add_argument("--train", type=Path, required=True)
    train.add_argument("--val", type=Path, required=True)
    _model_flags(train, training=True)
    train.set_defaults(handler=cmd_train)

    evaluate_cmd = sub.add_parser("eval", parents=[common], help="Frame-mAP of a checkpoint.")
    evaluate_cmd.add_argument("--checkpoint", type=Path, required=True)
    evaluate_cmd.add_argument("--data", type=Path, required=True)
    evaluate_cmd.add_argument("--min-class-examples", type=int)
    evaluate_cmd.add_argument("--groups", type=Path, help="CSV with class_id,group.")
    evaluate_cmd.add_argument("--class-names", type=Path, help="CSV with class_id,class_name.")
    evaluate_cmd.set_defaults(handler=cmd_eval)

    gradcheck = sub.add_parser("gradcheck", parents=[common], help="Verify analytic gradients.")
    gradcheck.add_argument("--seed", type=int, default=0)
    gradcheck.add_argument("--heads", type=int, choices=[1, 2])
    gradcheck.add_argument("--layers", type=int, choices=[1, 2])
    gradcheck.add_argument("--clips", type=int, default=3)
    gradcheck.add_argument("--entities", type=int, default=4, help="Max entities per clip.")
    gradcheck.set_defaults(handler=cmd_gradcheck)

    params = sub.add_parser("params", parents=[common], help="Learnable parameter counts.")
    _model_flags(params, training=False)
    params.set_defaults(handler=cmd_params, preset=None)

    flops = sub.add_parser("flops", parents=[common], help="Per-clip inference cost.")
    _model_flags(flops, training=False)
    flops.add_argument("--actors", type=int, default=4)
    flops.add_argument("--objects", type=int, default=25)
    flops.set_defaults(handler=cmd_flops, preset="stage-i3d")

    synth = sub.add_parser("synth", parents=[common], help="Generate a synthetic dataset.")
    synth.add_argument("--spec", type=Path, help="Synthetic spec YAML.")
    synth.add_argument("--seed", type=int)
    synth.set_defaults(handler=cmd_synth)

    ablate = sub.add_parser("ablate", parents=[common], help="Train each ablation and compare.")
    ablate.add_argument("--train", type=Path, required=True)
    ablate.add_argument("--val", type=Path, required=True)
    ablate.add_argument("--ablations", nargs="+", help="Ablation names (default: all).")
    ablate.add_argument("--seeds", type=int, nargs="+")
    _model_flags(ablate, training=True)
    ablate.set_defaults(handler=cmd_ablate)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)

    settings = load_settings(str(args.config) if args.config else None)
    configure_logging(settings, level=args.log_level, json_mode=args.json_logs)

    try:
        return args.handler(args, settings)
    except UsageError as exc:
        print(f"stage-gat {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ValidationError as exc:
        print(f"stage-gat {args.command}: invalid configuration: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (StageError, ValueError) as exc:
        logger.error("command failed", command=args.command, error=str(exc))
        return EXIT_FAILURE


if __name__ == "__main__":  # pragma: no cover
    raise SystemExit(main())
