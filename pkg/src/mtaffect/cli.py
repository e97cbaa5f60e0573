"""Command-line entry point.

Every subcommand maps to one module operation, reads an optional
line-based config file of ``key = value`` pairs, seeds all randomness
from a single seed, and writes its resolved config plus a key=value
``summary`` file next to its outputs. Exit codes categorize failures.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path

from . import analysis, data, distill, metrics, trainer
from .errors import (
    AlignmentError,
    AnalysisError,
    CheckpointError,
    CompletenessError,
    ConfigError,
    ManifestError,
    MergeError,
    MTAffectError,
    TrainingError,
    ValidationError,
)
from .losses import LossWeights
from .model import ModelConfig
from .trainer import TrainConfig

logger = logging.getLogger(__name__)

_BASE_MODEL = ModelConfig()
_BASE_TRAIN = TrainConfig()

CONFIG_SPEC: dict[str, type] = {
    "seed": int,
    "model.backbone_variant": str,
    "model.pyramid_channels": int,
    "model.num_expressions": int,
    "model.num_aus": int,
    "model.input_height": int,
    "model.input_width": int,
    "model.va_bounding": str,
    "model.seed": int,
    "train.optimizer": str,
    "train.learning_rate": float,
    "train.batch_size": int,
    "train.epochs": int,
    "train.epoch_fraction": float,
    "train.seed": int,
    "train.precision": str,
    "loss.alpha": float,
    "loss.beta": float,
    "loss.gamma": float,
}


def parse_config_file(path) -> dict[str, int | float | str]:
    """Parse ``key = value`` lines; unknown keys and bad values name the line."""
    values: dict[str, int | float | str] = {}
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    for line_no, raw in enumerate(lines, start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{line_no}: expected 'key = value', got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in CONFIG_SPEC:
            raise ConfigError(f"{path}:{line_no}: unknown config key {key!r}")
        if key in values:
            raise ConfigError(f"{path}:{line_no}: duplicate config key {key!r}")
        try:
            values[key] = CONFIG_SPEC[key](value)
        except ValueError:
            raise ConfigError(
                f"{path}:{line_no}: bad value {value!r} for key {key!r} "
                f"(expected {CONFIG_SPEC[key].__name__})"
            ) from None
    return values


@dataclass
class RunConfig:
    """Resolved model/train/loss settings for one command invocation."""

    model: ModelConfig
    train: TrainConfig
    loss: LossWeights
    seed: int
    resolved: dict[str, int | float | str] = field(default_factory=dict)

    def resolved_text(self) -> str:
        return "".join(f"{key} = {self.resolved[key]}\n" for key in sorted(self.resolved))


def load_run_config(
    config_path=None,
    seed_override: int | None = None,
    command_defaults: dict | None = None,
) -> RunConfig:
    explicit = parse_config_file(config_path) if config_path else {}
    values: dict[str, int | float | str] = {
        "seed": 0,
        "model.backbone_variant": _BASE_MODEL.backbone_variant,
        "model.pyramid_channels": _BASE_MODEL.pyramid_channels,
        "model.num_expressions": _BASE_MODEL.num_expressions,
        "model.num_aus": _BASE_MODEL.num_aus,
        "model.input_height": _BASE_MODEL.input_size[0],
        "model.input_width": _BASE_MODEL.input_size[1],
        "model.va_bounding": _BASE_MODEL.va_bounding,
        "train.optimizer": _BASE_TRAIN.optimizer,
        "train.learning_rate": _BASE_TRAIN.learning_rate,
        "train.batch_size": _BASE_TRAIN.batch_size,
        "train.epochs": _BASE_TRAIN.epochs,
        "train.epoch_fraction": _BASE_TRAIN.epoch_fraction,
        "train.precision": _BASE_TRAIN.precision,
        "loss.alpha": 1.0,
        "loss.beta": 1.0,
        "loss.gamma": 1.0,
    }
    values.update(command_defaults or {})
    values.update(explicit)
    if seed_override is not None:
        values["seed"] = int(seed_override)
    seed = int(values["seed"])
    # per-component seeds follow the single run seed unless set explicitly
    values.setdefault("model.seed", seed)
    values.setdefault("train.seed", seed)
    if seed_override is not None:
        if "model.seed" not in explicit:
            values["model.seed"] = seed
        if "train.seed" not in explicit:
            values["train.seed"] = seed

    try:
        model = ModelConfig(
            backbone_variant=str(values["model.backbone_variant"]),
            pyramid_channels=int(values["model.pyramid_channels"]),
            num_expressions=int(values["model.num_expressions"]),
            num_aus=int(values["model.num_aus"]),
            input_size=(int(values["model.input_height"]), int(values["model.input_width"])),
            va_bounding=str(values["model.va_bounding"]),
            seed=int(values["model.seed"]),
        )
        train = TrainConfig(
            optimizer=str(values["train.optimizer"]),
            learning_rate=float(values["train.learning_rate"]),
            batch_size=int(values["train.batch_size"]),
            epochs=int(values["train.epochs"]),
            epoch_fraction=float(values["train.epoch_fraction"]),
            seed=int(values["train.seed"]),
            precision=str(values["train.precision"]),
        )
        loss = LossWeights(
            alpha=float(values["loss.alpha"]),
            beta=float(values["loss.beta"]),
            gamma=float(values["loss.gamma"]),
        )
    except ValidationError as exc:
        raise ConfigError(str(exc)) from None
    return RunConfig(model=model, train=train, loss=loss, seed=seed, resolved=values)


def _prepare_out(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_run_files(out: Path, run: RunConfig, command: str, summary: dict) -> None:
    (out / "resolved-config.txt").write_text(run.resolved_text(), encoding="utf-8")
    lines = [f"command={command}"] + [f"{k}={v}" for k, v in summary.items()]
    (out / "summary").write_text("\n".join(lines) + "\n", encoding="utf-8")


def _run_config(args, command_defaults: dict | None = None) -> RunConfig:
    return load_run_config(
        config_path=getattr(args, "config", None),
        seed_override=getattr(args, "seed", None),
        command_defaults=command_defaults,
    )


def cmd_gen_synthetic(args) -> None:
    out = _prepare_out(args)
    run = _run_config(args)
    manifest, manifest_path = data.generate_synthetic(
        out,
        num_samples=args.n,
        image_size=(args.image_size, args.image_size),
        noise=args.noise,
        seed=run.seed,
        mask_rate=args.mask_rate,
        num_aus=args.num_aus,
    )
    cov = manifest.coverage
    _write_run_files(
        out, run, "gen-synthetic",
        {
            "manifest": manifest_path,
            "n": len(manifest.records),
            "coverage_va": cov[0],
            "coverage_expr": cov[1],
            "coverage_au": cov[2],
            "digest": data.manifest_digest(manifest),
        },
    )


def cmd_train_teacher(args) -> None:
    out = _prepare_out(args)
    run = _run_config(args)
    manifest = data.load_manifest(args.manifest)
    val_manifest = data.load_manifest(args.val_manifest) if args.val_manifest else None
    teacher, history = distill.train_teacher(
        args.task, manifest, run.model, run.train, val_manifest=val_manifest, out_dir=out
    )
    final = history.epochs[-1] if history.epochs else None
    _write_run_files(
        out, run, "train-teacher",
        {
            "task": args.task,
            "checkpoint": out / f"teacher-{args.task}.ckpt",
            "teacher_id": teacher.teacher_id,
            "epochs": len(history.epochs),
            "final_loss": "" if final is None else repr(final.loss_total),
        },
    )


def cmd_complete_labels(args) -> None:
    out = _prepare_out(args)
    run = _run_config(args)
    manifest = data.load_manifest(args.manifest)
    teachers = {
        "va": distill.load_teacher(args.teacher_va),
        "expr": distill.load_teacher(args.teacher_expr),
        "au": distill.load_teacher(args.teacher_au),
    }
    completed = distill.complete_labels(
        teachers, manifest, batch_size=args.batch_size, hard=args.hard
    )
    completed_path = out / "completed-labels.csv"
    completed.save(completed_path)
    _write_run_files(
        out, run, "complete-labels",
        {
            "completed": completed_path,
            "completed_va": completed.count("va"),
            "completed_expr": completed.count("expr"),
            "completed_au": completed.count("au"),
            "dropped": len(completed.dropped),
            "hard": int(args.hard),
        },
    )


def cmd_build_multi(args) -> None:
    out = _prepare_out(args)
    run = _run_config(args)
    manifest = data.load_manifest(args.manifest)
    completed = distill.CompletedLabels.load(
        args.completed, num_expressions=manifest.num_expressions
    )
    d_multi = distill.build_unified(manifest, completed)
    multi_path = data.save_manifest(d_multi, out / "multi-manifest.csv")
    cov = d_multi.coverage
    _write_run_files(
        out, run, "build-multi",
        {
            "manifest": multi_path,
            "n": len(d_multi.records),
            "coverage_va": cov[0],
            "coverage_expr": cov[1],
            "coverage_au": cov[2],
        },
    )


def cmd_train_student(args) -> None:
    out = _prepare_out(args)
    run = _run_config(args, command_defaults={"train.epochs": 20, "train.epoch_fraction": 1.0})
    manifest = data.load_manifest(args.manifest)
    val_manifest = data.load_manifest(args.val_manifest) if args.val_manifest else None
    result = distill.train_student(
        manifest, run.model, run.train,
        loss_weights=run.loss, val_manifest=val_manifest, out_dir=out,
    )
    final = result.history.epochs[-1] if result.history.epochs else None
    _write_run_files(
        out, run, "train-student",
        {
            "checkpoint": result.last_path or "",
            "best_checkpoint": result.best_path or "",
            "best_score": "" if result.best_score is None else repr(result.best_score),
            "epochs": len(result.history.epochs),
            "final_loss": "" if final is None else repr(final.loss_total),
        },
    )


def cmd_evaluate(args) -> None:
    out = _prepare_out(args)
    run = _run_config(args)
    manifest = data.load_manifest(args.labels)
    if args.predictions:
        predictions = metrics.PredictionTable.load(args.predictions)
        predictions_path = Path(args.predictions)
    else:
        model, _, _ = trainer.load_checkpoint(args.checkpoint)
        predictions = trainer.predict_manifest(model, manifest, batch_size=args.batch_size)
        predictions_path = out / "predictions.csv"
        predictions.save(predictions_path)
    report = metrics.evaluate(manifest, predictions, au_threshold=args.au_threshold)
    report.save(out / "metrics.kv", out / "metrics.txt")
    print(report.to_text())
    summary = {"predictions": predictions_path, "metrics": out / "metrics.kv"}
    for key in ("s_va", "s_expr", "s_au"):
        value = getattr(report, key)
        summary[key] = "" if value is None else repr(value)
    _write_run_files(out, run, "evaluate", summary)


def cmd_analyze(args) -> None:
    out = _prepare_out(args)
    run = _run_config(args)
    report = analysis.layer_contribution_from_checkpoint(args.checkpoint)
    table_path = out / "contribution.csv"
    plot_path = out / "contribution.png"
    analysis.write_contribution_table(report, table_path)
    analysis.plot_contributions(report, plot_path)
    _write_run_files(
        out, run, "analyze",
        {"table": table_path, "plot": plot_path, "checkpoint": args.checkpoint},
    )


def cmd_expr_dist(args) -> None:
    out = _prepare_out(args)
    run = _run_config(args)
    manifest = data.load_manifest(args.manifest)
    counts, proportions = data.expression_distribution(manifest)
    table_path = out / "expression-distribution.csv"
    data.write_distribution_table(counts, proportions, table_path)
    summary = {
        "table": table_path,
        "total": int(counts.sum()),
        "counts": "|".join(str(int(c)) for c in counts),
    }
    if args.plot:
        plot_path = out / "expression-distribution.png"
        data.plot_distribution(counts, plot_path)
        summary["plot"] = plot_path
    _write_run_files(out, run, "expr-dist", summary)


def cmd_merge(args) -> None:
    out = _prepare_out(args)
    run = _run_config(args)
    manifests = [data.load_manifest(p) for p in args.manifests]
    merged = data.merge_datasets(manifests, prefix_with_source=args.prefix_source)
    merged_path = data.save_manifest(merged, out / "merged-manifest.csv")
    cov = merged.coverage
    _write_run_files(
        out, run, "merge",
        {
            "manifest": merged_path,
            "n": len(merged.records),
            "coverage_va": cov[0],
            "coverage_expr": cov[1],
            "coverage_au": cov[2],
        },
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mtaffect",
        description="Multi-task affective analysis: synthesis, training, "
        "label completion, evaluation, and head analysis.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--config", default=None, help="line-based config file")
        p.add_argument("--seed", type=int, default=None, help="override the run seed")

    p = sub.add_parser("gen-synthetic", help="write a synthetic dataset")
    common(p)
    p.add_argument("--n", type=int, required=True, help="number of samples")
    p.add_argument("--image-size", type=int, default=32)
    p.add_argument("--noise", type=float, default=0.0)
    p.add_argument("--mask-rate", type=float, default=0.0)
    p.add_argument("--num-aus", type=int, default=12)
    p.set_defaults(handler=cmd_gen_synthetic)

    p = sub.add_parser("train-teacher", help="train a single-task teacher")
    common(p)
    p.add_argument("--task", choices=list(distill.TASKS), required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--val-manifest", default=None)
    p.set_defaults(handler=cmd_train_teacher)

    p = sub.add_parser("complete-labels", help="fill missing labels with teacher predictions")
    common(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--teacher-va", required=True)
    p.add_argument("--teacher-expr", required=True)
    p.add_argument("--teacher-au", required=True)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--hard", action="store_true", help="argmax/thresholded completions")
    p.set_defaults(handler=cmd_complete_labels)

    p = sub.add_parser("build-multi", help="build the unified fully-labeled manifest")
    common(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--completed", required=True)
    p.set_defaults(handler=cmd_build_multi)

    p = sub.add_parser("train-student", help="train the multi-task student")
    common(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--val-manifest", default=None)
    p.set_defaults(handler=cmd_train_student)

    p = sub.add_parser("evaluate", help="score predictions against labels")
    common(p)
    p.add_argument("--labels", required=True, help="manifest file with ground truth")
    group = p.add_mutually_exclusive_group(required=True)
    group.add_argument("--predictions", default=None, help="prediction CSV")
    group.add_argument("--checkpoint", default=None, help="model to run inference with")
    p.add_argument("--au-threshold", type=float, default=0.5)
    p.add_argument("--batch-size", type=int, default=64)
    p.set_defaults(handler=cmd_evaluate)

    p = sub.add_parser("analyze", help="per-level head contribution report")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.set_defaults(handler=cmd_analyze)

    p = sub.add_parser("expr-dist", help="expression class distribution")
    common(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--plot", action="store_true")
    p.set_defaults(handler=cmd_expr_dist)

    p = sub.add_parser("merge", help="merge manifests without re-sampling")
    common(p)
    p.add_argument("--manifests", nargs="+", required=True)
    p.add_argument("--prefix-source", action="store_true")
    p.set_defaults(handler=cmd_merge)

    return parser


_ERROR_CATEGORIES: list[tuple[type, str, int]] = [
    (ConfigError, "config", 2),
    (ValidationError, "validation", 3),
    (ManifestError, "manifest", 4),
    (MergeError, "merge", 4),
    (AlignmentError, "alignment", 4),
    (CompletenessError, "completeness", 4),
    (CheckpointError, "checkpoint", 5),
    (AnalysisError, "analysis", 6),
    (TrainingError, "training", 7),
    (MTAffectError, "error", 1),
    (OSError, "io", 8),
]


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    try:
        args.handler(args)
    except tuple(t for t, _, _ in _ERROR_CATEGORIES) as exc:
        for err_type, category, code in _ERROR_CATEGORIES:
            if isinstance(exc, err_type):
                print(f"error[{category}]: {exc}", file=sys.stderr)
                return code
        raise  # unreachable
    return 0


if __name__ == "__main__":
    sys.exit(main())
