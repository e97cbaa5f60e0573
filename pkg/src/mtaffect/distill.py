"""Teacher-student missing-label completion.

Per-task teachers are trained on the samples that carry that task's
label; their soft predictions fill every missing (sample, task) pair;
the unified manifest then trains the multi-task student. Ground-truth
labels are never overwritten.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path

import torch

from .checkpoint import load_checkpoint, save_checkpoint
from .data import DatasetManifest, ImageCache, Provenance, SampleRecord, manifest_digest
from .errors import CheckpointError, CompletenessError, ManifestError, ValidationError
from .losses import LossWeights, TargetSet
from .model import ModelConfig, MultiTaskPyramidNet, build_model
from .trainer import FitResult, TrainConfig, TrainHistory, fit

logger = logging.getLogger(__name__)

TASKS = ("va", "expr", "au")


def task_loss_weights(task: str) -> LossWeights:
    """Weights activating a single task's loss (the teacher objective)."""
    if task not in TASKS:
        raise ValidationError(f"unknown task {task!r}, expected one of {TASKS}")
    return LossWeights(
        alpha=1.0 if task == "va" else 0.0,
        beta=1.0 if task == "expr" else 0.0,
        gamma=1.0 if task == "au" else 0.0,
    )


def filter_task_labeled(manifest: DatasetManifest, task: str) -> DatasetManifest:
    """The task-specific training subset: records carrying that task's label."""
    indices = manifest.task_indices(task)
    return DatasetManifest(
        records=[manifest.records[i] for i in indices],
        num_aus=manifest.num_aus,
        num_expressions=manifest.num_expressions,
        root=manifest.root,
    )


@dataclass
class TeacherModel:
    """A single-task model plus the digest of the manifest it trained on."""

    task: str
    model: MultiTaskPyramidNet
    manifest_digest: str

    @property
    def teacher_id(self) -> str:
        return f"{self.task}:{self.manifest_digest[:12]}"


def train_teacher(
    task: str,
    manifest: DatasetManifest,
    model_config: ModelConfig,
    train_config: TrainConfig,
    val_manifest: DatasetManifest | None = None,
    out_dir=None,
) -> tuple[TeacherModel, TrainHistory]:
    """Train a teacher on the task-specific subset of the mixed manifest.

    Only the designated task's loss is active, so the other heads receive
    zero gradient throughout.
    """
    task_manifest = filter_task_labeled(manifest, task)
    if not task_manifest.records:
        raise ValidationError(f"manifest has no {task} labels; cannot train a {task} teacher")
    model = build_model(model_config, precision=train_config.precision)
    result = fit(
        model,
        task_manifest,
        train_config,
        loss_weights=task_loss_weights(task),
        val_manifest=val_manifest,
        out_dir=out_dir,
    )
    teacher = TeacherModel(
        task=task, model=result.model, manifest_digest=manifest_digest(task_manifest)
    )
    if out_dir is not None:
        save_teacher(teacher, Path(out_dir) / f"teacher-{task}.ckpt")
    return teacher, result.history


def save_teacher(teacher: TeacherModel, path) -> str:
    return save_checkpoint(
        teacher.model, path,
        extra={"task": teacher.task, "manifest_digest": teacher.manifest_digest},
    )


def load_teacher(path) -> TeacherModel:
    model, _, extra = load_checkpoint(path)
    task = extra.get("task")
    if task not in TASKS:
        raise CheckpointError(f"{path}: not a teacher checkpoint (task={task!r})")
    return TeacherModel(task=task, model=model, manifest_digest=extra.get("manifest_digest", ""))


@dataclass(frozen=True)
class CompletedEntry:
    """A teacher's prediction for one missing (sample, task) pair."""

    task: str
    value: tuple
    teacher_id: str


@dataclass
class CompletedLabels:
    """Teacher predictions keyed by sample id and task, plus dropped samples."""

    entries: dict[str, dict[str, CompletedEntry]] = field(default_factory=dict)
    dropped: list[tuple[str, str]] = field(default_factory=list)
    num_expressions: int = 7
    num_aus: int = 12

    def count(self, task: str) -> int:
        return sum(1 for by_task in self.entries.values() if task in by_task)

    def add(self, sample_id: str, entry: CompletedEntry) -> None:
        self.entries.setdefault(sample_id, {})[entry.task] = entry

    def save(self, path) -> None:
        """One row per completed (sample, task) pair, manifest-style columns."""
        with open(path, "w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(
                ["id", "valence", "arousal", "expr"]
                + [f"au_{j}" for j in range(self.num_aus)]
                + ["teacher_id"]
            )
            for sample_id in self.entries:
                by_task = self.entries[sample_id]
                for task in TASKS:
                    if task not in by_task:
                        continue
                    entry = by_task[task]
                    va = ("", "")
                    expr = ""
                    au = [""] * self.num_aus
                    if task == "va":
                        va = (repr(entry.value[0]), repr(entry.value[1]))
                    elif task == "expr":
                        expr = "|".join(repr(p) for p in entry.value)
                    else:
                        au = [repr(v) for v in entry.value]
                    writer.writerow([sample_id, va[0], va[1], expr] + au + [entry.teacher_id])

    @classmethod
    def load(cls, path, num_expressions: int = 7) -> "CompletedLabels":
        with open(path, "r", encoding="utf-8", newline="") as fh:
            reader = csv.reader(fh)
            try:
                header = next(reader)
            except StopIteration:
                raise ManifestError(f"empty completed-labels file: {path}") from None
            num_aus = len(header) - 5
            expected = (
                ["id", "valence", "arousal", "expr"]
                + [f"au_{j}" for j in range(num_aus)]
                + ["teacher_id"]
            )
            if num_aus < 1 or header != expected:
                raise ManifestError(f"bad completed-labels header: {header}")
            completed = cls(num_expressions=num_expressions, num_aus=num_aus)
            for row_no, row in enumerate(reader, start=2):
                if len(row) != len(header):
                    raise ManifestError(
                        f"expected {len(header)} fields, got {len(row)}", row=row_no
                    )
                sample_id, teacher_id = row[0], row[-1]
                va_raw, expr_raw, au_raw = row[1:3], row[3], row[4:-1]
                has_va = any(v != "" for v in va_raw)
                has_au = any(v != "" for v in au_raw)
                filled = sum([has_va, expr_raw != "", has_au])
                if filled != 1:
                    raise ManifestError(
                        "each row must complete exactly one task", row=row_no
                    )
                try:
                    if has_va:
                        entry = CompletedEntry(
                            "va", (float(va_raw[0]), float(va_raw[1])), teacher_id
                        )
                    elif expr_raw:
                        probs = tuple(float(p) for p in expr_raw.split("|"))
                        if len(probs) != num_expressions:
                            raise ValueError(
                                f"expected {num_expressions} expression probabilities"
                            )
                        entry = CompletedEntry("expr", probs, teacher_id)
                    else:
                        entry = CompletedEntry(
                            "au", tuple(float(v) for v in au_raw), teacher_id
                        )
                except ValueError as exc:
                    raise ManifestError(f"unparseable value ({exc})", row=row_no) from None
                completed.add(sample_id, entry)
        return completed


def _teacher_outputs(
    teacher: TeacherModel, images: torch.Tensor, hard: bool
) -> list[tuple]:
    """Per-sample completion values from one teacher's forward pass."""
    teacher.model.eval()
    with torch.no_grad():
        pred = teacher.model(images)
        if teacher.task == "va":
            va = pred.va.clamp_(-1.0, 1.0).cpu().numpy()
            return [(float(v), float(a)) for v, a in va]
        if teacher.task == "expr":
            if hard:
                one_hot = torch.nn.functional.one_hot(
                    pred.expr_logits.argmax(dim=-1), pred.expr_logits.shape[-1]
                ).double()
                probs = one_hot.cpu().numpy()
            else:
                probs = torch.softmax(pred.expr_logits.double(), dim=-1).cpu().numpy()
                probs = probs / probs.sum(axis=1, keepdims=True)
            return [tuple(float(p) for p in row) for row in probs]
        sig = torch.sigmoid(pred.au_logits.double())
        if hard:
            sig = (sig >= 0.5).double()
        return [tuple(float(v) for v in row) for row in sig.cpu().numpy()]


def complete_labels(
    teachers: dict[str, TeacherModel],
    manifest: DatasetManifest,
    batch_size: int = 64,
    hard: bool = False,
) -> CompletedLabels:
    """Run each teacher over the samples missing its task's label.

    Soft outputs are stored by default (probability vectors for EXPR,
    sigmoid values for AU); `hard` switches to argmax / thresholded
    completions. Samples whose image cannot be read are dropped and
    reported rather than aborting the run.
    """
    if set(teachers) != set(TASKS):
        raise ValidationError(f"need teachers for all of {TASKS}, got {sorted(teachers)}")
    for task, teacher in teachers.items():
        if teacher.task != task:
            raise ValidationError(f"teacher registered under {task!r} was trained for {teacher.task!r}")

    completed = CompletedLabels(
        num_expressions=manifest.num_expressions, num_aus=manifest.num_aus
    )

    input_size = next(iter(teachers.values())).model.config.input_size
    cache = ImageCache(manifest, input_size)
    needy: list[int] = []
    for i, record in enumerate(manifest.records):
        if all(record.targets.mask):
            continue
        try:
            cache.get(i)
        except OSError as exc:
            completed.dropped.append((record.id, str(exc)))
            logger.warning("complete_labels: dropping %s (%s)", record.id, exc)
            continue
        needy.append(i)

    task_pos = {"va": 0, "expr": 1, "au": 2}
    for task in TASKS:
        missing = [i for i in needy if not manifest.records[i].targets.mask[task_pos[task]]]
        teacher = teachers[task]
        dtype = teacher.model.dtype
        for start in range(0, len(missing), batch_size):
            chunk = missing[start : start + batch_size]
            images = torch.from_numpy(cache.batch(chunk)).to(dtype)
            values = _teacher_outputs(teacher, images, hard)
            for i, value in zip(chunk, values):
                completed.add(
                    manifest.records[i].id,
                    CompletedEntry(task=task, value=value, teacher_id=teacher.teacher_id),
                )
    return completed


def build_unified(manifest: DatasetManifest, completed: CompletedLabels) -> DatasetManifest:
    """Fill every missing label from the completed set, preserving ground truth.

    Every record of the result carries all three labels; provenance marks
    which came from a teacher. Records dropped during completion are
    excluded. A missing (sample, task) pair without a completion raises.
    """
    dropped_ids = {sid for sid, _ in completed.dropped}
    records: list[SampleRecord] = []
    for record in manifest.records:
        if record.id in dropped_ids:
            continue
        targets = record.targets
        prov = record.provenance
        if all(targets.mask):
            records.append(record)
            continue
        by_task = completed.entries.get(record.id, {})
        values = {"va": targets.va, "expr": targets.expr, "au": targets.au}
        provs = {"va": prov.va, "expr": prov.expr, "au": prov.au}
        for task, present in zip(TASKS, targets.mask):
            if present:
                continue
            entry = by_task.get(task)
            if entry is None:
                raise CompletenessError(
                    f"no completed {task} label for sample {record.id!r}"
                )
            values[task] = entry.value
            provs[task] = "teacher"
        records.append(
            SampleRecord(
                id=record.id,
                image_path=record.image_path,
                source=record.source,
                targets=TargetSet(va=values["va"], expr=values["expr"], au=values["au"]),
                provenance=Provenance(va=provs["va"], expr=provs["expr"], au=provs["au"]),
            )
        )
    return DatasetManifest(
        records=records,
        num_aus=manifest.num_aus,
        num_expressions=manifest.num_expressions,
        root=manifest.root,
    )


def train_student(
    d_multi: DatasetManifest,
    model_config: ModelConfig,
    train_config: TrainConfig,
    loss_weights: LossWeights = LossWeights(),
    val_manifest: DatasetManifest | None = None,
    out_dir=None,
) -> FitResult:
    """Train the multi-task student on the unified (fully labeled) manifest."""
    n = len(d_multi.records)
    if d_multi.coverage != (n, n, n):
        raise ValidationError(
            f"student manifest must be fully labeled, coverage={d_multi.coverage} of n={n}"
        )
    model = build_model(model_config, precision=train_config.precision)
    return fit(
        model, d_multi, train_config,
        loss_weights=loss_weights, val_manifest=val_manifest, out_dir=out_dir,
    )
