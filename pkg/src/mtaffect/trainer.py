"""Optimization loop, evaluation loop, and the gradient-verification harness.

The fit loop subsamples a fraction of the training set each epoch,
iterates deterministic mini-batches, and applies Adam updates with the
standard moment defaults. Teachers and the student share this loop and
differ only in loss weights and epoch settings.
"""

from __future__ import annotations

import csv
import io
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .checkpoint import (  # noqa: F401  (re-exported: checkpointing lives with the trainer)
    checkpoint_digest,
    load_checkpoint,
    load_checkpoint_into,
    save_checkpoint,
)
from .data import DatasetManifest, ImageCache, subsample_indices
from .errors import TrainingError, ValidationError
from .losses import BatchTargets, LossWeights, batch_multi_task_loss
from .metrics import PredictionTable, evaluate
from .model import MultiTaskPrediction, MultiTaskPyramidNet

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    """Optimizer and schedule settings.

    The defaults mirror the single-task (teacher) recipe: Adam at 1e-3,
    batch 128, 40 epochs over a 25% per-epoch subsample. Students
    typically run 20 epochs at fraction 1.0.
    """

    optimizer: str = "adam"
    learning_rate: float = 1e-3
    batch_size: int = 128
    epochs: int = 40
    epoch_fraction: float = 0.25
    seed: int = 0
    precision: str = "single"

    def __post_init__(self):
        if self.optimizer != "adam":
            raise ValidationError(f"unsupported optimizer {self.optimizer!r}")
        # lr = 0 is admitted so the zero-step behavior stays testable.
        if self.learning_rate < 0 or not math.isfinite(self.learning_rate):
            raise ValidationError("learning_rate must be >= 0")
        if self.batch_size < 1:
            raise ValidationError("batch_size must be >= 1")
        if self.epochs < 0:
            raise ValidationError("epochs must be >= 0")
        if not 0 < self.epoch_fraction <= 1:
            raise ValidationError("epoch_fraction must be in (0, 1]")
        if self.precision not in ("single", "double"):
            raise ValidationError(f"precision must be 'single' or 'double', got {self.precision!r}")
        if self.seed < 0:
            raise ValidationError("seed must be non-negative")

    @property
    def dtype(self) -> torch.dtype:
        return torch.float64 if self.precision == "double" else torch.float32


@dataclass
class EpochRecord:
    epoch: int
    loss_total: float
    loss_va: float
    loss_expr: float
    loss_au: float
    val_mean_score: float | None = None
    wall_time: float = 0.0


@dataclass
class TrainHistory:
    epochs: list[EpochRecord] = field(default_factory=list)

    def to_csv_text(self) -> str:
        # wall times stay in the log lines so re-runs emit identical artifacts
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(
            ["epoch", "loss_total", "loss_va", "loss_expr", "loss_au", "val_mean_score"]
        )
        for r in self.epochs:
            writer.writerow(
                [
                    r.epoch,
                    repr(r.loss_total),
                    repr(r.loss_va),
                    repr(r.loss_expr),
                    repr(r.loss_au),
                    "" if r.val_mean_score is None else repr(r.val_mean_score),
                ]
            )
        return buf.getvalue()

    def save(self, path) -> None:
        Path(path).write_text(self.to_csv_text(), encoding="utf-8")


@dataclass
class FitResult:
    model: MultiTaskPyramidNet
    history: TrainHistory
    best_path: Path | None = None
    last_path: Path | None = None
    best_score: float | None = None


def _batches(indices: np.ndarray, batch_size: int):
    for start in range(0, len(indices), batch_size):
        yield indices[start : start + batch_size]


def _collate_batch(
    manifest: DatasetManifest,
    cache: ImageCache,
    indices: np.ndarray,
    model: MultiTaskPyramidNet,
    dtype: torch.dtype,
) -> tuple[torch.Tensor, BatchTargets]:
    images = torch.from_numpy(cache.batch(indices)).to(dtype)
    targets = BatchTargets.collate(
        [manifest.records[int(i)].targets for i in indices],
        num_expressions=model.config.num_expressions,
        num_aus=model.config.num_aus,
        dtype=dtype,
    )
    return images, targets


def predict_manifest(
    model: MultiTaskPyramidNet, manifest: DatasetManifest, batch_size: int = 64
) -> PredictionTable:
    """Deterministic inference over every record, in manifest order."""
    was_training = model.training
    model.eval()
    cache = ImageCache(manifest, model.config.input_size)
    va_rows, expr_rows, au_rows = [], [], []
    with torch.no_grad():
        for batch in _batches(np.arange(len(manifest.records)), batch_size):
            images = torch.from_numpy(cache.batch(batch)).to(model.dtype)
            pred = model(images)
            va_rows.append(pred.va.cpu().numpy())
            expr_rows.append(pred.expr_logits.argmax(dim=-1).cpu().numpy())
            au_rows.append(torch.sigmoid(pred.au_logits).cpu().numpy())
    if was_training:
        model.train()
    return PredictionTable(
        ids=[r.id for r in manifest.records],
        va=np.concatenate(va_rows, axis=0),
        expr_class=np.concatenate(expr_rows, axis=0),
        au_prob=np.concatenate(au_rows, axis=0),
    )


def fit(
    model: MultiTaskPyramidNet,
    manifest: DatasetManifest,
    train_config: TrainConfig,
    loss_weights: LossWeights = LossWeights(),
    val_manifest: DatasetManifest | None = None,
    out_dir=None,
) -> FitResult:
    """Train the model on the manifest's labeled records.

    Records with no label for any task are dropped up front. Each epoch
    draws its own without-replacement subsample; batch order and every
    update are deterministic given the config seed. Checkpoints the last
    epoch and the best validation mean-score when out_dir is given.
    """
    usable = [r for r in manifest.records if not r.targets.empty]
    if len(usable) < len(manifest.records):
        logger.info(
            "fit: dropped %d records with no labels", len(manifest.records) - len(usable)
        )
    if not usable:
        raise ValidationError("manifest has no labeled records")
    train_manifest = DatasetManifest(
        records=usable,
        num_aus=manifest.num_aus,
        num_expressions=manifest.num_expressions,
        root=manifest.root,
    )
    n = len(usable)
    if train_config.batch_size > n:
        raise ValidationError(f"batch_size {train_config.batch_size} exceeds dataset size {n}")
    if int(math.floor(train_config.epoch_fraction * n)) < 1:
        raise ValidationError(
            f"epoch_fraction {train_config.epoch_fraction} selects no samples from n={n}"
        )

    dtype = train_config.dtype
    model = model.to(dtype)
    cache = ImageCache(train_manifest, model.config.input_size)
    optimizer = torch.optim.Adam(
        model.parameters(), lr=train_config.learning_rate, betas=(0.9, 0.999), eps=1e-8
    )

    out_dir = Path(out_dir) if out_dir is not None else None
    best_path = last_path = None
    best_score = None
    history = TrainHistory()

    for epoch in range(train_config.epochs):
        t0 = time.perf_counter()
        model.train()
        indices = subsample_indices(n, train_config.epoch_fraction, train_config.seed, epoch)
        sums = np.zeros(4)
        seen = 0
        for batch in _batches(indices, train_config.batch_size):
            images, targets = _collate_batch(train_manifest, cache, batch, model, dtype)
            pred = model(images)
            loss = batch_multi_task_loss(pred, targets, loss_weights)
            if not torch.isfinite(loss.total):
                ids = [train_manifest.records[int(i)].id for i in batch]
                raise TrainingError(f"non-finite loss at epoch {epoch}; batch ids: {ids}")
            optimizer.zero_grad(set_to_none=True)
            loss.total.backward()
            optimizer.step()
            b = len(batch)
            sums += b * np.array(
                [t.detach().item() for t in (loss.total, loss.va, loss.expr, loss.au)]
            )
            seen += b

        record = EpochRecord(
            epoch=epoch,
            loss_total=sums[0] / seen,
            loss_va=sums[1] / seen,
            loss_expr=sums[2] / seen,
            loss_au=sums[3] / seen,
        )

        if val_manifest is not None:
            report = evaluate(val_manifest, predict_manifest(model, val_manifest))
            record.val_mean_score = report.mean_score()

        record.wall_time = time.perf_counter() - t0
        history.epochs.append(record)
        logger.info(
            "epoch=%d loss_total=%.6f loss_va=%.6f loss_expr=%.6f loss_au=%.6f "
            "val_mean_score=%s wall_time=%.3f",
            record.epoch, record.loss_total, record.loss_va, record.loss_expr,
            record.loss_au,
            "" if record.val_mean_score is None else f"{record.val_mean_score:.6f}",
            record.wall_time,
        )

        if out_dir is not None:
            out_dir.mkdir(parents=True, exist_ok=True)
            last_path = out_dir / "checkpoint-last.ckpt"
            save_checkpoint(model, last_path, extra={"epoch": epoch})
            if record.val_mean_score is not None and (
                best_score is None or record.val_mean_score > best_score
            ):
                best_score = record.val_mean_score
                best_path = out_dir / "checkpoint-best.ckpt"
                save_checkpoint(
                    model, best_path,
                    extra={"epoch": epoch, "val_mean_score": record.val_mean_score},
                )
            history.save(out_dir / "history.csv")

    model.eval()
    return FitResult(
        model=model, history=history, best_path=best_path, last_path=last_path,
        best_score=best_score,
    )


class _FlipGrad(torch.autograd.Function):
    """Identity forward, negated backward: a fault-injection probe."""

    @staticmethod
    def forward(ctx, x):
        return x

    @staticmethod
    def backward(ctx, grad):
        return -grad


@dataclass
class TensorGradCheck:
    name: str
    checked: int
    max_rel_err: float
    max_abs_err: float
    passed: bool


@dataclass
class GradCheckReport:
    tensors: list[TensorGradCheck]
    max_rel_err: float
    passed: bool
    tolerance: float
    step: float

    def tensor(self, name: str) -> TensorGradCheck:
        for t in self.tensors:
            if t.name == name:
                return t
        raise KeyError(name)

    def to_kv_lines(self) -> list[str]:
        lines = [
            f"passed={int(self.passed)}",
            f"max_rel_err={self.max_rel_err!r}",
            f"tolerance={self.tolerance!r}",
            f"step={self.step!r}",
        ]
        lines += [
            f"tensor.{t.name}: checked={t.checked} max_rel_err={t.max_rel_err!r} "
            f"max_abs_err={t.max_abs_err!r} passed={int(t.passed)}"
            for t in self.tensors
        ]
        return lines


def gradient_check(
    model: MultiTaskPyramidNet,
    images,
    targets: Sequence | BatchTargets,
    loss_weights: LossWeights = LossWeights(),
    tolerance: float = 1e-4,
    step: float = 1e-3,
    entries_per_tensor: int = 8,
    flip_va_gradient: bool = False,
) -> GradCheckReport:
    """Compare analytic total-loss gradients against central finite differences.

    For each parameter tensor the largest-magnitude gradient entries are
    re-derived as (L(w+h) - L(w-h)) / 2h and compared by relative error;
    entries whose gradient magnitude is below the finite-difference noise
    floor are held to an absolute criterion instead. Requires a double
    precision model. `flip_va_gradient` negates the VA loss's backward
    pass (its value is untouched), a deliberate fault that the check must
    localize to VA-fed parameters.
    """
    if model.dtype != torch.float64:
        raise ValidationError("gradient_check requires a double-precision model")
    images = torch.as_tensor(images, dtype=torch.float64)
    if not isinstance(targets, BatchTargets):
        targets = BatchTargets.collate(
            targets,
            num_expressions=model.config.num_expressions,
            num_aus=model.config.num_aus,
            dtype=torch.float64,
        )
    model.eval()

    def compute_loss() -> torch.Tensor:
        pred = model(images)
        if flip_va_gradient:
            pred = MultiTaskPrediction(
                va=_FlipGrad.apply(pred.va),
                expr_logits=pred.expr_logits,
                au_logits=pred.au_logits,
            )
        return batch_multi_task_loss(pred, targets, loss_weights).total

    model.zero_grad(set_to_none=True)
    compute_loss().backward()
    analytic = {
        name: (torch.zeros_like(p) if p.grad is None else p.grad.detach().clone())
        for name, p in model.named_parameters()
    }
    model.zero_grad(set_to_none=True)

    # Entries with |gradient| below this are compared absolutely: central
    # differences carry O(step^2) truncation noise regardless of gradient size.
    denom_floor = 1e-4
    abs_tol = tolerance * denom_floor

    checks: list[TensorGradCheck] = []
    overall_max_rel = 0.0
    with torch.no_grad():
        for name, param in model.named_parameters():
            grad = analytic[name].reshape(-1)
            flat = param.data.reshape(-1)
            order = torch.argsort(grad.abs(), descending=True, stable=True)
            picks = order[: min(entries_per_tensor, flat.numel())].tolist()
            max_rel = 0.0
            max_abs = 0.0
            ok = True
            for j in picks:
                original = flat[j].item()
                flat[j] = original + step
                plus = float(compute_loss())
                flat[j] = original - step
                minus = float(compute_loss())
                flat[j] = original
                fd = (plus - minus) / (2.0 * step)
                a = float(grad[j])
                diff = abs(a - fd)
                denom = max(abs(a), abs(fd))
                max_abs = max(max_abs, diff)
                if denom >= denom_floor:
                    rel = diff / denom
                    max_rel = max(max_rel, rel)
                    if rel > tolerance:
                        ok = False
                elif diff > abs_tol:
                    ok = False
            overall_max_rel = max(overall_max_rel, max_rel)
            checks.append(
                TensorGradCheck(
                    name=name, checked=len(picks), max_rel_err=max_rel,
                    max_abs_err=max_abs, passed=ok,
                )
            )

    return GradCheckReport(
        tensors=checks,
        max_rel_err=overall_max_rel,
        passed=all(c.passed for c in checks),
        tolerance=tolerance,
        step=step,
    )
