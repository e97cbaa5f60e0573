"""Per-task losses and the weighted multi-task objective.

The three task losses are written directly from their defining formulas
(squared error for valence-arousal, log-sum-exp cross-entropy for
expressions, stable binary cross-entropy for action units) so that
closed-form values are exact and logits up to |x| = 1e4 stay finite.
Targets may be missing per task; a masked-out task contributes exactly
zero loss and zero gradient.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence, TYPE_CHECKING

import numpy as np
import torch
from torch import Tensor

from .errors import DegenerateSampleError, ValidationError

if TYPE_CHECKING:
    from .model import MultiTaskPrediction

PROB_SUM_TOL = 1e-6


@dataclass(frozen=True)
class LossWeights:
    """Weights for the VA, expression, and AU terms of the total loss."""

    alpha: float = 1.0
    beta: float = 1.0
    gamma: float = 1.0

    def __post_init__(self):
        if min(self.alpha, self.beta, self.gamma) < 0:
            raise ValidationError("loss weights must be non-negative")
        if max(self.alpha, self.beta, self.gamma) <= 0:
            raise ValidationError("at least one loss weight must be positive")


@dataclass(frozen=True)
class TargetSet:
    """Targets for one sample; a None field means that task's label is missing.

    va: (valence, arousal) pair, each in [-1, 1].
    expr: class index, or a probability tuple over the expression classes.
    au: per-AU values in [0, 1] (hard bits or soft probabilities).
    """

    va: tuple[float, float] | None = None
    expr: int | tuple[float, ...] | None = None
    au: tuple[float, ...] | None = None

    def __post_init__(self):
        if self.va is not None:
            v, a = float(self.va[0]), float(self.va[1])
            if not (math.isfinite(v) and math.isfinite(a)):
                raise ValidationError("VA target must be finite")
            if not (-1.0 <= v <= 1.0 and -1.0 <= a <= 1.0):
                raise ValidationError(f"VA target out of [-1, 1]: ({v}, {a})")
            object.__setattr__(self, "va", (v, a))
        if self.expr is not None:
            if isinstance(self.expr, (int, np.integer)):
                idx = int(self.expr)
                if idx < 0:
                    raise ValidationError(f"expression class must be >= 0, got {idx}")
                object.__setattr__(self, "expr", idx)
            else:
                p = tuple(float(x) for x in self.expr)
                if any(x < 0 or not math.isfinite(x) for x in p):
                    raise ValidationError("soft expression target must be non-negative and finite")
                if abs(math.fsum(p) - 1.0) > PROB_SUM_TOL:
                    raise ValidationError("soft expression target must sum to 1")
                object.__setattr__(self, "expr", p)
        if self.au is not None:
            au = tuple(float(x) for x in self.au)
            if any(not (0.0 <= x <= 1.0) for x in au):
                raise ValidationError("AU target values must lie in [0, 1]")
            object.__setattr__(self, "au", au)

    @property
    def mask(self) -> tuple[bool, bool, bool]:
        """(VA, EXPR, AU) label-availability bits."""
        return (self.va is not None, self.expr is not None, self.au is not None)

    @property
    def empty(self) -> bool:
        return not any(self.mask)


def _as_tensor(x, name: str) -> Tensor:
    t = torch.as_tensor(x)
    if not t.is_floating_point():
        t = t.double()
    if not torch.isfinite(t).all():
        raise ValidationError(f"{name} contains non-finite values")
    return t


def va_loss(pred_va, target_va) -> Tensor:
    """Squared-error loss (x_v - y_v)^2 + (x_a - y_a)^2.

    Accepts shape (2,) or (B, 2); returns a scalar or (B,) tensor.
    """
    pred = _as_tensor(pred_va, "VA prediction")
    target = torch.as_tensor(target_va, dtype=pred.dtype)
    if not torch.isfinite(target).all():
        raise ValidationError("VA target contains non-finite values")
    if pred.shape != target.shape or pred.shape[-1] != 2:
        raise ValidationError(
            f"VA prediction/target must both end in 2 values, "
            f"got {tuple(pred.shape)} vs {tuple(target.shape)}"
        )
    diff = pred - target
    return (diff * diff).sum(dim=-1)


def expr_loss(logits, target) -> Tensor:
    """Cross-entropy over expression logits, -x[y] + log sum_j exp(x[j]).

    `target` is a class index (hard) or a probability vector (soft); a
    one-hot soft target gives exactly the hard-target value. Batched
    logits (B, C) pair with (B,) indices or (B, C) probability rows.
    """
    x = _as_tensor(logits, "expression logits")
    lse = torch.logsumexp(x, dim=-1)
    num_classes = x.shape[-1]

    hard = isinstance(target, (int, np.integer)) or (
        isinstance(target, Tensor) and not target.is_floating_point()
    )
    if hard:
        idx = torch.as_tensor(target).long()
        if int(idx.min()) < 0 or int(idx.max()) >= num_classes:
            raise ValidationError(f"expression class out of range [0, {num_classes})")
        if x.dim() == 1 and idx.dim() == 0:
            return lse - x[idx]
        if x.dim() == 2 and idx.dim() == 1 and idx.shape[0] == x.shape[0]:
            return lse - x[torch.arange(x.shape[0]), idx]
        raise ValidationError(
            f"hard expression target shape {tuple(idx.shape)} does not pair with logits {tuple(x.shape)}"
        )
    probs = torch.as_tensor(target, dtype=x.dtype)
    if probs.shape != x.shape:
        raise ValidationError(
            f"soft expression target shape {tuple(probs.shape)} does not match logits {tuple(x.shape)}"
        )
    return lse - (probs * x).sum(dim=-1)


def au_loss(logits, target) -> Tensor:
    """Summed binary cross-entropy with logits over the AU labels.

    Per label: -[y log sigma(x) + (1 - y) log sigma(-x)], computed in the
    overflow-free form max(x, 0) - x*y + log(1 + exp(-|x|)). Targets may
    be soft values in [0, 1]. Shapes (K,) or (B, K); returns scalar or (B,).
    """
    x = _as_tensor(logits, "AU logits")
    y = torch.as_tensor(target, dtype=x.dtype)
    if y.shape != x.shape:
        raise ValidationError(
            f"AU target shape {tuple(y.shape)} does not match logits {tuple(x.shape)}"
        )
    if torch.any(y < 0) or torch.any(y > 1) or not torch.isfinite(y).all():
        raise ValidationError("AU target values must lie in [0, 1]")
    per_label = torch.clamp(x, min=0) - x * y + torch.nn.functional.softplus(-x.abs())
    return per_label.sum(dim=-1)


@dataclass(frozen=True)
class MultiTaskLoss:
    """Weighted total plus unweighted per-task components (masked tasks are 0)."""

    total: Tensor
    va: Tensor
    expr: Tensor
    au: Tensor


def multi_task_loss(
    pred: "MultiTaskPrediction", targets: TargetSet, weights: LossWeights = LossWeights()
) -> MultiTaskLoss:
    """Total loss alpha*L_VA + beta*L_EXPR + gamma*L_AU for one sample.

    Tasks whose target is missing contribute exactly zero and produce no
    gradient. Raises if the sample carries no target at all.
    """
    if targets.empty:
        raise DegenerateSampleError("sample has no target for any task")
    zero = torch.zeros((), dtype=pred.va.dtype)
    l_va = va_loss(pred.va, targets.va) if targets.va is not None else zero
    l_expr = expr_loss(pred.expr_logits, targets.expr) if targets.expr is not None else zero
    l_au = au_loss(pred.au_logits, targets.au) if targets.au is not None else zero
    total = weights.alpha * l_va + weights.beta * l_expr + weights.gamma * l_au
    return MultiTaskLoss(total=total, va=l_va, expr=l_expr, au=l_au)


@dataclass
class BatchTargets:
    """Collated targets for a batch: dense tensors plus 0/1 task masks.

    Hard expression indices are stored as one-hot probability rows, which
    leaves the loss value and gradient bit-identical to the hard path.
    Missing targets hold zeros and are masked out of the loss.
    """

    va: Tensor
    expr: Tensor
    au: Tensor
    va_mask: Tensor
    expr_mask: Tensor
    au_mask: Tensor

    @classmethod
    def collate(
        cls,
        targets: Sequence[TargetSet],
        num_expressions: int,
        num_aus: int,
        dtype: torch.dtype = torch.float32,
    ) -> "BatchTargets":
        n = len(targets)
        va = torch.zeros((n, 2), dtype=dtype)
        expr = torch.zeros((n, num_expressions), dtype=dtype)
        au = torch.zeros((n, num_aus), dtype=dtype)
        masks = torch.zeros((n, 3), dtype=dtype)
        for i, t in enumerate(targets):
            if t.va is not None:
                va[i, 0], va[i, 1] = t.va
                masks[i, 0] = 1
            if t.expr is not None:
                if isinstance(t.expr, int):
                    if t.expr >= num_expressions:
                        raise ValidationError(
                            f"expression class {t.expr} out of range [0, {num_expressions})"
                        )
                    expr[i, t.expr] = 1
                else:
                    if len(t.expr) != num_expressions:
                        raise ValidationError(
                            f"soft expression target has {len(t.expr)} classes, "
                            f"expected {num_expressions}"
                        )
                    expr[i] = torch.tensor(t.expr, dtype=dtype)
                masks[i, 1] = 1
            if t.au is not None:
                if len(t.au) != num_aus:
                    raise ValidationError(
                        f"AU target has {len(t.au)} labels, expected {num_aus}"
                    )
                au[i] = torch.tensor(t.au, dtype=dtype)
                masks[i, 2] = 1
        return cls(
            va=va, expr=expr, au=au,
            va_mask=masks[:, 0], expr_mask=masks[:, 1], au_mask=masks[:, 2],
        )

    def __len__(self) -> int:
        return self.va.shape[0]


def batch_multi_task_loss(
    pred: "MultiTaskPrediction", batch: BatchTargets, weights: LossWeights = LossWeights()
) -> MultiTaskLoss:
    """Mean-over-batch multi-task loss.

    Masked-out tasks contribute 0 (no renormalization), so a batch of
    identical fully-labeled samples reproduces the single-sample loss.
    """
    empty = (batch.va_mask + batch.expr_mask + batch.au_mask) == 0
    if bool(empty.any()):
        raise DegenerateSampleError(
            f"batch rows with no target for any task: {empty.nonzero().flatten().tolist()}"
        )
    va_ps = va_loss(pred.va, batch.va) * batch.va_mask
    expr_ps = expr_loss(pred.expr_logits, batch.expr) * batch.expr_mask
    au_ps = au_loss(pred.au_logits, batch.au) * batch.au_mask
    total = (weights.alpha * va_ps + weights.beta * expr_ps + weights.gamma * au_ps).mean()
    return MultiTaskLoss(total=total, va=va_ps.mean(), expr=expr_ps.mean(), au=au_ps.mean())
