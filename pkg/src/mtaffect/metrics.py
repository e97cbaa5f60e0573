"""Evaluation metrics and challenge scores.

Concordance correlation uses population (1/n) moments; macro F1 averages
over classes that appear in the ground truth; AU average F1 is the
per-column binary F1 averaged over all AU labels; total accuracy counts
every individual decision ((sample, label) bits for the AU task). The
three task scores are fixed-weight combinations of these metrics.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import TYPE_CHECKING

import numpy as np

from .errors import AlignmentError, ManifestError, ValidationError

if TYPE_CHECKING:
    from .data import DatasetManifest

DEGENERATE_DENOM = 1e-12

VA_WEIGHTS = (0.5, 0.5)        # s_va   = 0.5*CCC_V + 0.5*CCC_A
EXPR_WEIGHTS = (0.67, 0.33)    # s_expr = 0.67*F1   + 0.33*TAcc
AU_WEIGHTS = (0.5, 0.5)        # s_au   = 0.5*AF1   + 0.5*TAcc


@dataclass(frozen=True)
class MomentStats:
    """Population (1/n) first and second moments of a paired sequence."""

    mean_x: float
    mean_y: float
    var_x: float
    var_y: float
    cov_xy: float
    n: int


def moment_stats(x, y) -> MomentStats:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.ndim != 1 or y.ndim != 1 or x.shape != y.shape:
        raise ValidationError(f"sequences must be 1-D and equal-length, got {x.shape} vs {y.shape}")
    if x.size < 2:
        raise ValidationError(f"need at least 2 samples, got {x.size}")
    mx, my = float(x.mean()), float(y.mean())
    return MomentStats(
        mean_x=mx,
        mean_y=my,
        var_x=float(((x - mx) ** 2).mean()),
        var_y=float(((y - my) ** 2).mean()),
        cov_xy=float(((x - mx) * (y - my)).mean()),
        n=int(x.size),
    )


@dataclass(frozen=True)
class CCCResult:
    value: float
    degenerate: bool
    stats: MomentStats


def ccc_detailed(x, y) -> CCCResult:
    """Concordance correlation 2*s_xy / (s_x^2 + s_y^2 + (mean_x - mean_y)^2).

    A denominator below 1e-12 (both sequences constant and equal) yields
    value 0 with the degenerate flag set instead of NaN.
    """
    stats = moment_stats(x, y)
    denom = stats.var_x + stats.var_y + (stats.mean_x - stats.mean_y) ** 2
    if denom < DEGENERATE_DENOM:
        return CCCResult(value=0.0, degenerate=True, stats=stats)
    return CCCResult(value=2.0 * stats.cov_xy / denom, degenerate=False, stats=stats)


def ccc(x, y) -> float:
    return ccc_detailed(x, y).value


def confusion_matrix(pred, true, num_classes: int) -> np.ndarray:
    """Count matrix with true classes on rows and predicted classes on columns."""
    pred = np.asarray(pred, dtype=np.int64)
    true = np.asarray(true, dtype=np.int64)
    if pred.shape != true.shape or pred.ndim != 1:
        raise ValidationError("pred/true must be equal-length 1-D class sequences")
    if pred.size and (
        pred.min() < 0 or pred.max() >= num_classes or true.min() < 0 or true.max() >= num_classes
    ):
        raise ValidationError(f"class labels out of range [0, {num_classes})")
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(cm, (true, pred), 1)
    return cm


def f1_per_class(cm: np.ndarray) -> np.ndarray:
    """Per-class F1 = 2PR/(P+R) with the 0/0 -> 0 convention."""
    cm = np.asarray(cm)
    if cm.ndim != 2 or cm.shape[0] != cm.shape[1] or cm.shape[0] == 0:
        raise ValidationError("confusion matrix must be square and non-empty")
    diag = np.diag(cm).astype(np.float64)
    col = cm.sum(axis=0).astype(np.float64)
    row = cm.sum(axis=1).astype(np.float64)
    precision = np.divide(diag, col, out=np.zeros_like(diag), where=col > 0)
    recall = np.divide(diag, row, out=np.zeros_like(diag), where=row > 0)
    pr = precision + recall
    return np.divide(2 * precision * recall, pr, out=np.zeros_like(diag), where=pr > 0)


def macro_f1(cm: np.ndarray) -> float:
    """Unweighted mean F1 over classes that appear in the ground truth."""
    f1 = f1_per_class(cm)
    present = np.asarray(cm).sum(axis=1) > 0
    if not present.any():
        raise ValidationError("confusion matrix has no true samples")
    return float(f1[present].mean())


def total_accuracy(pred, true) -> float:
    """Fraction of individual predictions that are correct.

    For the AU task, pass the n x K bit matrices; every (sample, label)
    decision counts toward the denominator.
    """
    pred = np.asarray(pred)
    true = np.asarray(true)
    if pred.shape != true.shape:
        raise ValidationError(f"shape mismatch: {pred.shape} vs {true.shape}")
    if pred.size == 0:
        raise ValidationError("cannot compute accuracy of an empty prediction set")
    return float((pred == true).sum() / pred.size)


def _binary_f1(pred: np.ndarray, true: np.ndarray) -> float:
    tp = float(np.sum((pred == 1) & (true == 1)))
    fp = float(np.sum((pred == 1) & (true == 0)))
    fn = float(np.sum((pred == 0) & (true == 1)))
    precision = tp / (tp + fp) if tp + fp > 0 else 0.0
    recall = tp / (tp + fn) if tp + fn > 0 else 0.0
    return 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0


def au_average_f1(pred_bits, true_bits) -> float:
    """Binary F1 of the positive class per AU column, averaged over columns."""
    pred = np.asarray(pred_bits, dtype=np.int64)
    true = np.asarray(true_bits, dtype=np.int64)
    if pred.shape != true.shape or pred.ndim != 2 or pred.shape[1] == 0:
        raise ValidationError(f"expected matching n x K bit matrices, got {pred.shape} vs {true.shape}")
    return float(np.mean([_binary_f1(pred[:, j], true[:, j]) for j in range(pred.shape[1])]))


def va_score(ccc_v: float, ccc_a: float) -> float:
    return VA_WEIGHTS[0] * ccc_v + VA_WEIGHTS[1] * ccc_a


def expr_score(f1: float, tacc: float) -> float:
    return EXPR_WEIGHTS[0] * f1 + EXPR_WEIGHTS[1] * tacc


def au_score(af1: float, tacc: float) -> float:
    return AU_WEIGHTS[0] * af1 + AU_WEIGHTS[1] * tacc


def challenge_scores(
    ccc_v: float, ccc_a: float, expr_f1: float, expr_tacc: float, au_f1: float, au_tacc: float
) -> tuple[float, float, float]:
    """(s_va, s_expr, s_au) from the six component metrics."""
    return (
        va_score(ccc_v, ccc_a),
        expr_score(expr_f1, expr_tacc),
        au_score(au_f1, au_tacc),
    )


@dataclass
class MetricsReport:
    """Per-task metrics and challenge scores; None marks a task with no labels."""

    ccc_v: float | None = None
    ccc_a: float | None = None
    ccc_v_degenerate: bool = False
    ccc_a_degenerate: bool = False
    s_va: float | None = None
    expr_f1: float | None = None
    expr_tacc: float | None = None
    s_expr: float | None = None
    au_f1: float | None = None
    au_tacc: float | None = None
    s_au: float | None = None
    counts: dict[str, int] = field(default_factory=lambda: {"va": 0, "expr": 0, "au": 0})
    au_threshold: float = 0.5

    def available_scores(self) -> list[float]:
        return [s for s in (self.s_va, self.s_expr, self.s_au) if s is not None]

    def mean_score(self) -> float | None:
        scores = self.available_scores()
        return sum(scores) / len(scores) if scores else None

    def to_kv_lines(self) -> list[str]:
        lines = [
            f"va_count={self.counts['va']}",
            f"expr_count={self.counts['expr']}",
            f"au_count={self.counts['au']}",
            f"va_available={int(self.s_va is not None)}",
            f"expr_available={int(self.s_expr is not None)}",
            f"au_available={int(self.s_au is not None)}",
        ]
        if self.s_va is not None:
            lines += [
                f"ccc_v={self.ccc_v!r}",
                f"ccc_a={self.ccc_a!r}",
                f"ccc_v_degenerate={int(self.ccc_v_degenerate)}",
                f"ccc_a_degenerate={int(self.ccc_a_degenerate)}",
                f"s_va={self.s_va!r}",
            ]
        if self.s_expr is not None:
            lines += [
                f"expr_f1={self.expr_f1!r}",
                f"expr_tacc={self.expr_tacc!r}",
                f"s_expr={self.s_expr!r}",
            ]
        if self.s_au is not None:
            lines += [
                f"au_threshold={self.au_threshold!r}",
                f"au_f1={self.au_f1!r}",
                f"au_tacc={self.au_tacc!r}",
                f"s_au={self.s_au!r}",
            ]
        return lines

    def to_text(self) -> str:
        def fmt(v):
            return "absent" if v is None else f"{v:.6f}"

        return "\n".join(
            [
                f"VA   (n={self.counts['va']}): CCC_V={fmt(self.ccc_v)} CCC_A={fmt(self.ccc_a)} "
                f"S_VA={fmt(self.s_va)}",
                f"EXPR (n={self.counts['expr']}): F1={fmt(self.expr_f1)} TAcc={fmt(self.expr_tacc)} "
                f"S_EXPR={fmt(self.s_expr)}",
                f"AU   (n={self.counts['au']}): AF1={fmt(self.au_f1)} TAcc={fmt(self.au_tacc)} "
                f"S_AU={fmt(self.s_au)}",
            ]
        )

    def save(self, kv_path, text_path=None) -> None:
        Path(kv_path).write_text("\n".join(self.to_kv_lines()) + "\n", encoding="utf-8")
        if text_path is not None:
            Path(text_path).write_text(self.to_text() + "\n", encoding="utf-8")


@dataclass
class PredictionTable:
    """Model outputs for a set of samples, keyed by sample id.

    va holds (valence, arousal) values, expr_class the argmax class, and
    au_prob the per-AU sigmoid probabilities.
    """

    ids: list[str]
    va: np.ndarray
    expr_class: np.ndarray
    au_prob: np.ndarray

    def __post_init__(self):
        n = len(self.ids)
        self.va = np.asarray(self.va, dtype=np.float64).reshape(n, 2)
        self.expr_class = np.asarray(self.expr_class, dtype=np.int64).reshape(n)
        self.au_prob = np.asarray(self.au_prob, dtype=np.float64).reshape(n, -1)

    @property
    def num_aus(self) -> int:
        return self.au_prob.shape[1]

    def __len__(self) -> int:
        return len(self.ids)

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(
                ["id", "valence", "arousal", "expr"]
                + [f"au_{j}" for j in range(self.num_aus)]
            )
            for i, sid in enumerate(self.ids):
                writer.writerow(
                    [sid, repr(float(self.va[i, 0])), repr(float(self.va[i, 1])),
                     str(int(self.expr_class[i]))]
                    + [repr(float(p)) for p in self.au_prob[i]]
                )

    @classmethod
    def load(cls, path) -> "PredictionTable":
        with open(path, "r", encoding="utf-8", newline="") as fh:
            reader = csv.reader(fh)
            try:
                header = next(reader)
            except StopIteration:
                raise ManifestError(f"empty prediction file: {path}") from None
            if header[:4] != ["id", "valence", "arousal", "expr"] or not all(
                h == f"au_{j}" for j, h in enumerate(header[4:])
            ):
                raise ManifestError(f"bad prediction header: {header}")
            num_aus = len(header) - 4
            ids, va, expr, au = [], [], [], []
            for row_no, row in enumerate(reader, start=2):
                if len(row) != len(header):
                    raise ManifestError(
                        f"expected {len(header)} fields, got {len(row)}", row=row_no
                    )
                try:
                    ids.append(row[0])
                    va.append((float(row[1]), float(row[2])))
                    expr.append(int(row[3]))
                    au.append([float(v) for v in row[4:]])
                except ValueError as exc:
                    raise ManifestError(f"unparseable value ({exc})", row=row_no) from None
        return cls(
            ids=ids,
            va=np.array(va, dtype=np.float64).reshape(len(ids), 2),
            expr_class=np.array(expr, dtype=np.int64),
            au_prob=np.array(au, dtype=np.float64).reshape(len(ids), num_aus),
        )


def _hard_expr_class(target) -> int:
    return int(target) if isinstance(target, int) else int(np.argmax(target))


def evaluate(
    manifest: "DatasetManifest", predictions: PredictionTable, au_threshold: float = 0.5
) -> MetricsReport:
    """Score predictions against a manifest's labels.

    Metrics for each task use only the samples whose manifest row carries
    that task's label; a task with no labeled samples (or fewer than two
    for CCC) is reported as absent rather than zero. Soft labels are
    reduced to decisions (argmax class, AU bits at 0.5) for scoring.
    """
    index: dict[str, int] = {}
    for i, sid in enumerate(predictions.ids):
        if sid in index:
            raise AlignmentError(f"duplicate prediction id: {sid!r}")
        index[sid] = i

    va_pred, va_true = [], []
    expr_pred, expr_true = [], []
    au_pred_rows, au_true_rows = [], []
    counts = {"va": 0, "expr": 0, "au": 0}

    for record in manifest.records:
        t = record.targets
        if t.empty:
            continue
        if record.id not in index:
            raise AlignmentError(f"no prediction for labeled sample {record.id!r}")
        i = index[record.id]
        if t.va is not None:
            counts["va"] += 1
            va_pred.append(predictions.va[i])
            va_true.append(t.va)
        if t.expr is not None:
            counts["expr"] += 1
            expr_pred.append(int(predictions.expr_class[i]))
            expr_true.append(_hard_expr_class(t.expr))
        if t.au is not None:
            if len(t.au) != predictions.num_aus:
                raise AlignmentError(
                    f"sample {record.id!r}: {len(t.au)} AU labels vs "
                    f"{predictions.num_aus} predicted"
                )
            counts["au"] += 1
            au_pred_rows.append(predictions.au_prob[i] >= au_threshold)
            au_true_rows.append(np.asarray(t.au) >= 0.5)

    report = MetricsReport(counts=counts, au_threshold=au_threshold)

    if counts["va"] >= 2:
        vp = np.array(va_pred, dtype=np.float64)
        vt = np.array(va_true, dtype=np.float64)
        res_v = ccc_detailed(vp[:, 0], vt[:, 0])
        res_a = ccc_detailed(vp[:, 1], vt[:, 1])
        report.ccc_v, report.ccc_v_degenerate = res_v.value, res_v.degenerate
        report.ccc_a, report.ccc_a_degenerate = res_a.value, res_a.degenerate
        report.s_va = va_score(report.ccc_v, report.ccc_a)

    if counts["expr"] > 0:
        cm = confusion_matrix(expr_pred, expr_true, manifest.num_expressions)
        report.expr_f1 = macro_f1(cm)
        report.expr_tacc = total_accuracy(expr_pred, expr_true)
        report.s_expr = expr_score(report.expr_f1, report.expr_tacc)

    if counts["au"] > 0:
        pb = np.array(au_pred_rows, dtype=np.int64)
        tb = np.array(au_true_rows, dtype=np.int64)
        report.au_f1 = au_average_f1(pb, tb)
        report.au_tacc = total_accuracy(pb, tb)
        report.s_au = au_score(report.au_f1, report.au_tacc)

    return report


def evaluate_files(predictions_path, labels_path, au_threshold: float = 0.5) -> MetricsReport:
    """File-based wrapper: predictions CSV against a manifest file."""
    from .data import load_manifest

    return evaluate(load_manifest(labels_path), PredictionTable.load(predictions_path), au_threshold)
