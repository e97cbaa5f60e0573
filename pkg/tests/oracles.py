"""Straight-from-formula oracle implementations used by the tests.

Everything here is deliberately written with plain Python loops and
kept independent of the library's vectorized code paths.
"""

from __future__ import annotations

import numpy as np

from mtaffect.data import DatasetManifest, Provenance, SampleRecord
from mtaffect.losses import TargetSet
from mtaffect.metrics import PredictionTable


def ccc_oracle(x, y) -> float:
    n = len(x)
    mx = sum(x) / n
    my = sum(y) / n
    var_x = sum((a - mx) ** 2 for a in x) / n
    var_y = sum((b - my) ** 2 for b in y) / n
    cov = sum((a - mx) * (b - my) for a, b in zip(x, y)) / n
    denom = var_x + var_y + (mx - my) ** 2
    if denom < 1e-12:
        return 0.0
    return 2.0 * cov / denom


def confusion_oracle(pred, true, num_classes: int):
    cm = [[0] * num_classes for _ in range(num_classes)]
    for p, t in zip(pred, true):
        cm[t][p] += 1
    return cm


def binary_f1_oracle(pred, true) -> float:
    tp = sum(1 for p, t in zip(pred, true) if p == 1 and t == 1)
    fp = sum(1 for p, t in zip(pred, true) if p == 1 and t == 0)
    fn = sum(1 for p, t in zip(pred, true) if p == 0 and t == 1)
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    return 2 * precision * recall / (precision + recall) if precision + recall else 0.0


def macro_f1_oracle(pred, true, num_classes: int) -> float:
    cm = confusion_oracle(pred, true, num_classes)
    f1s = []
    for c in range(num_classes):
        row = sum(cm[c])
        if row == 0:
            continue
        col = sum(cm[r][c] for r in range(num_classes))
        tp = cm[c][c]
        precision = tp / col if col else 0.0
        recall = tp / row
        f1s.append(
            2 * precision * recall / (precision + recall) if precision + recall else 0.0
        )
    return sum(f1s) / len(f1s)


def tacc_oracle(pred, true) -> float:
    flat_p = [v for row in pred for v in (row if isinstance(row, (list, tuple)) else [row])]
    flat_t = [v for row in true for v in (row if isinstance(row, (list, tuple)) else [row])]
    return sum(1 for p, t in zip(flat_p, flat_t) if p == t) / len(flat_p)


def au_average_f1_oracle(pred_bits, true_bits) -> float:
    k = len(pred_bits[0])
    per_col = []
    for j in range(k):
        per_col.append(
            binary_f1_oracle([row[j] for row in pred_bits], [row[j] for row in true_bits])
        )
    return sum(per_col) / k


def report_oracle(manifest: DatasetManifest, table: PredictionTable, au_threshold=0.5) -> dict:
    """Recompute the whole evaluation report straight from the formulas."""
    index = {sid: i for i, sid in enumerate(table.ids)}
    va_p, va_t, ex_p, ex_t, au_p, au_t = [], [], [], [], [], []
    for record in manifest.records:
        t = record.targets
        if t.empty:
            continue
        i = index[record.id]
        if t.va is not None:
            va_p.append((float(table.va[i, 0]), float(table.va[i, 1])))
            va_t.append(t.va)
        if t.expr is not None:
            true_cls = t.expr if isinstance(t.expr, int) else max(
                range(len(t.expr)), key=lambda c: t.expr[c]
            )
            ex_p.append(int(table.expr_class[i]))
            ex_t.append(int(true_cls))
        if t.au is not None:
            au_p.append([1 if v >= au_threshold else 0 for v in table.au_prob[i]])
            au_t.append([1 if v >= 0.5 else 0 for v in t.au])

    out: dict = {"counts": {"va": len(va_t), "expr": len(ex_t), "au": len(au_t)}}
    if len(va_t) >= 2:
        ccc_v = ccc_oracle([p[0] for p in va_p], [t[0] for t in va_t])
        ccc_a = ccc_oracle([p[1] for p in va_p], [t[1] for t in va_t])
        out["ccc_v"], out["ccc_a"] = ccc_v, ccc_a
        out["s_va"] = 0.5 * ccc_v + 0.5 * ccc_a
    if ex_t:
        f1 = macro_f1_oracle(ex_p, ex_t, manifest.num_expressions)
        tacc = tacc_oracle(ex_p, ex_t)
        out["expr_f1"], out["expr_tacc"] = f1, tacc
        out["s_expr"] = 0.67 * f1 + 0.33 * tacc
    if au_t:
        af1 = au_average_f1_oracle(au_p, au_t)
        tacc = tacc_oracle(au_p, au_t)
        out["au_f1"], out["au_tacc"] = af1, tacc
        out["s_au"] = 0.5 * af1 + 0.5 * tacc
    return out


def random_eval_case(rng: np.random.Generator, n: int, num_aus: int = 12):
    """A random manifest (partial labels) plus predictions for it."""
    records = []
    for i in range(n):
        has_va, has_expr, has_au = (rng.random(3) < 0.75).tolist()
        if not (has_va or has_expr or has_au):
            has_expr = True
        targets = TargetSet(
            va=tuple(np.round(rng.uniform(-1, 1, 2), 4)) if has_va else None,
            expr=int(rng.integers(0, 7)) if has_expr else None,
            au=tuple(float(b) for b in rng.integers(0, 2, num_aus)) if has_au else None,
        )
        records.append(
            SampleRecord(
                id=f"s{i:05d}",
                image_path=f"images/s{i:05d}.png",
                source="synthetic",
                targets=targets,
                provenance=Provenance(
                    va="gt" if has_va else "absent",
                    expr="gt" if has_expr else "absent",
                    au="gt" if has_au else "absent",
                ),
            )
        )
    manifest = DatasetManifest(records=records, num_aus=num_aus)
    table = PredictionTable(
        ids=[r.id for r in records],
        va=rng.uniform(-1, 1, (n, 2)),
        expr_class=rng.integers(0, 7, n),
        au_prob=rng.random((n, num_aus)),
    )
    return manifest, table
