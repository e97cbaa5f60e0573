"""Manifest-based dataset handling.

A manifest is a UTF-8 CSV with header
``id,image_path,source,valence,arousal,expr,au_0..au_{K-1},prov_va,prov_expr,prov_au``.
Empty target fields mean the label is missing; provenance is one of
``gt``, ``teacher``, ``absent``. The ``expr`` field holds a class index,
or a ``|``-separated probability vector for teacher-provided soft labels.
Files written here are canonical (repr floats, LF line ends), so
load/save round-trips are byte-identical.
"""

from __future__ import annotations

import csv
import hashlib
import io
import math
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from PIL import Image

from .errors import ManifestError, MergeError, ValidationError
from .losses import TargetSet

NUM_EXPRESSIONS = 7
EXPRESSION_NAMES = (
    "anger", "disgust", "fear", "happiness", "sadness", "surprise", "neutral",
)
SOURCES = ("affwild2-like", "expw-like", "affectnet-like", "synthetic")
PROVENANCE_VALUES = ("gt", "teacher", "absent")

# Synthetic-data latent state: each expression class pins a VA anchor, an
# AU template, and an image color pattern, so the three tasks are
# consistent by construction (e.g. the happiness class activates the
# smile-related AUs).
AU_LABEL_IDS = (1, 2, 4, 6, 7, 10, 12, 15, 23, 24, 25, 26)
_AU_TEMPLATE_SETS = (
    {2, 4, 8, 9},        # anger
    {4, 5, 7},           # disgust
    {0, 1, 2, 10, 11},   # fear
    {3, 6, 10},          # happiness
    {0, 2, 7},           # sadness
    {0, 1, 10, 11},      # surprise
    set(),               # neutral
)
VA_ANCHORS = (
    (-0.8, 0.7),
    (-0.6, 0.35),
    (-0.7, 0.8),
    (0.8, 0.55),
    (-0.75, -0.45),
    (0.35, 0.85),
    (0.0, 0.0),
)
CLASS_COLORS = (
    (220, 40, 40),
    (40, 180, 40),
    (120, 40, 200),
    (240, 200, 40),
    (40, 80, 220),
    (240, 120, 200),
    (128, 128, 128),
)


def au_template(cls_index: int, num_aus: int) -> tuple[float, ...]:
    """Fixed per-class AU bit pattern, tiled when K differs from 12."""
    active = _AU_TEMPLATE_SETS[cls_index]
    return tuple(1.0 if (j % len(AU_LABEL_IDS)) in active else 0.0 for j in range(num_aus))


@dataclass(frozen=True)
class Provenance:
    """Where each task's label came from: gt, teacher, or absent."""

    va: str = "absent"
    expr: str = "absent"
    au: str = "absent"

    def __post_init__(self):
        for task in ("va", "expr", "au"):
            value = getattr(self, task)
            if value not in PROVENANCE_VALUES:
                raise ValidationError(f"bad provenance for {task}: {value!r}")

    def as_tuple(self) -> tuple[str, str, str]:
        return (self.va, self.expr, self.au)


@dataclass(frozen=True)
class SampleRecord:
    """One image with per-task optional labels and their provenance."""

    id: str
    image_path: str
    source: str
    targets: TargetSet
    provenance: Provenance

    def __post_init__(self):
        if self.source not in SOURCES:
            raise ValidationError(f"unknown source {self.source!r}, expected one of {SOURCES}")
        for present, prov, task in zip(
            self.targets.mask, self.provenance.as_tuple(), ("va", "expr", "au")
        ):
            if present == (prov == "absent"):
                raise ValidationError(
                    f"sample {self.id!r}: {task} provenance {prov!r} inconsistent with "
                    f"label presence {present}"
                )


@dataclass
class DatasetManifest:
    """Ordered sample records plus their task coverage and class histogram."""

    records: list[SampleRecord]
    num_aus: int = 12
    num_expressions: int = NUM_EXPRESSIONS
    root: Path | None = None

    def __len__(self) -> int:
        return len(self.records)

    @property
    def coverage(self) -> tuple[int, int, int]:
        """(VA, EXPR, AU) labeled-sample counts."""
        va = expr = au = 0
        for r in self.records:
            m = r.targets.mask
            va += m[0]
            expr += m[1]
            au += m[2]
        return (va, expr, au)

    @property
    def class_histogram(self) -> np.ndarray:
        """Expression counts over labeled records (soft labels by argmax)."""
        counts = np.zeros(self.num_expressions, dtype=np.int64)
        for r in self.records:
            if r.targets.expr is not None:
                e = r.targets.expr
                counts[int(e) if isinstance(e, int) else int(np.argmax(e))] += 1
        return counts

    def resolve_image_path(self, record: SampleRecord) -> Path:
        p = Path(record.image_path)
        if p.is_absolute() or self.root is None:
            return p
        return self.root / p

    def task_indices(self, task: str) -> list[int]:
        """Indices of records that carry the given task's label."""
        pos = {"va": 0, "expr": 1, "au": 2}[task]
        return [i for i, r in enumerate(self.records) if r.targets.mask[pos]]


def manifest_header(num_aus: int) -> list[str]:
    return (
        ["id", "image_path", "source", "valence", "arousal", "expr"]
        + [f"au_{j}" for j in range(num_aus)]
        + ["prov_va", "prov_expr", "prov_au"]
    )


def _format_expr(expr) -> str:
    if expr is None:
        return ""
    if isinstance(expr, int):
        return str(expr)
    return "|".join(repr(p) for p in expr)


def _record_row(record: SampleRecord, num_aus: int) -> list[str]:
    t = record.targets
    va = ("", "") if t.va is None else (repr(t.va[0]), repr(t.va[1]))
    au = [""] * num_aus if t.au is None else [repr(v) for v in t.au]
    return (
        [record.id, record.image_path, record.source, va[0], va[1], _format_expr(t.expr)]
        + au
        + list(record.provenance.as_tuple())
    )


def manifest_to_text(manifest: DatasetManifest) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(manifest_header(manifest.num_aus))
    for record in manifest.records:
        writer.writerow(_record_row(record, manifest.num_aus))
    return buf.getvalue()


def _rebased(manifest: DatasetManifest, target_dir: Path) -> DatasetManifest:
    """Re-express relative image paths against a new manifest directory."""
    if manifest.root is None or manifest.root.resolve() == target_dir.resolve():
        return manifest
    records = []
    for r in manifest.records:
        p = Path(r.image_path)
        if not p.is_absolute():
            rel = os.path.relpath((manifest.root / p).resolve(), target_dir.resolve())
            if rel != r.image_path:
                r = SampleRecord(
                    id=r.id, image_path=rel, source=r.source,
                    targets=r.targets, provenance=r.provenance,
                )
        records.append(r)
    return DatasetManifest(
        records=records, num_aus=manifest.num_aus,
        num_expressions=manifest.num_expressions, root=target_dir,
    )


def save_manifest(manifest: DatasetManifest, path) -> Path:
    """Write the manifest; image references stay valid from the new location."""
    path = Path(path)
    path.write_text(manifest_to_text(_rebased(manifest, path.parent)), encoding="utf-8")
    return path


def manifest_digest(manifest: DatasetManifest) -> str:
    return hashlib.sha256(manifest_to_text(manifest).encode("utf-8")).hexdigest()


def _parse_optional_float(raw: str, lo: float, hi: float, what: str) -> float | None:
    if raw == "":
        return None
    value = float(raw)
    if not math.isfinite(value) or not (lo <= value <= hi):
        raise ValueError(f"{what} {value} out of [{lo}, {hi}]")
    return value


def _parse_expr(raw: str, num_expressions: int):
    if raw == "":
        return None
    if "|" in raw:
        probs = tuple(float(p) for p in raw.split("|"))
        if len(probs) != num_expressions:
            raise ValueError(f"soft expr has {len(probs)} entries, expected {num_expressions}")
        return probs
    cls = int(raw)
    if not 0 <= cls < num_expressions:
        raise ValueError(f"expr class {cls} out of [0, {num_expressions})")
    return cls


def load_manifest(path) -> DatasetManifest:
    """Parse and validate a manifest file; errors carry the row number."""
    path = Path(path)
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ManifestError(f"empty manifest: {path}") from None
        num_aus = len(header) - 9
        if num_aus < 1 or header != manifest_header(num_aus):
            raise ManifestError(f"bad manifest header: {header}")

        records: list[SampleRecord] = []
        seen: set[str] = set()
        for row_no, row in enumerate(reader, start=2):
            if len(row) != len(header):
                raise ManifestError(f"expected {len(header)} fields, got {len(row)}", row=row_no)
            try:
                sid, image_path, source = row[0], row[1], row[2]
                if sid in seen:
                    raise ValueError(f"duplicate sample id {sid!r}")
                seen.add(sid)
                valence = _parse_optional_float(row[3], -1.0, 1.0, "valence")
                arousal = _parse_optional_float(row[4], -1.0, 1.0, "arousal")
                if (valence is None) != (arousal is None):
                    raise ValueError("valence and arousal must be both present or both empty")
                expr = _parse_expr(row[5], NUM_EXPRESSIONS)
                au_raw = row[6 : 6 + num_aus]
                if all(v == "" for v in au_raw):
                    au = None
                elif any(v == "" for v in au_raw):
                    raise ValueError("AU fields must be all present or all empty")
                else:
                    au = tuple(
                        _parse_optional_float(v, 0.0, 1.0, f"au_{j}")
                        for j, v in enumerate(au_raw)
                    )
                targets = TargetSet(
                    va=None if valence is None else (valence, arousal),
                    expr=expr,
                    au=au,
                )
                provenance = Provenance(va=row[-3], expr=row[-2], au=row[-1])
                records.append(
                    SampleRecord(
                        id=sid,
                        image_path=image_path,
                        source=source,
                        targets=targets,
                        provenance=provenance,
                    )
                )
            except (ValueError, ValidationError) as exc:
                raise ManifestError(str(exc), row=row_no) from None
    return DatasetManifest(records=records, num_aus=num_aus, root=path.parent)


def merge_datasets(
    manifests: Sequence[DatasetManifest], prefix_with_source: bool = False
) -> DatasetManifest:
    """Concatenate manifests in order, without re-sampling or deduplication.

    Ids must be disjoint (optionally enforced by prefixing each record's
    id with its source tag); a collision raises MergeError.
    """
    if not manifests:
        raise ValidationError("nothing to merge")
    num_aus = manifests[0].num_aus
    for m in manifests[1:]:
        if m.num_aus != num_aus:
            raise ValidationError(f"AU label counts differ: {m.num_aus} vs {num_aus}")

    roots = {str(m.root) for m in manifests}
    common_root = manifests[0].root if len(roots) == 1 else None

    merged: list[SampleRecord] = []
    seen: set[str] = set()
    for m in manifests:
        for r in m.records:
            sid = f"{r.source}/{r.id}" if prefix_with_source else r.id
            if sid in seen:
                raise MergeError(f"sample id collision: {sid!r}")
            seen.add(sid)
            image_path = r.image_path
            if common_root is None:
                image_path = str(m.resolve_image_path(r))
            if sid != r.id or image_path != r.image_path:
                r = SampleRecord(
                    id=sid,
                    image_path=image_path,
                    source=r.source,
                    targets=r.targets,
                    provenance=r.provenance,
                )
            merged.append(r)
    return DatasetManifest(records=merged, num_aus=num_aus, root=common_root)


def expression_distribution(manifest: DatasetManifest) -> tuple[np.ndarray, np.ndarray]:
    """(counts, proportions) over the expression classes of labeled records."""
    counts = manifest.class_histogram
    total = counts.sum()
    proportions = counts / total if total > 0 else np.zeros_like(counts, dtype=np.float64)
    return counts, proportions


def write_distribution_table(counts: np.ndarray, proportions: np.ndarray, path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["class", "name", "count", "proportion"])
        for c, (n, p) in enumerate(zip(counts, proportions)):
            writer.writerow([c, EXPRESSION_NAMES[c], int(n), repr(float(p))])


def plot_distribution(counts: np.ndarray, path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(7, 4))
    ax.bar(range(len(counts)), counts, color="#4878a8")
    ax.set_xticks(range(len(counts)))
    ax.set_xticklabels(EXPRESSION_NAMES[: len(counts)], rotation=30, ha="right")
    ax.set_ylabel("samples")
    ax.set_title("Expression class distribution")
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def subsample_indices(n: int, fraction: float, seed: int, epoch_index: int) -> np.ndarray:
    """floor(fraction*n) distinct indices, deterministic per (seed, epoch)."""
    if n < 1:
        raise ValidationError("cannot subsample an empty dataset")
    if not 0 < fraction <= 1:
        raise ValidationError(f"fraction must be in (0, 1], got {fraction}")
    if seed < 0 or epoch_index < 0:
        raise ValidationError("seed and epoch_index must be non-negative")
    k = int(math.floor(fraction * n))
    rng = np.random.default_rng([seed, epoch_index])
    return rng.permutation(n)[:k]


def subsample_epoch(
    manifest: DatasetManifest, fraction: float = 0.25, seed: int = 0, epoch_index: int = 0
) -> np.ndarray:
    """Per-epoch without-replacement draw over the manifest's records."""
    return subsample_indices(len(manifest.records), fraction, seed, epoch_index)


def _synthetic_image(
    cls: int, height: int, width: int, noise: float, rng_noise: np.random.Generator
) -> np.ndarray:
    img = np.empty((height, width, 3), dtype=np.float64)
    img[:, :] = CLASS_COLORS[cls]
    patch = max(2, height // 4)
    r0 = round(cls * (height - patch) / 6)
    c0 = round((6 - cls) * (width - patch) / 6)
    img[r0 : r0 + patch, c0 : c0 + patch] = [255 - v for v in CLASS_COLORS[cls]]
    if noise > 0:
        img = img + rng_noise.normal(0.0, noise * 64.0, size=img.shape)
    return np.clip(np.rint(img), 0, 255).astype(np.uint8)


def generate_synthetic(
    out_dir,
    num_samples: int,
    image_size: tuple[int, int] = (32, 32),
    noise: float = 0.0,
    seed: int = 0,
    mask_rate: float = 0.0,
    num_aus: int = 12,
) -> tuple[DatasetManifest, Path]:
    """Write a synthetic dataset (images + manifest) whose labels are
    consistent across tasks.

    Sample i gets latent class i mod 7, which fixes its image pattern, VA
    anchor, and AU template. ``mask_rate`` independently hides each task's
    label (provenance ``absent``) to exercise the label-completion
    pipeline. Fully deterministic for a given argument set.
    """
    if num_samples < 1:
        raise ValidationError("num_samples must be >= 1")
    if not 0 <= mask_rate < 1:
        raise ValidationError(f"mask_rate must be in [0, 1), got {mask_rate}")
    height, width = int(image_size[0]), int(image_size[1])
    out_dir = Path(out_dir)
    images_dir = out_dir / "images"
    images_dir.mkdir(parents=True, exist_ok=True)

    rng_noise = np.random.default_rng([seed, 1])
    rng_mask = np.random.default_rng([seed, 2])

    records: list[SampleRecord] = []
    for i in range(num_samples):
        cls = i % NUM_EXPRESSIONS
        name = f"syn-{i:06d}.png"
        arr = _synthetic_image(cls, height, width, noise, rng_noise)
        Image.fromarray(arr, mode="RGB").save(images_dir / name)

        drop = rng_mask.random(3) < mask_rate
        targets = TargetSet(
            va=None if drop[0] else VA_ANCHORS[cls],
            expr=None if drop[1] else cls,
            au=None if drop[2] else au_template(cls, num_aus),
        )
        provenance = Provenance(
            va="absent" if drop[0] else "gt",
            expr="absent" if drop[1] else "gt",
            au="absent" if drop[2] else "gt",
        )
        records.append(
            SampleRecord(
                id=f"syn-{i:06d}",
                image_path=f"images/{name}",
                source="synthetic",
                targets=targets,
                provenance=provenance,
            )
        )

    manifest = DatasetManifest(records=records, num_aus=num_aus, root=out_dir)
    manifest_path = save_manifest(manifest, out_dir / "manifest.csv")
    return manifest, manifest_path


def load_image(path, size: tuple[int, int] | None = None) -> np.ndarray:
    """Decode an image file to a (3, H, W) float32 array in [0, 1]."""
    with Image.open(path) as img:
        img = img.convert("RGB")
        if size is not None and img.size != (size[1], size[0]):
            img = img.resize((size[1], size[0]), Image.BILINEAR)
        arr = np.asarray(img, dtype=np.float32) / 255.0
    return arr.transpose(2, 0, 1)


class ImageCache:
    """In-memory decoded-image cache for desk-scale training loops."""

    def __init__(self, manifest: DatasetManifest, input_size: tuple[int, int]):
        self.manifest = manifest
        self.input_size = input_size
        self._cache: dict[int, np.ndarray] = {}

    def get(self, index: int) -> np.ndarray:
        arr = self._cache.get(index)
        if arr is None:
            path = self.manifest.resolve_image_path(self.manifest.records[index])
            arr = load_image(path, self.input_size)
            self._cache[index] = arr
        return arr

    def batch(self, indices: Iterable[int]) -> np.ndarray:
        return np.stack([self.get(int(i)) for i in indices], axis=0)
