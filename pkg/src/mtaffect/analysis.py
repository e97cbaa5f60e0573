"""Per-head, per-pyramid-level contribution scores of the linear task heads.

contribution(head, level) = (sum of |weight| over the level's slice of
the concat vector) x (the level's share of pre-pooling spatial area).
The area share is taken from exact stride arithmetic, input_area / s^2
normalized across the four levels, so it is independent of the ceil
rounding at the deepest stage; biases attach to no level and are
excluded. This interpretation is printed in every report header.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np
from torch import nn

from .errors import AnalysisError
from .model import ModelConfig, MultiTaskPyramidNet, PYRAMID_STRIDES

HEAD_NAMES = ("va", "expr", "au")
INTERPRETATION_NOTE = (
    "contribution(head, level) = sum|w| over the level's concat slice x "
    "level area share (input_area / stride^2, normalized); biases excluded"
)


def level_area_fractions(config: ModelConfig) -> np.ndarray:
    """Each level's share of ideal pre-pooling spatial area."""
    h, w = config.input_size
    areas = np.array([(h / s) * (w / s) for s in PYRAMID_STRIDES], dtype=np.float64)
    return areas / areas.sum()


@dataclass
class ContributionReport:
    """Raw and sum-to-1 normalized contribution scores per head and level."""

    scores: dict[str, np.ndarray]
    normalized: dict[str, np.ndarray]
    area_fractions: np.ndarray
    note: str = INTERPRETATION_NOTE


def layer_contribution(model: MultiTaskPyramidNet) -> ContributionReport:
    """Contribution scores from a model's head weights."""
    d = model.config.pyramid_channels
    fractions = level_area_fractions(model.config)
    scores: dict[str, np.ndarray] = {}
    normalized: dict[str, np.ndarray] = {}
    for name in HEAD_NAMES:
        head = getattr(model.heads, name, None)
        if not isinstance(head, nn.Linear) or head.in_features != 4 * d:
            raise AnalysisError(
                f"{name} head is not a single affine map over the 4x{d} concat vector"
            )
        weight = np.abs(head.weight.detach().cpu().numpy())
        raw = np.array(
            [weight[:, level * d : (level + 1) * d].sum() * fractions[level] for level in range(4)]
        )
        total = raw.sum()
        scores[name] = raw
        normalized[name] = raw / total if total > 0 else np.zeros_like(raw)
    return ContributionReport(scores=scores, normalized=normalized, area_fractions=fractions)


def layer_contribution_from_checkpoint(path) -> ContributionReport:
    from .checkpoint import load_checkpoint

    model, _, _ = load_checkpoint(path)
    return layer_contribution(model)


def write_contribution_table(report: ContributionReport, path) -> None:
    """Deterministic CSV: head,level,contribution,normalized."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(f"# {report.note}\n")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["head", "level", "contribution", "normalized"])
        for head in HEAD_NAMES:
            for level in range(4):
                writer.writerow(
                    [
                        head,
                        level,
                        repr(float(report.scores[head][level])),
                        repr(float(report.normalized[head][level])),
                    ]
                )


def plot_contributions(report: ContributionReport, path) -> None:
    """Grouped bar chart of normalized contributions (levels x heads)."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    levels = np.arange(4)
    width = 0.25
    fig, ax = plt.subplots(figsize=(7, 4))
    for k, head in enumerate(HEAD_NAMES):
        ax.bar(levels + (k - 1) * width, report.normalized[head], width, label=head)
    ax.set_xticks(levels)
    ax.set_xticklabels([f"level {i}" for i in levels])
    ax.set_ylabel("normalized contribution")
    ax.set_title("Head feature selection across pyramid levels")
    ax.legend()
    fig.text(0.01, 0.01, report.note, fontsize=6)
    fig.tight_layout(rect=(0, 0.04, 1, 1))
    fig.savefig(path)
    plt.close(fig)
