"""Per-pathology AUROC, baseline comparison and report rendering."""

import csv
import io
from dataclasses import dataclass
from typing import NamedTuple, Optional

import numpy as np

from . import kernels
from .data import PATHOLOGIES
from .errors import UndefinedAUROCError, ShapeError


class BaselineRow(NamedTuple):
    pathology: str
    chexnet_auroc: float
    ourmodel_auroc: float


# Published AUROCs, CheXNet vs the fused model, in canonical class order.
BASELINE_TABLE = (
    BaselineRow("Atelectasis", 0.8094, 0.8328),
    BaselineRow("Cardiomegaly", 0.9248, 0.9012),
    BaselineRow("Consolidation", 0.7901, 0.8155),
    BaselineRow("Edema", 0.8878, 0.9138),
    BaselineRow("Effusion", 0.8638, 0.8911),
    BaselineRow("Emphysema", 0.9371, 0.9271),
    BaselineRow("Fibrosis", 0.8047, 0.8221),
    BaselineRow("Hernia", 0.9164, 0.9733),
    BaselineRow("Infiltration", 0.7345, 0.7205),
    BaselineRow("Mass", 0.8676, 0.8814),
    BaselineRow("Nodule", 0.7802, 0.8175),
    BaselineRow("Pleural Thickening", 0.8062, 0.8110),
    BaselineRow("Pneumonia", 0.768, 0.7665),
    BaselineRow("Pneumothorax", 0.8887, 0.9145),
)

CSV_HEADER = ("pathology", "auroc", "chexnet_paper", "ourmodel_paper", "delta_chexnet", "delta_ourmodel")


@dataclass(frozen=True)
class ScoredSet:
    scores: np.ndarray
    labels: np.ndarray
    pathology: str = ""

    def auroc(self):
        return auroc(self.scores, self.labels)


def auroc(scores, labels):
    """Mann-Whitney AUROC from tie-averaged rank sums, O(n log n).

    Equals the fraction of (positive, negative) pairs ordered correctly,
    with tied pairs counting one half.
    """
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel()
    if scores.shape != labels.shape:
        raise ShapeError(f"{scores.size} scores but {labels.size} labels")
    if not np.all(np.isfinite(scores)):
        raise ValueError("scores must be finite")
    pos = labels > 0.5
    n_pos = int(pos.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedAUROCError(f"AUROC needs both classes, got {n_pos} positives and {n_neg} negatives")
    ranks = kernels.average_ranks(scores)
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


@dataclass
class EvalReport:
    split: str
    auroc: list  # one entry per pathology; None where undefined
    n_pos: list
    n_neg: list

    @property
    def undefined(self):
        return [PATHOLOGIES[i] for i, a in enumerate(self.auroc) if a is None]

    @property
    def mean(self) -> Optional[float]:
        defined = [a for a in self.auroc if a is not None]
        return float(np.mean(defined)) if defined else None


def evaluate_scores(probs, labels, split_name="test"):
    probs = np.asarray(probs)
    labels = np.asarray(labels)
    if probs.shape != labels.shape or probs.ndim != 2 or probs.shape[1] != len(PATHOLOGIES):
        raise ShapeError(f"expected (N, {len(PATHOLOGIES)}) scores and labels, got {probs.shape}, {labels.shape}")
    aurocs, n_pos, n_neg = [], [], []
    for c in range(len(PATHOLOGIES)):
        pos = int((labels[:, c] > 0.5).sum())
        n_pos.append(pos)
        n_neg.append(labels.shape[0] - pos)
        try:
            aurocs.append(auroc(probs[:, c], labels[:, c]))
        except UndefinedAUROCError:
            aurocs.append(None)
    return EvalReport(split_name, aurocs, n_pos, n_neg)


def evaluate_model(model, dataset, split_name="test", batch_size=64):
    """Run eval-mode inference over ``dataset`` and score every pathology."""
    probs = model.predict_proba(dataset.images, dataset.meta, batch_size)
    return evaluate_scores(probs, dataset.labels, split_name)


class ComparisonRow(NamedTuple):
    pathology: str
    auroc: Optional[float]
    chexnet_paper: float
    ourmodel_paper: float
    delta_chexnet: Optional[float]
    delta_ourmodel: Optional[float]


def compare_baseline(report):
    rows = []
    for name, ours, base in zip(PATHOLOGIES, report.auroc, BASELINE_TABLE):
        assert base.pathology == name
        if ours is None:
            rows.append(ComparisonRow(name, None, base.chexnet_auroc, base.ourmodel_auroc, None, None))
        else:
            rows.append(
                ComparisonRow(
                    name, ours, base.chexnet_auroc, base.ourmodel_auroc,
                    ours - base.chexnet_auroc, ours - base.ourmodel_auroc,
                )
            )
    return rows


def _mean_row(comparison):
    defined = [r for r in comparison if r.auroc is not None]
    if not defined:
        return ComparisonRow("mean", None, None, None, None, None)
    ours = float(np.mean([r.auroc for r in defined]))
    chex = float(np.mean([r.chexnet_paper for r in defined]))
    mine = float(np.mean([r.ourmodel_paper for r in defined]))
    return ComparisonRow("mean", ours, chex, mine, ours - chex, ours - mine)


def _fmt(x, signed=False):
    if x is None:
        return "n/a"
    return f"{x:+.4f}" if signed else f"{x:.4f}"


def render_report(report, comparison=None, fmt="text"):
    """Render 14 pathology rows plus a mean row as text or CSV.

    The mean row averages only the classes with a defined AUROC, for the
    published reference columns as well, so the deltas compare like with like.
    """
    comparison = comparison if comparison is not None else compare_baseline(report)
    rows = list(comparison) + [_mean_row(comparison)]
    if fmt == "csv":
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(CSV_HEADER)
        for r in rows:
            writer.writerow([r.pathology] + [_fmt(v) for v in r[1:4]] + [_fmt(v, True) for v in r[4:]])
        return buf.getvalue()
    if fmt != "text":
        raise ValueError(f"unknown report format {fmt!r}")
    width = max(len(p) for p in PATHOLOGIES)
    lines = [
        f"{'Pathology':<{width}}  {'AUROC':>7}  {'CheXNet':>7}  {'OurModel':>8}  {'dCheXNet':>8}  {'dOurModel':>9}"
    ]
    for r in rows:
        lines.append(
            f"{r.pathology:<{width}}  {_fmt(r.auroc):>7}  {_fmt(r.chexnet_paper):>7}  {_fmt(r.ourmodel_paper):>8}"
            f"  {_fmt(r.delta_chexnet, True):>8}  {_fmt(r.delta_ourmodel, True):>9}"
        )
    return "\n".join(lines) + "\n"
