"""Voxelwise segmentation evaluation: confusion statistics, per-class
precision/recall/accuracy/IoU, threshold-sweep average precision, and
report emission (JSON or CSV).

Undefined (0/0) metrics are reported as NaN markers and excluded from
means, never silently mapped to 0 or 1.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import LabelError, ShapeError
from .volume import LabelVolume


def confusion(pred: LabelVolume, truth: LabelVolume, num_classes: int) -> np.ndarray:
    """C x C count matrix; entry [t][p] = voxels of true class t predicted p."""
    if pred.spatial != truth.spatial:
        raise ShapeError(f"pred extents {pred.spatial} vs truth {truth.spatial}")
    p = pred.data.ravel().astype(np.int64)
    t = truth.data.ravel().astype(np.int64)
    if p.size and (int(p.max()) >= num_classes or int(t.max()) >= num_classes):
        raise LabelError(f"label >= declared class count {num_classes}")
    m = np.bincount(t * num_classes + p, minlength=num_classes * num_classes)
    return m.reshape(num_classes, num_classes)


def class_metrics(m: np.ndarray, c: int) -> tuple[float, float, float, float]:
    """One-vs-rest (precision, recall, accuracy, IoU); 0/0 yields NaN."""
    total = int(m.sum())
    tp = int(m[c, c])
    fp = int(m[:, c].sum()) - tp
    fn = int(m[c, :].sum()) - tp
    tn = total - tp - fp - fn

    def ratio(num, den):
        return num / den if den > 0 else math.nan

    precision = ratio(tp, tp + fp)
    recall = ratio(tp, tp + fn)
    accuracy = ratio(tp + tn, total)
    iou = ratio(tp, tp + fp + fn)
    return precision, recall, accuracy, iou


def dice(pred_mask: np.ndarray, truth_mask: np.ndarray) -> float:
    """Dice overlap of two boolean masks; NaN when both are empty."""
    inter = int(np.logical_and(pred_mask, truth_mask).sum())
    denom = int(pred_mask.sum()) + int(truth_mask.sum())
    return 2.0 * inter / denom if denom > 0 else math.nan


def average_precision(scores: np.ndarray, truth: LabelVolume | np.ndarray, c: int) -> float:
    """Step-integrated AP from a sweep over all distinct score thresholds
    (descending); predictions at threshold t are score >= t. NaN when the
    class has no positive voxels."""
    truth_arr = truth.data if isinstance(truth, LabelVolume) else np.asarray(truth)
    s = np.asarray(scores).ravel()
    pos = (truth_arr.ravel() == c)
    if s.shape != pos.shape:
        raise ShapeError(f"scores {s.shape} misaligned with truth {pos.shape}")
    npos = int(pos.sum())
    if npos == 0:
        return math.nan

    order = np.argsort(-s, kind="stable")
    s_sorted = s[order]
    pos_sorted = pos[order]
    cum_tp = np.cumsum(pos_sorted)
    n = s.size
    # last index of each run of equal scores = the sweep point for that threshold
    boundary = np.flatnonzero(np.diff(s_sorted) != 0)
    idx = np.concatenate([boundary, [n - 1]])
    precision = cum_tp[idx] / (idx + 1)
    recall = cum_tp[idx] / npos
    prev_r = np.concatenate([[0.0], recall[:-1]])
    return float(np.sum((recall - prev_r) * precision))


def mean_average_precision(
    scores_per_class: dict[int, np.ndarray], truth: LabelVolume
) -> float:
    """Mean AP over foreground classes with at least one positive voxel."""
    aps = []
    for c, sc in sorted(scores_per_class.items()):
        if c == 0:
            continue
        ap = average_precision(sc, truth, c)
        if not math.isnan(ap):
            aps.append(ap)
    return float(np.mean(aps)) if aps else math.nan


@dataclass
class ClassReport:
    name: str
    precision: float
    recall: float
    accuracy: float
    iou: float
    ap: float = math.nan


@dataclass
class MetricsReport:
    classes: list[ClassReport] = field(default_factory=list)
    map_score: float = math.nan
    mean_iou: float = math.nan
    voxels: int = 0


def build_report(
    m: np.ndarray,
    class_names: list[str] | None = None,
    scores_per_class: dict[int, np.ndarray] | None = None,
    truth: LabelVolume | None = None,
    include_background: bool = False,
) -> MetricsReport:
    num_classes = m.shape[0]
    names = class_names or [f"class_{c}" for c in range(num_classes)]
    first = 0 if include_background else 1
    rows = []
    for c in range(first, num_classes):
        precision, recall, accuracy, iou = class_metrics(m, c)
        ap = math.nan
        if scores_per_class is not None and truth is not None and c in scores_per_class:
            ap = average_precision(scores_per_class[c], truth, c)
        rows.append(ClassReport(names[c], precision, recall, accuracy, iou, ap))
    ious = [r.iou for r in rows if not math.isnan(r.iou)]
    aps = [r.ap for r in rows if not math.isnan(r.ap)]
    return MetricsReport(
        classes=rows,
        map_score=float(np.mean(aps)) if aps else math.nan,
        mean_iou=float(np.mean(ious)) if ious else math.nan,
        voxels=int(m.sum()),
    )


def _fmt_pct(x: float, decimals: int) -> str:
    return "NA" if math.isnan(x) else f"{100.0 * x:.{decimals}f}"


def emit_report(report: MetricsReport, path, fmt: str = "json", decimals: int = 2) -> None:
    """JSON keeps fractions; CSV renders percentages (columns: class,
    precision, recall, accuracy, iou)."""
    if fmt == "json":
        doc = {
            "classes": [
                {
                    "name": r.name,
                    "precision": None if math.isnan(r.precision) else r.precision,
                    "recall": None if math.isnan(r.recall) else r.recall,
                    "accuracy": None if math.isnan(r.accuracy) else r.accuracy,
                    "iou": None if math.isnan(r.iou) else r.iou,
                    "ap": None if math.isnan(r.ap) else r.ap,
                }
                for r in report.classes
            ],
            "map": None if math.isnan(report.map_score) else report.map_score,
            "mean_iou": None if math.isnan(report.mean_iou) else report.mean_iou,
            "voxels": report.voxels,
        }
        with open(path, "w", encoding="utf-8") as f:
            json.dump(doc, f, indent=2)
            f.write("\n")
    elif fmt == "csv":
        with open(path, "w", newline="", encoding="utf-8") as f:
            writer = csv.writer(f)
            writer.writerow(["class", "precision", "recall", "accuracy", "iou"])
            for r in report.classes:
                writer.writerow(
                    [
                        r.name,
                        _fmt_pct(r.precision, decimals),
                        _fmt_pct(r.recall, decimals),
                        _fmt_pct(r.accuracy, decimals),
                        _fmt_pct(r.iou, decimals),
                    ]
                )
    else:
        raise ValueError(f"unknown report format {fmt!r}")
