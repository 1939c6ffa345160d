"""Detection metrics (Image-AUC, Pixel-AUC, PRO, AP), Q&A accuracy
aggregation and the evaluation report."""
from __future__ import annotations

import csv
import json
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np
from scipy import stats

from .errors import InputError, UndefinedMetricError
from .wafersynth import connected_regions

DETECTION_METRICS = ("image_auc", "pixel_auc", "pro", "ap")
QA_GROUPS = ("presence", "category", "location", "quantity", "description", "analysis", "unrelated")


def _as_binary(labels) -> np.ndarray:
    y = np.asarray(labels).ravel()
    if not np.isin(y, (0, 1)).all():
        raise InputError("labels must be 0/1")
    return y.astype(bool)


def _u_statistic(scores, labels) -> float:
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = _as_binary(labels)
    if s.shape != y.shape:
        raise InputError(f"{s.size} scores for {y.size} labels")
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUC needs both positive and negative examples")
    ranks = stats.rankdata(s)  # average ranks give ties half credit
    return float((ranks[y].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def image_auc(scores, labels) -> float:
    """P(score_pos > score_neg) + 0.5 P(tie)."""
    return _u_statistic(scores, labels)


def pixel_auc(anomaly_maps, masks) -> float:
    """The same U statistic pooled over every pixel of every map."""
    maps = np.asarray(anomaly_maps, dtype=np.float64)
    gt = np.asarray(masks)
    if maps.shape != gt.shape:
        raise InputError(f"maps {maps.shape} and masks {gt.shape} differ in shape")
    return _u_statistic(maps, gt)


def image_scores(anomaly_maps) -> np.ndarray:
    maps = np.asarray(anomaly_maps, dtype=np.float64)
    return maps.reshape(maps.shape[0], -1).max(axis=1)


def _sweep(scores: np.ndarray):
    """Descending order and the index of the last element of each tied block."""
    order = np.argsort(-scores, kind="stable")
    s = scores[order]
    ends = np.flatnonzero(np.r_[s[1:] != s[:-1], True])
    return order, ends


def pro_curve(anomaly_maps, masks) -> tuple[np.ndarray, np.ndarray]:
    """(fpr, mean region overlap) at every distinct threshold, preceded by (0, 0)."""
    maps = np.asarray(anomaly_maps, dtype=np.float64)
    gt = np.asarray(masks)
    if maps.shape != gt.shape:
        raise InputError(f"maps {maps.shape} and masks {gt.shape} differ in shape")
    if maps.ndim == 2:
        maps, gt = maps[None], gt[None]
    weights = np.zeros(maps.shape, dtype=np.float64)
    sizes = []
    region_maps = []
    for i in range(gt.shape[0]):
        lab, n = connected_regions(gt[i])
        region_maps.append((lab, n))
        sizes += [int((lab == k).sum()) for k in range(1, n + 1)]
    n_regions = len(sizes)
    if n_regions == 0:
        raise UndefinedMetricError("PRO needs at least one defect region")
    offset = 0
    for i, (lab, n) in enumerate(region_maps):
        for k in range(1, n + 1):
            weights[i][lab == k] = 1.0 / (n_regions * sizes[offset + k - 1])
        offset += n
    normal = gt == 0
    n_neg = int(normal.sum())
    if n_neg == 0:
        raise UndefinedMetricError("PRO needs normal pixels for the false-positive rate")
    order, ends = _sweep(maps.ravel())
    overlap = np.cumsum(weights.ravel()[order])[ends]
    fpr = np.cumsum(normal.ravel()[order])[ends] / n_neg
    return np.r_[0.0, fpr], np.r_[0.0, overlap]


def pro(anomaly_maps, masks, fpr_limit: float = 0.3) -> float:
    """Area under the PRO curve up to ``fpr_limit``, divided by ``fpr_limit``.

    Trapezoids are taken between sweep points with FPR <= limit; from the last
    such point the overlap is held constant up to the limit."""
    if not 0 < fpr_limit <= 1:
        raise InputError("fpr_limit must lie in (0, 1]")
    fpr, overlap = pro_curve(anomaly_maps, masks)
    keep = fpr <= fpr_limit
    x, y = fpr[keep], overlap[keep]
    area = float(np.sum((x[1:] - x[:-1]) * (y[1:] + y[:-1]) / 2.0))
    area += (fpr_limit - x[-1]) * y[-1]
    return float(np.clip(area / fpr_limit, 0.0, 1.0))


def average_precision(anomaly_maps, masks) -> float:
    """Sum over distinct descending thresholds of (recall step) * precision."""
    s = np.asarray(anomaly_maps, dtype=np.float64).ravel()
    y = _as_binary(masks)
    if s.shape != y.shape:
        raise InputError("maps and masks differ in size")
    n_pos = int(y.sum())
    if n_pos == 0:
        raise UndefinedMetricError("AP needs at least one positive pixel")
    order, ends = _sweep(s)
    tp = np.cumsum(y[order])[ends]
    precision = tp / (ends + 1.0)
    recall = tp / n_pos
    return float(np.sum(np.diff(np.r_[0.0, recall]) * precision))


def detection_metrics(anomaly_maps, masks, fpr_limit: float = 0.3) -> dict[str, float]:
    maps = np.asarray(anomaly_maps, dtype=np.float64)
    gt = np.asarray(masks)
    img_labels = gt.reshape(gt.shape[0], -1).max(axis=1) > 0
    return {
        "image_auc": image_auc(image_scores(maps), img_labels.astype(int)),
        "pixel_auc": pixel_auc(maps, gt),
        "pro": pro(maps, gt, fpr_limit),
        "ap": average_precision(maps, gt),
    }


def per_class_detection(anomaly_maps, masks, labels, classes: Iterable[str], normal: str = "good"):
    """Each defect class is scored against the normal test images; the
    average row is the unweighted mean over classes."""
    maps = np.asarray(anomaly_maps)
    gt = np.asarray(masks)
    labels = np.asarray(labels)
    per_class = {}
    for c in classes:
        sel = (labels == c) | (labels == normal)
        if not (labels == c).any():
            continue
        per_class[c] = detection_metrics(maps[sel], gt[sel])
    if not per_class:
        raise UndefinedMetricError("no defect classes in the evaluation set")
    average = {m: float(np.mean([v[m] for v in per_class.values()])) for m in DETECTION_METRICS}
    return per_class, average


def qa_accuracy(results: Iterable[tuple[str, bool]], groups: Iterable[str] = QA_GROUPS) -> dict[str, float | None]:
    """Percent correct per group; ``overall`` is the unweighted mean of the
    non-empty groups. Empty groups map to None and raise a warning."""
    groups = list(groups)
    tally = {g: [0, 0] for g in groups}
    for group, ok in results:
        if group not in tally:
            raise InputError(f"unknown Q&A group {group!r}")
        tally[group][0] += bool(ok)
        tally[group][1] += 1
    out: dict[str, float | None] = {}
    for g, (right, n) in tally.items():
        if n == 0:
            warnings.warn(f"Q&A group {g!r} is empty and is left out of the overall score")
            out[g] = None
        else:
            out[g] = 100.0 * right / n
    filled = [v for v in out.values() if v is not None]
    out["overall"] = float(np.mean(filled)) if filled else None
    return out


@dataclass
class EvalReport:
    per_class: dict[str, dict[str, float]]
    average: dict[str, float]
    qa: dict[str, float | None] = field(default_factory=dict)
    pm_accuracy: float | None = None
    qa_details: list[dict] = field(default_factory=list)
    config: dict = field(default_factory=dict)
    checkpoint_id: str = ""
    timestamp: str = ""
    notes: dict[str, str] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    def comparable(self) -> dict:
        d = self.to_dict()
        d.pop("timestamp")
        return d

    def write_json(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    def write_csv(self, path: str | Path) -> None:
        """Detection rows (class, Image-AUC, Pixel-AUC, PRO, AP) then the Q&A rows."""
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["section", "name", *DETECTION_METRICS, "accuracy"])
            for c, vals in self.per_class.items():
                w.writerow(["detection", c, *(f"{vals[m]:.6f}" for m in DETECTION_METRICS), ""])
            w.writerow(["detection", "average", *(f"{self.average[m]:.6f}" for m in DETECTION_METRICS), ""])
            for g, v in self.qa.items():
                w.writerow(["qa", g, "", "", "", "", "" if v is None else f"{v:.2f}"])
            if self.pm_accuracy is not None:
                w.writerow(["pm", "accuracy", "", "", "", "", f"{self.pm_accuracy:.6f}"])
