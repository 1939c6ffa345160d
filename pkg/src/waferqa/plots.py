"""Report figures: anomaly heatmap grids, ROC and PRO curves, Q&A bars.

Everything renders off-screen (Agg) straight to files."""
from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .metrics import image_scores, pro_curve  # noqa: E402

GOLDEN = (np.sqrt(5.0) - 1.0) / 2.0

STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 9,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "savefig.dpi": 150,
}


def figsize(width: float = 6.0, ratio: float = GOLDEN) -> tuple[float, float]:
    return width, width * ratio


def _save(fig, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, bbox_inches="tight")
    plt.close(fig)
    return path


def heatmap_grid(images: Sequence[np.ndarray], maps: Sequence[np.ndarray], masks: Sequence[np.ndarray],
                 titles: Sequence[str], path: str | Path) -> Path:
    """One column per sample: image, anomaly map over the image, ground truth."""
    n = len(images)
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(3, n, figsize=(1.3 * n + 0.4, 4.2), squeeze=False)
        for j in range(n):
            axes[0, j].imshow(images[j], cmap="gray", vmin=0, vmax=1)
            axes[1, j].imshow(images[j], cmap="gray", vmin=0, vmax=1)
            im = axes[1, j].imshow(maps[j], cmap="jet", alpha=0.5, vmin=0, vmax=1)
            axes[2, j].imshow(masks[j], cmap="gray", vmin=0, vmax=1)
            axes[0, j].set_title(titles[j])
        for ax in axes.ravel():
            ax.set_xticks([])
            ax.set_yticks([])
        for i, name in enumerate(("image", "anomaly map", "ground truth")):
            axes[i, 0].set_ylabel(name)
        fig.colorbar(im, ax=axes[1, :].tolist(), fraction=0.02, pad=0.01)
        return _save(fig, path)


def roc_points(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels).astype(bool)
    order = np.argsort(-s, kind="stable")
    s, y = s[order], y[order]
    ends = np.flatnonzero(np.r_[s[1:] != s[:-1], True])
    tpr = np.cumsum(y)[ends] / max(y.sum(), 1)
    fpr = np.cumsum(~y)[ends] / max((~y).sum(), 1)
    return np.r_[0.0, fpr], np.r_[0.0, tpr]


def roc_figure(maps: np.ndarray, masks: np.ndarray, labels: Sequence[str], classes: Sequence[str],
               path: str | Path, normal: str = "good") -> Path:
    """Image-level ROC per defect class (max of the anomaly map as score)."""
    labels = np.asarray(labels)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=figsize(4.0, 0.9))
        for c in classes:
            sel = (labels == c) | (labels == normal)
            if not (labels == c).any():
                continue
            fpr, tpr = roc_points(image_scores(maps[sel]), labels[sel] == c)
            ax.plot(fpr, tpr, label=c.replace("_", " "))
        ax.plot([0, 1], [0, 1], color="0.6", lw=0.8, ls="--")
        ax.set_xlabel("false positive rate")
        ax.set_ylabel("true positive rate")
        ax.legend(loc="lower right", frameon=False)
        return _save(fig, path)


def pro_figure(maps: np.ndarray, masks: np.ndarray, labels: Sequence[str], classes: Sequence[str],
               path: str | Path, fpr_limit: float = 0.3, normal: str = "good") -> Path:
    labels = np.asarray(labels)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=figsize(4.0, 0.9))
        for c in classes:
            sel = (labels == c) | (labels == normal)
            if not (labels == c).any():
                continue
            fpr, overlap = pro_curve(maps[sel], masks[sel])
            keep = fpr <= fpr_limit
            ax.plot(fpr[keep], overlap[keep], label=c.replace("_", " "))
        ax.set_xlim(0, fpr_limit)
        ax.set_ylim(0, 1)
        ax.set_xlabel("false positive rate")
        ax.set_ylabel("per-region overlap")
        ax.legend(loc="lower right", frameon=False)
        return _save(fig, path)


def qa_figure(qa: dict, path: str | Path) -> Path:
    groups = [g for g in qa if g != "overall"]
    vals = [np.nan if qa[g] is None else qa[g] for g in groups]
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=figsize(5.0, 0.5))
        ax.bar(range(len(groups)), vals, color="tab:blue")
        ax.set_xticks(range(len(groups)))
        ax.set_xticklabels(groups, rotation=30, ha="right")
        ax.set_ylim(0, 100)
        ax.set_ylabel("accuracy (%)")
        if qa.get("overall") is not None:
            ax.axhline(qa["overall"], color="0.3", lw=0.8, ls="--")
        return _save(fig, path)


def report_figures(out_dir: str | Path, samples, maps: np.ndarray, qa: dict | None,
                   classes: Sequence[str], per_class: int = 2) -> list[Path]:
    """Write the standard report figures next to the CSV and return their paths."""
    out = Path(out_dir)
    masks = np.stack([s.mask for s in samples])
    labels = [s.label for s in samples]
    picks = []
    for c in ("good", *classes):
        picks += [i for i, s in enumerate(samples) if s.label == c][:per_class]
    paths = [
        heatmap_grid([samples[i].image for i in picks], [maps[i] for i in picks], [masks[i] for i in picks],
                     [labels[i].replace("pattern_deformation", "deform.") for i in picks], out / "heatmaps.png"),
        roc_figure(maps, masks, labels, classes, out / "roc.png"),
        pro_figure(maps, masks, labels, classes, out / "pro.png"),
    ]
    if qa:
        paths.append(qa_figure(qa, out / "qa_accuracy.png"))
    return paths
