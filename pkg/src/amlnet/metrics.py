"""Confusion-matrix segmentation metrics."""
from __future__ import annotations

import csv
from typing import Iterable, Optional

import numpy as np


class ConfusionMatrix:
    """Rows index ground truth, columns index prediction."""

    def __init__(self, num_classes: int, counts: Optional[np.ndarray] = None):
        self.num_classes = num_classes
        if counts is None:
            counts = np.zeros((num_classes, num_classes), dtype=np.int64)
        self.counts = counts

    def accumulate(self, pred, gt) -> "ConfusionMatrix":
        pred = np.asarray(pred)
        gt = np.asarray(gt)
        if pred.shape != gt.shape:
            raise ValueError(f"prediction shape {pred.shape} != ground truth shape {gt.shape}")
        k = self.num_classes
        for name, arr in (("prediction", pred), ("ground truth", gt)):
            bad = (arr < 0) | (arr >= k)
            if bad.any():
                idx = tuple(int(i) for i in np.argwhere(bad)[0])
                raise ValueError(f"{name} label {arr[idx]} at {idx} outside [0, {k})")
        idx = k * gt.astype(np.int64).ravel() + pred.astype(np.int64).ravel()
        self.counts += np.bincount(idx, minlength=k * k).reshape(k, k)
        return self

    def merge(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        return ConfusionMatrix(self.num_classes, self.counts + other.counts)

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def _tp_fp_fn(self, c: int) -> tuple[int, int, int]:
        tp = int(self.counts[c, c])
        fp = int(self.counts[:, c].sum()) - tp
        fn = int(self.counts[c, :].sum()) - tp
        return tp, fp, fn

    def present(self, c: int) -> bool:
        return sum(self._tp_fp_fn(c)) > 0

    def iou(self, c: int) -> float:
        tp, fp, fn = self._tp_fp_fn(c)
        denom = tp + fp + fn
        return 1.0 if denom == 0 else tp / denom

    def mean_iou(self) -> float:
        """Mean IoU over classes that occur in either the ground truth or the prediction."""
        vals = [self.iou(c) for c in range(self.num_classes) if self.present(c)]
        return float(np.mean(vals)) if vals else 1.0

    def precision(self, c: int) -> Optional[float]:
        tp, fp, _ = self._tp_fp_fn(c)
        return None if tp + fp == 0 else tp / (tp + fp)

    def recall(self, c: int) -> Optional[float]:
        tp, _, fn = self._tp_fp_fn(c)
        return None if tp + fn == 0 else tp / (tp + fn)

    def pixel_accuracy(self) -> float:
        return float(np.trace(self.counts) / max(self.total, 1))


def _fmt(x: Optional[float]) -> str:
    return "n/a" if x is None else f"{x:.6f}"


def metric_rows(cms: Iterable[ConfusionMatrix], class_names: Optional[list] = None) -> list:
    """Per-class IoU mean/std across runs plus pooled precision and recall.

    The last row (``class == "mean"``) aggregates per-run mean IoU.
    Standard deviations are population (ddof=0).
    """
    cms = list(cms)
    k = cms[0].num_classes
    names = class_names or [str(c) for c in range(k)]
    pooled = ConfusionMatrix(k)
    for cm in cms:
        pooled = pooled.merge(cm)
    rows = []
    for c in range(k):
        ious = np.array([cm.iou(c) for cm in cms])
        rows.append({
            "class": names[c],
            "iou_mean": f"{ious.mean():.6f}",
            "iou_std": f"{ious.std():.6f}",
            "precision": _fmt(pooled.precision(c)),
            "recall": _fmt(pooled.recall(c)),
        })
    mious = np.array([cm.mean_iou() for cm in cms])
    rows.append({"class": "mean", "iou_mean": f"{mious.mean():.6f}",
                 "iou_std": f"{mious.std():.6f}", "precision": "", "recall": ""})
    return rows


METRIC_COLUMNS = ["class", "iou_mean", "iou_std", "precision", "recall"]


def write_metrics_csv(path, rows: list, digest: str) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(f"# config_digest={digest}\n")
        w = csv.DictWriter(fh, fieldnames=METRIC_COLUMNS, lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
