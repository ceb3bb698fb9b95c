"""Generalized zero-shot segmentation metrics.

Pixel accuracy, mean accuracy and mIoU are computed separately on the shared
and the private class sets from one confusion matrix; the two sides are then
summarized by their harmonic mean.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import ContractError

ABSENT = 0xFFFF

METRIC_FIELDS = (
    "shared_PA", "shared_MA", "shared_mIoU",
    "private_PA", "private_MA", "private_mIoU",
    "hPA", "hMA", "hIoU",
)


class ConfusionMatrix:
    """Rows are ground truth, columns are predictions."""

    def __init__(self, n_classes: int, counts: np.ndarray | None = None):
        self.n_classes = n_classes
        self.counts = np.zeros((n_classes, n_classes), dtype=np.int64) if counts is None else counts

    def merge(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        return ConfusionMatrix(self.n_classes, self.counts + other.counts)

    @property
    def total(self) -> int:
        return int(self.counts.sum())


def accumulate_confusion(cm: ConfusionMatrix, pred: np.ndarray, gt: np.ndarray) -> ConfusionMatrix:
    pred = np.asarray(pred).reshape(-1).astype(np.int64)
    gt = np.asarray(gt).reshape(-1).astype(np.int64)
    if pred.shape != gt.shape:
        raise ContractError(f"prediction and ground truth sizes differ: {pred.shape} vs {gt.shape}")
    keep = gt != ABSENT
    pred, gt = pred[keep], gt[keep]
    C = cm.n_classes
    if pred.size and (pred.min() < 0 or pred.max() >= C or gt.min() < 0 or gt.max() >= C):
        raise ContractError(f"label id outside [0, {C})")
    cm.counts += np.bincount(gt * C + pred, minlength=C * C).reshape(C, C)
    return cm


def per_class_iou(cm: ConfusionMatrix) -> np.ndarray:
    """IoU per class on the full matrix; NaN where the union is empty."""
    tp = np.diag(cm.counts).astype(float)
    union = cm.counts.sum(axis=1) + cm.counts.sum(axis=0) - tp
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(union > 0, tp / union, np.nan)


def subset_metrics(cm: ConfusionMatrix, subset) -> tuple[float, float, float, bool]:
    """(PA, MA, mIoU, empty_flag) in percent for the classes in ``subset``.

    PA only counts pixels whose ground truth is in the subset.  Classes with
    no ground-truth pixels are left out of MA, and classes with an empty
    union are left out of mIoU.
    """
    subset = sorted(set(int(c) for c in subset))
    if not subset:
        raise ContractError("subset must be non-empty")
    rows = cm.counts[subset]
    gt_pixels = rows.sum(axis=1)
    total = int(gt_pixels.sum())
    if total == 0:
        return 0.0, 0.0, 0.0, True
    correct = cm.counts[subset, subset].astype(float)
    pa = 100.0 * correct.sum() / total
    present = gt_pixels > 0
    ma = 100.0 * float(np.mean(correct[present] / gt_pixels[present]))
    iou = per_class_iou(cm)[subset]
    iou = iou[~np.isnan(iou)]
    miou = 100.0 * float(np.mean(iou)) if iou.size else 0.0
    return float(pa), ma, miou, False


def harmonic_mean(a: float, b: float) -> float:
    if a < 0 or b < 0:
        raise ContractError("harmonic mean of negative values")
    return 0.0 if a + b == 0 else 2.0 * a * b / (a + b)


@dataclass
class MetricsReport:
    shared_PA: float
    shared_MA: float
    shared_mIoU: float
    private_PA: float
    private_MA: float
    private_mIoU: float
    hPA: float
    hMA: float
    hIoU: float
    per_class_iou: list = field(default_factory=list)
    pixel_counts: dict = field(default_factory=dict)
    flags: list = field(default_factory=list)

    def metrics(self) -> dict[str, float]:
        return {k: getattr(self, k) for k in METRIC_FIELDS}

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        return cls(**d)

    def to_json(self, **extra) -> str:
        return json.dumps({**self.to_dict(), **extra}, indent=2, sort_keys=True)

    def table_row(self, decimals: int = 1) -> str:
        return " ".join(f"{k}={getattr(self, k):.{decimals}f}" for k in METRIC_FIELDS)


def gzsl_report(cm: ConfusionMatrix, shared, private) -> MetricsReport:
    shared, private = set(shared), set(private)
    if shared & private:
        raise ContractError(f"shared and private sets overlap: {sorted(shared & private)}")
    s_pa, s_ma, s_iou, s_empty = subset_metrics(cm, shared)
    p_pa, p_ma, p_iou, p_empty = subset_metrics(cm, private)
    flags = [name for name, empty in (("shared_empty", s_empty), ("private_empty", p_empty)) if empty]
    iou = per_class_iou(cm)
    gt = cm.counts.sum(axis=1)
    return MetricsReport(
        s_pa, s_ma, s_iou, p_pa, p_ma, p_iou,
        harmonic_mean(s_pa, p_pa), harmonic_mean(s_ma, p_ma), harmonic_mean(s_iou, p_iou),
        per_class_iou=[None if np.isnan(v) else 100.0 * float(v) for v in iou],
        pixel_counts={"shared": int(gt[sorted(shared)].sum()), "private": int(gt[sorted(private)].sum()),
                      "total": cm.total},
        flags=flags,
    )


def reports_to_csv(rows: list[dict], columns: list[str]) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=columns, extrasaction="ignore", lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow(row)
    return buf.getvalue()
