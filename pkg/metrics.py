#!/usr/bin/env python3
"""
Segmentation metrics
Confusion-matrix accumulation, per-class IoU, mean IoU and report rendering
"""

from typing import Dict, List, Optional, Sequence

import numpy as np
import torch
from pydantic import BaseModel, Field

from data import CLASS_NAMES, IGNORE_INDEX, NUM_TRAIN_CLASSES
from errors import InvalidPrediction, NoClassesPresent, ShapeError, SizeMismatch

# Per-class IoU (percent) and mIoU of the proposed model and the compared methods
# on the 19-class benchmark, in taxonomy order.
PUBLISHED_ROWS: Dict[str, Dict[str, object]] = {
    'RefineNet': {'per_class': [68.8, 23.2, 46.8, 20.8, 12.6, 29.8, 30.4, 26.9, 43.1, 14.3, 0.3, 36.9, 49.7, 63.6, 6.8, 0.2, 24.0, 33.6, 9.3], 'miou': 28.5},
    'DeepLab-v2': {'per_class': [79.0, 21.8, 53.0, 13.3, 11.2, 22.5, 20.2, 22.1, 43.5, 10.4, 18.0, 37.4, 33.8, 64.1, 6.4, 0.0, 52.3, 30.4, 7.4], 'miou': 28.8},
    'PSPNet': {'per_class': [78.2, 19.0, 51.2, 15.5, 10.6, 30.3, 28.9, 22.0, 56.7, 13.3, 20.8, 38.2, 21.8, 52.1, 1.6, 0.0, 53.2, 23.2, 10.7], 'miou': 28.8},
    'AdaptSegNet': {'per_class': [86.1, 44.2, 55.1, 22.2, 4.8, 21.1, 5.6, 16.7, 37.2, 8.4, 1.2, 35.9, 26.7, 68.2, 45.1, 0.0, 50.1, 33.9, 15.6], 'miou': 30.4},
    'ADVENT': {'per_class': [85.8, 37.9, 55.5, 27.7, 14.5, 23.1, 14.0, 21.1, 32.1, 8.7, 2.0, 39.9, 16.6, 64.0, 13.8, 0.0, 58.8, 28.5, 20.7], 'miou': 29.7},
    'BDL': {'per_class': [85.3, 41.1, 61.9, 32.7, 17.4, 20.6, 11.4, 21.3, 29.4, 8.9, 1.1, 37.4, 22.1, 63.2, 28.2, 0.0, 47.7, 39.4, 15.7], 'miou': 30.8},
    'DMAda': {'per_class': [75.5, 29.1, 48.6, 21.3, 14.3, 34.3, 36.8, 29.9, 49.4, 13.8, 0.4, 43.3, 50.2, 69.4, 18.4, 0.0, 27.6, 34.9, 11.9], 'miou': 32.1},
    'RHRSegNet-Cityscapes': {'per_class': [92.59, 58.56, 78.65, 5.83, 10.11, 30.48, 16.33, 32.45, 78.97, 30.35, 80.25, 52.98, 14.57, 80.77, 0.46, 0.02, 0.02, 0.11, 49.52], 'miou': 37.53},
    'RHRSegNet-NightCity-Fine': {'per_class': [87.25, 37.63, 77.84, 23.79, 32.72, 23.58, 9.87, 28.06, 49.62, 14.63, 82.82, 29.76, 0.01, 70.84, 20.65, 24.55, 0.0, 0.0, 20.01], 'miou': 33.35},
}


class ConfusionMatrix:
    """K x K pixel counts; rows are ground truth, columns are predictions"""

    def __init__(self, num_classes: int = NUM_TRAIN_CLASSES, counts: Optional[np.ndarray] = None):
        self.num_classes = num_classes
        if counts is None:
            counts = np.zeros((num_classes, num_classes), dtype=np.int64)
        if counts.shape != (num_classes, num_classes):
            raise SizeMismatch(f"counts shape {counts.shape} does not match {num_classes} classes")
        self.counts = counts.astype(np.int64, copy=False)

    @property
    def total_pixels(self) -> int:
        return int(self.counts.sum())

    def copy(self) -> 'ConfusionMatrix':
        return ConfusionMatrix(self.num_classes, self.counts.copy())

    def __eq__(self, other):
        return (isinstance(other, ConfusionMatrix) and self.num_classes == other.num_classes
                and np.array_equal(self.counts, other.counts))


def _as_numpy(x) -> np.ndarray:
    if isinstance(x, torch.Tensor):
        return x.detach().cpu().numpy()
    return np.asarray(x)


def update_confusion(conf: ConfusionMatrix, pred, gt) -> ConfusionMatrix:
    """Add one (pred, gt) pair in place and return the matrix"""
    pred, gt = _as_numpy(pred).astype(np.int64), _as_numpy(gt).astype(np.int64)
    if pred.shape != gt.shape:
        raise ShapeError(f"prediction {pred.shape} and ground truth {gt.shape} differ")
    k = conf.num_classes
    if np.any((pred < 0) | (pred >= k)):
        raise InvalidPrediction(f"prediction contains ids outside [0, {k}) (ignore value included)")

    valid = gt != IGNORE_INDEX
    if np.any((gt[valid] < 0) | (gt[valid] >= k)):
        raise InvalidPrediction(f"ground truth contains ids outside [0, {k}) other than {IGNORE_INDEX}")
    conf.counts += np.bincount(k * gt[valid] + pred[valid], minlength=k * k).reshape(k, k)
    return conf


def merge_confusions(a: ConfusionMatrix, b: ConfusionMatrix) -> ConfusionMatrix:
    if a.num_classes != b.num_classes:
        raise SizeMismatch(f"cannot merge {a.num_classes}-class and {b.num_classes}-class matrices")
    return ConfusionMatrix(a.num_classes, a.counts + b.counts)


def iou_per_class(conf: ConfusionMatrix) -> List[Optional[float]]:
    """Per-class IoU, None where the class is absent from both prediction and ground truth"""
    intersection = np.diag(conf.counts)
    union = conf.counts.sum(axis=1) + conf.counts.sum(axis=0) - intersection
    return [float(i) / float(u) if u > 0 else None for i, u in zip(intersection, union)]


def mean_iou(per_class: Sequence[Optional[float]]) -> float:
    present = [v for v in per_class if v is not None]
    if not present:
        raise NoClassesPresent("no class occurs in either prediction or ground truth")
    return sum(present) / len(present)


def pixel_accuracy(conf: ConfusionMatrix) -> float:
    total = conf.total_pixels
    return float(np.trace(conf.counts)) / total if total else 0.0


def predict_labels(logits: torch.Tensor) -> torch.Tensor:
    """Argmax over classes; ties go to the lowest class index"""
    return torch.argmax(logits, dim=1)


class MetricsReport(BaseModel):
    per_class_iou: List[Optional[float]]
    miou: float = Field(ge=0.0, le=1.0)
    pixel_accuracy: float = Field(ge=0.0, le=1.0)
    class_names: List[str] = list(CLASS_NAMES)


def build_report(conf: ConfusionMatrix) -> MetricsReport:
    per_class = iou_per_class(conf)
    return MetricsReport(
        per_class_iou=per_class,
        miou=mean_iou(per_class),
        pixel_accuracy=pixel_accuracy(conf),
        class_names=list(CLASS_NAMES[:conf.num_classes]),
    )


def report_to_record(report: MetricsReport) -> Dict[str, object]:
    """Machine-readable form with percentages rounded to 2 decimals"""
    return {
        'classes': report.class_names,
        'per_class_iou': [None if v is None else round(100.0 * v, 2) for v in report.per_class_iou],
        'miou': round(100.0 * report.miou, 2),
        'pixel_accuracy': round(100.0 * report.pixel_accuracy, 2),
    }


def render_table(rows: Dict[str, Sequence[Optional[float]]], mious: Dict[str, float],
                 class_names: Sequence[str] = CLASS_NAMES) -> str:
    """Text table with one column per class plus mIoU; values in percent"""
    name_width = max([len('Method')] + [len(name) for name in rows])
    headers = [name[:8] for name in class_names] + ['mIoU']
    widths = [max(6, len(h)) for h in headers]

    def fmt(value):
        return '-' if value is None else f"{value:.2f}"

    lines = [' '.join(['Method'.ljust(name_width)] + [h.rjust(w) for h, w in zip(headers, widths)])]
    for name, values in rows.items():
        cells = [fmt(v) for v in values] + [fmt(mious[name])]
        lines.append(' '.join([name.ljust(name_width)] + [c.rjust(w) for c, w in zip(cells, widths)]))
    return '\n'.join(lines)


def report_table(name: str, report: MetricsReport) -> str:
    record = report_to_record(report)
    return render_table({name: record['per_class_iou']}, {name: record['miou']}, report.class_names)
