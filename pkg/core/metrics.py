"""逐图像 mIoU 以及结果表里的五个统计量"""
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from core.errors import EvaluationError, UndefinedMetricError
from core.functional import IGNORE_INDEX


@dataclass
class ConfusionCounts:
    """K×K 像素计数，行 = 真值，列 = 预测；被忽略的像素不计入"""
    matrix: np.ndarray

    @property
    def num_classes(self) -> int:
        return self.matrix.shape[0]

    @property
    def total(self) -> int:
        return int(self.matrix.sum())


@dataclass
class MiouSummary:
    mean: float
    std: float
    worst: float
    median: float
    best: float
    loss: float

    def to_dict(self) -> dict:
        return asdict(self)


def confusion_counts(pred: np.ndarray, truth: np.ndarray, num_classes: int) -> ConfusionCounts:
    """生成混淆矩阵；任一方为忽略标记的像素都跳过"""
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    if pred.shape != truth.shape:
        raise EvaluationError(f"prediction shape {pred.shape} != truth shape {truth.shape}")
    index = (truth != IGNORE_INDEX) & (pred != IGNORE_INDEX)
    t = truth[index].astype(np.int64)
    p = pred[index].astype(np.int64)
    if t.size and (t.min() < 0 or t.max() >= num_classes or p.min() < 0 or p.max() >= num_classes):
        raise EvaluationError(f"class ids outside [0, {num_classes})")
    count = np.bincount(num_classes * t + p, minlength=num_classes ** 2)
    return ConfusionCounts(count.reshape(num_classes, num_classes))


def image_miou(counts: ConfusionCounts) -> float:
    """对真值或预测中出现过的类别求 IoU = TP/(TP+FP+FN) 的平均"""
    m = counts.matrix
    if counts.total == 0:
        raise UndefinedMetricError("mIoU is undefined for an image with no counted pixels")
    inter = np.diag(m).astype(np.float64)
    union = m.sum(axis=1) + m.sum(axis=0) - np.diag(m)
    present = union > 0
    return float(np.mean(inter[present] / union[present]))


def dataset_summary(per_image_mious: Sequence[float], per_image_losses: Sequence[float]) -> MiouSummary:
    """总体标准差；偶数长度时中位数取两个中间值里较小的那个"""
    mious = np.asarray(per_image_mious, dtype=np.float64)
    losses = np.asarray(per_image_losses, dtype=np.float64)
    if mious.size == 0:
        raise EvaluationError("cannot summarize an empty sequence")
    if mious.shape != losses.shape:
        raise EvaluationError(f"{mious.size} mIoU values but {losses.size} losses")
    ordered = np.sort(mious)
    return MiouSummary(
        mean=float(mious.mean()),
        std=float(mious.std()),
        worst=float(ordered[0]),
        median=float(ordered[(ordered.size - 1) // 2]),
        best=float(ordered[-1]),
        loss=float(losses.mean()),
    )
