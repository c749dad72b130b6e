"""Accuracy, RMSE, confusion matrices and normal-approximation confidence intervals."""

from __future__ import annotations

import math
import statistics
from dataclasses import dataclass

import numpy as np

from .tasks import PHASES

CI_Z = 1.96


@dataclass
class Metrics:
    gait_acc: float
    loc_acc: float
    incline_rmse: float
    confusion: np.ndarray   # [4, 4] rows = true phase, columns = predicted

    @property
    def n(self) -> int:
        return int(self.confusion.sum())


def confusion_matrix(true_phase, pred_phase, n_classes: int = len(PHASES)) -> np.ndarray:
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (np.asarray(true_phase), np.asarray(pred_phase)), 1)
    return cm


def metrics(predictions, labels) -> Metrics:
    """``predictions`` = (mode, phase, incline) arrays; ``labels`` has the same fields."""
    pm, pp, pi = (np.asarray(a) for a in predictions)
    tm, tp, ti = np.asarray(labels.mode), np.asarray(labels.phase), np.asarray(labels.incline)
    n = len(tp)
    if n == 0:
        raise ValueError("metrics: empty prediction set")
    if not (len(pm) == len(pp) == len(pi) == len(tm) == len(ti) == n):
        raise ValueError(f"metrics: length mismatch between predictions ({len(pm)}, {len(pp)}, "
                         f"{len(pi)}) and labels ({len(tm)}, {n}, {len(ti)})")
    return Metrics(
        gait_acc=float(np.count_nonzero(pp == tp)) / n,
        loc_acc=float(np.count_nonzero(pm == tm)) / n,
        incline_rmse=math.sqrt(float(np.mean((pi - ti) ** 2))),
        confusion=confusion_matrix(tp, pp),
    )


def confidence_interval(values) -> tuple[float, float]:
    """Mean and 1.96 * s / sqrt(N) with the unbiased sample standard deviation."""
    values = [float(v) for v in values]
    if len(values) < 2:
        raise ValueError("confidence interval needs at least 2 values")
    return statistics.mean(values), CI_Z * statistics.stdev(values) / math.sqrt(len(values))
