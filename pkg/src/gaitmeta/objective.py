"""Weighted multi-task loss: phase and mode cross-entropy plus incline RMSE."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


@dataclass(frozen=True)
class LossWeights:
    w_gait: float = 0.6
    w_inc: float = 0.2
    w_loc: float = 0.2

    def __post_init__(self):
        if min(self.w_gait, self.w_inc, self.w_loc) < 0:
            raise ValueError("loss weights must be non-negative")


@dataclass
class LossBreakdown:
    gait: Tensor
    inc: Tensor
    loc: Tensor
    total: Tensor


def cross_entropy(logits, labels) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under softmax(``logits``)."""
    logits = ad.as_tensor(logits)
    labels = np.asarray(labels)
    if logits.ndim != 2:
        raise ad.ShapeError(f"cross_entropy: logits must be [B, C], got {logits.shape}")
    n, c = logits.shape
    if labels.shape != (n,):
        raise ad.ShapeError(f"cross_entropy: labels shape {labels.shape} does not match batch {n}")
    if n == 0:
        raise ValueError("cross_entropy: empty batch")
    if labels.min() < 0 or labels.max() >= c:
        raise ValueError(f"cross_entropy: labels must lie in [0, {c}), got range "
                         f"[{labels.min()}, {labels.max()}]")
    onehot = np.zeros((n, c))
    onehot[np.arange(n), labels] = 1.0
    picked = ad.sum(ad.mul(ad.log_softmax(logits, axis=1), onehot), axis=1)
    return ad.neg(ad.mean(picked))


def rmse(pred, target) -> Tensor:
    """Root-mean-square error; the gradient is taken as 0 at exactly zero error."""
    pred = ad.as_tensor(pred)
    target = np.asarray(target, dtype=np.float64)
    if pred.size == 0:
        raise ValueError("rmse: empty batch")
    if pred.size != target.size:
        raise ad.ShapeError(f"rmse: incompatible shapes {pred.shape} and {target.shape}")
    diff = ad.sub(ad.reshape(pred, (pred.size,)), target.reshape(-1))
    return ad.sqrt(ad.mean(ad.square(diff)))


def combine(gait, inc, loc, w: LossWeights = LossWeights()) -> Tensor:
    return ad.add(ad.add(ad.mul(gait, w.w_gait), ad.mul(inc, w.w_inc)), ad.mul(loc, w.w_loc))


def weighted_loss(output, labels, w: LossWeights = LossWeights()) -> LossBreakdown:
    """``labels`` is anything with ``phase``, ``incline`` and ``mode`` arrays (e.g. a WindowSet)."""
    gait = cross_entropy(output.gait_logits, labels.phase)
    inc = rmse(output.incline, labels.incline)
    loc = cross_entropy(output.loc_logits, labels.mode)
    return LossBreakdown(gait, inc, loc, combine(gait, inc, loc, w))
