"""Comparison regimes (random init, direct evaluation, transfer learning, full fine-tuning) and Adam."""

from __future__ import annotations

import csv
import enum
import logging
import os
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from . import autodiff as ad
from .metrics import Metrics
from .meta import FineTuneConfig, ModelLoss, evaluate, fine_tune
from .network import (FEATURE_EXTRACTOR, ModelConfig, ParameterSet, forward, init_params,
                      update_running_stats)
from .objective import LossWeights, weighted_loss
from .tasks import WindowPool, WindowSet

log = logging.getLogger(__name__)


class BaselineKind(str, enum.Enum):
    RI = "RI"
    DE = "DE"
    TL = "TL"
    SFT = "SFT"


# default SGD fine-tuning rate per method
DEFAULT_LR = {"MAML": 3e-4, "RI": 1.5e-4, "TL": 8e-4, "SFT": 1e-6, "DE": 0.0}


def freeze_mask(kind: BaselineKind | str, names) -> dict[str, bool]:
    """name -> trainable during fine-tuning."""
    kind = BaselineKind(kind)
    if kind is BaselineKind.DE:
        return {n: False for n in names}
    if kind is BaselineKind.TL:
        return {n: n not in FEATURE_EXTRACTOR for n in names}
    return {n: True for n in names}


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros(cls, params: ParameterSet, **kw) -> "AdamState":
        return cls({k: np.zeros_like(p) for k, p in params.weights.items()},
                   {k: np.zeros_like(p) for k, p in params.weights.items()}, **kw)


def adam_step(params: ParameterSet, grads: Mapping[str, np.ndarray], state: AdamState,
              lr: float) -> tuple[ParameterSet, AdamState]:
    """Bias-corrected Adam; inputs are not modified."""
    t = state.step + 1
    b1, b2 = state.beta1, state.beta2
    m, v, new = dict(state.m), dict(state.v), {}
    for k, g in grads.items():
        p = params.weights[k]
        g = np.asarray(g, dtype=np.float64)
        if g.shape != p.shape or m[k].shape != p.shape:
            raise ad.ShapeError(f"adam_step: gradient for {k!r} has shape {g.shape}, parameter {p.shape}")
        m[k] = b1 * m[k] + (1 - b1) * g
        v[k] = b2 * v[k] + (1 - b2) * g * g
        # with b1 = 0 or b2 = 0 the correction factors are exactly 1
        mhat = m[k] / (1 - b1 ** t)
        vhat = v[k] / (1 - b2 ** t)
        new[k] = p - lr * mhat / (np.sqrt(vhat) + state.eps)
    return params.replace(weights=new), AdamState(m, v, t, b1, b2, state.eps)


@dataclass(frozen=True)
class PretrainConfig:
    epochs: int = 50
    batch_size: int = 200
    learning_rate: float = 1e-3
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1 or self.learning_rate <= 0:
            raise ValueError("need epochs >= 0, batch_size >= 1, learning_rate > 0")


def pretrain(dataset: WindowPool | WindowSet, cfg: PretrainConfig, model_config: ModelConfig | None = None,
             loss_weights: LossWeights = LossWeights(), init: ParameterSet | None = None,
             log_path: str | os.PathLike | None = None) -> tuple[ParameterSet, list[float]]:
    """Supervised minibatch Adam on the pooled training windows.

    Returns the parameters and the mean training loss of each epoch.
    """
    if len(dataset) == 0:
        raise ValueError("pretrain: empty dataset")
    params = init if init is not None else init_params(model_config or ModelConfig(), cfg.seed)
    state = AdamState.zeros(params)
    rng = np.random.default_rng([cfg.seed, 0xADA])
    curve = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(dataset))
        total, count = 0.0, 0
        for start in range(0, len(order), cfg.batch_size):
            batch = dataset.take(order[start:start + cfg.batch_size])
            tr = ad.Trace()
            leaves = {k: tr.leaf(v) for k, v in params.weights.items()}
            out = forward(params, batch.x, "train", weights=leaves)
            loss = weighted_loss(out, batch, loss_weights).total
            if not np.isfinite(loss.value):
                raise FloatingPointError(f"non-finite pretraining loss at epoch {epoch + 1}")
            gm = ad.backward(loss, list(leaves.values()))
            params, state = adam_step(params, {k: gm[t.node].value for k, t in leaves.items()},
                                      state, cfg.learning_rate)
            params = update_running_stats(params, out.batch_mean, out.batch_var)
            total += loss.item() * len(batch)
            count += len(batch)
        curve.append(total / count)
        log.info("pretrain epoch %d: loss %.4f", epoch + 1, curve[-1])
    if log_path:
        with open(log_path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "train_loss"])
            w.writerows((i + 1, repr(v)) for i, v in enumerate(curve))
    return params, curve


def pooled_loss(params: ParameterSet, data: WindowSet, loss_weights: LossWeights = LossWeights()) -> float:
    """Eval-mode loss of ``params`` on ``data`` (no trace)."""
    return ModelLoss(params, loss_weights, mode="eval")(params.weights, data).item()


@dataclass
class BaselineResult:
    params: ParameterSet
    metrics: Metrics
    predictions: tuple = field(repr=False, default=())


def run_baseline(kind: BaselineKind | str, start: ParameterSet | int, calibration: WindowSet,
                 query: WindowSet, ft: FineTuneConfig, model_config: ModelConfig | None = None,
                 loss_weights: LossWeights = LossWeights()) -> BaselineResult:
    """Fine-tune (or not) according to ``kind``, then evaluate on ``query``.

    ``start`` is an init seed for RI and the pretrained parameters otherwise.
    """
    kind = BaselineKind(kind)
    if kind is BaselineKind.RI:
        if isinstance(start, ParameterSet):
            raise TypeError("RI starts from a fresh initialization seed, not pretrained parameters")
        params = init_params(model_config or ModelConfig(), int(start))
    else:
        if not isinstance(start, ParameterSet):
            raise TypeError(f"{kind.value} needs pretrained parameters")
        params = start
    if kind is BaselineKind.DE:
        if ft.steps > 0:
            raise ValueError("DE evaluates without fine-tuning; steps must be 0")
    else:
        mask = freeze_mask(kind, params.names)
        params = fine_tune(params, calibration, ft.learning_rate, ft.steps,
                           trainable=[n for n, on in mask.items() if on], loss_weights=loss_weights)
    m, preds = evaluate(params, query)
    return BaselineResult(params, m, preds)
