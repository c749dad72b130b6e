"""MAML meta-training over walking tasks and few-shot fine-tuning on an unseen subject."""

from __future__ import annotations

import csv
import logging
import math
import os
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .metrics import Metrics, metrics
from .network import (ModelConfig, ParameterSet, conv_statistics, forward, init_params,
                      predict_windows, save_params, update_running_stats)
from .objective import LossWeights, weighted_loss
from .tasks import TaskDescriptor, WindowPool, WindowSet

log = logging.getLogger(__name__)

LossFn = Callable[[Mapping[str, Tensor], Any], Tensor]


@dataclass(frozen=True)
class MetaConfig:
    alpha: float = 0.01
    beta: float = 0.001
    inner_steps: int = 1
    epochs: int = 200
    n: int = 80
    m: int = 120
    first_order: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.alpha <= 0 or self.beta <= 0:
            raise ValueError("alpha and beta must be positive")
        if self.epochs < 0 or self.inner_steps < 1:
            raise ValueError("need epochs >= 0 and inner_steps >= 1")
        if self.n < 1 or self.m < 1:
            raise ValueError("support and query sizes must be >= 1")


@dataclass(frozen=True)
class FineTuneConfig:
    learning_rate: float = 3e-4
    steps: int = 4
    calibration_duration: float = 3.5

    def __post_init__(self):
        if self.steps < 0:
            raise ValueError("fine-tune steps must be >= 0")
        if self.learning_rate < 0:
            raise ValueError("learning rate must be >= 0")
        if self.calibration_duration <= 0:
            raise ValueError("calibration duration must be positive")


@dataclass
class Episode:
    support: WindowSet
    query: WindowSet


@dataclass
class EpochStats:
    epoch: int
    support_loss: float
    query_loss: float
    wall_time: float


class ModelLoss:
    """Weighted multi-task loss of the network as a function of its weights."""

    def __init__(self, template: ParameterSet, loss_weights: LossWeights = LossWeights(),
                 mode: str = "train"):
        self.template = template
        self.loss_weights = loss_weights
        self.mode = mode

    def __call__(self, weights: Mapping[str, Tensor], batch: WindowSet) -> Tensor:
        out = forward(self.template, batch.x, self.mode, weights=weights)
        return weighted_loss(out, batch, self.loss_weights).total


def _seed(*parts: int) -> np.random.Generator:
    return np.random.default_rng([int(p) for p in parts])


def sample_episode(task: TaskDescriptor, dataset: Mapping[TaskDescriptor, WindowPool | WindowSet],
                   n: int, m: int, seed) -> Episode:
    """Disjoint support/query sets drawn uniformly without replacement."""
    if n < 1 or m < 1:
        raise ValueError(f"support and query sizes must be >= 1 (got n={n}, m={m})")
    pool = dataset[task]
    if len(pool) < n + m:
        raise ValueError(f"task {task.key} has {len(pool)} windows, need n+m = {n + m}")
    rng = np.random.default_rng(seed)
    idx = rng.choice(len(pool), size=n + m, replace=False)
    return Episode(pool.take(idx[:n]), pool.take(idx[n:]))


def _assert_finite(loss: Tensor, where: str) -> None:
    if not np.isfinite(loss.value).all():
        raise FloatingPointError(f"non-finite loss {loss.value} ({where})")


def adapt(weights: Mapping[str, Tensor], support, alpha: float, steps: int, loss_fn: LossFn,
          create_graph: bool, trainable: Sequence[str] | None = None, where: str = "") -> tuple[dict[str, Tensor], float]:
    """Gradient-descent steps on the support loss; returns adapted weights and first loss.

    With ``create_graph`` the update stays on the trace, so an outer gradient
    flows through it. Names outside ``trainable`` are carried over unchanged.
    """
    cur = dict(weights)
    names = list(cur) if trainable is None else list(trainable)
    first = math.nan
    for step in range(steps):
        loss = loss_fn(cur, support)
        _assert_finite(loss, f"{where} inner step {step}")
        if step == 0:
            first = loss.item()
        gm = ad.backward(loss, [cur[k] for k in names], create_graph=create_graph)
        for k in names:
            cur[k] = ad.sub(cur[k], ad.mul(gm[cur[k].node], alpha))
    return cur, first


def inner_adapt(theta: ParameterSet, support, alpha: float, steps: int = 1,
                loss_fn: LossFn | None = None) -> ParameterSet:
    """``steps`` full-batch gradient steps on ``support``; ``theta`` is not modified."""
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    if steps < 1:
        raise ValueError("steps must be >= 1")
    loss_fn = loss_fn or ModelLoss(theta)
    tr = ad.Trace()
    leaves = {k: tr.leaf(v) for k, v in theta.weights.items()}
    adapted, _ = adapt(leaves, support, alpha, steps, loss_fn, create_graph=False)
    return theta.replace(weights={k: v.value for k, v in adapted.items()})


def task_meta_gradient(theta: ParameterSet, episode: Episode, cfg: MetaConfig, loss_fn: LossFn,
                       where: str = "") -> tuple[dict[str, np.ndarray], float, float]:
    """Gradient of the post-adaptation query loss w.r.t. the initial weights."""
    tr = ad.Trace()
    leaves = {k: tr.leaf(v) for k, v in theta.weights.items()}
    adapted, s_loss = adapt(leaves, episode.support, cfg.alpha, cfg.inner_steps, loss_fn,
                            create_graph=not cfg.first_order, where=where)
    q = loss_fn(adapted, episode.query)
    _assert_finite(q, f"{where} query")
    gm = ad.backward(q, list(leaves.values()))
    return {k: gm[t.node].value for k, t in leaves.items()}, s_loss, q.item()


def sgd_step(params: ParameterSet, grads: Mapping[str, np.ndarray], lr: float) -> ParameterSet:
    """p <- p - lr * g for every named gradient; buffers are left untouched."""
    new = {}
    for k, g in grads.items():
        p = params.weights[k]
        g = np.asarray(g)
        if g.shape != p.shape:
            raise ad.ShapeError(f"sgd_step: gradient for {k!r} has shape {g.shape}, parameter {p.shape}")
        new[k] = p - lr * g
    return params.replace(weights=new)


def meta_epoch(theta: ParameterSet, tasks: Sequence[TaskDescriptor], dataset, cfg: MetaConfig,
               epoch: int = 0, loss_fn: LossFn | None = None) -> tuple[ParameterSet, EpochStats]:
    """One pass over all tasks followed by a single meta-update of size beta.

    Per-task gradients are summed in task order, which equals the gradient of
    the summed query loss.
    """
    if not tasks:
        raise ValueError("meta_epoch needs at least one task")
    t0 = time.perf_counter()
    loss_fn = loss_fn or ModelLoss(theta)
    track_bn = theta.config is not None and "bn.running_mean" in theta.buffers
    total = {k: np.zeros_like(v) for k, v in theta.weights.items()}
    s_losses, q_losses = [], []
    buffers_from = theta
    for i, task in enumerate(tasks):
        where = f"epoch {epoch}, task {getattr(task, 'key', task)}"
        episode = sample_episode(task, dataset, cfg.n, cfg.m, [cfg.seed, epoch, i])
        g, s, q = task_meta_gradient(theta, episode, cfg, loss_fn, where)
        for k in total:
            total[k] += g[k]
        s_losses.append(s)
        q_losses.append(q)
        if track_bn:
            buffers_from = update_running_stats(buffers_from, *conv_statistics(theta, episode.support.x))
    new = sgd_step(theta, total, cfg.beta)
    if track_bn:
        new = new.replace(buffers=buffers_from.buffers)
    return new, EpochStats(epoch, float(np.mean(s_losses)), float(np.mean(q_losses)),
                           time.perf_counter() - t0)


def write_log(stats: Sequence[EpochStats], path: str | os.PathLike) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "support_loss", "query_loss", "wall_time"])
        for s in stats:
            w.writerow([s.epoch, repr(s.support_loss), repr(s.query_loss), f"{s.wall_time:.3f}"])


def meta_train(tasks: Sequence[TaskDescriptor], dataset, cfg: MetaConfig,
               model_config: ModelConfig | None = None, loss_weights: LossWeights = LossWeights(),
               init: ParameterSet | None = None, checkpoint_dir: str | os.PathLike | None = None,
               checkpoint_every: int = 0, log_path: str | os.PathLike | None = None
               ) -> tuple[ParameterSet, list[EpochStats]]:
    """Run ``cfg.epochs`` meta-epochs from ``init`` (default: init_params(seed))."""
    if not tasks:
        raise ValueError("meta_train needs a non-empty task list")
    theta = init if init is not None else init_params(model_config or ModelConfig(), cfg.seed)
    history: list[EpochStats] = []
    for epoch in range(1, cfg.epochs + 1):
        loss_fn = ModelLoss(theta, loss_weights) if theta.config is not None else None
        theta, stats = meta_epoch(theta, tasks, dataset, cfg, epoch, loss_fn)
        history.append(stats)
        log.info("meta epoch %d: support %.4f query %.4f (%.2fs)", epoch,
                 stats.support_loss, stats.query_loss, stats.wall_time)
        if checkpoint_dir and checkpoint_every and epoch % checkpoint_every == 0:
            Path(checkpoint_dir).mkdir(parents=True, exist_ok=True)
            save_params(theta, Path(checkpoint_dir) / f"maml_epoch{epoch:04d}.mgait")
    if log_path:
        write_log(history, log_path)
    return theta, history


def fine_tune(params: ParameterSet, calibration: WindowSet, lr: float, steps: int,
              trainable: Sequence[str] | None = None,
              loss_weights: LossWeights = LossWeights()) -> ParameterSet:
    """Plain full-batch SGD on the calibration set; only ``trainable`` names change."""
    names = list(params.weights) if trainable is None else list(trainable)
    for _ in range(steps):
        tr = ad.Trace()
        weights: dict[str, Tensor] = {k: Tensor(v) for k, v in params.weights.items()}
        for k in names:
            weights[k] = tr.leaf(params.weights[k])
        loss = ModelLoss(params, loss_weights)(weights, calibration)
        _assert_finite(loss, "fine-tuning")
        gm = ad.backward(loss, [weights[k] for k in names])
        params = sgd_step(params, {k: gm[weights[k].node].value for k in names}, lr)
    return params


def evaluate(params: ParameterSet, windows: WindowSet) -> tuple[Metrics, tuple]:
    preds = predict_windows(params, windows.x)
    return metrics(preds, windows), preds


def meta_test(theta: ParameterSet, calibration: WindowSet, query: WindowSet, ft: FineTuneConfig,
              loss_weights: LossWeights = LossWeights()) -> tuple[ParameterSet, Metrics]:
    """Fine-tune on the calibration windows, then score the query windows."""
    adapted = fine_tune(theta, calibration, ft.learning_rate, ft.steps, loss_weights=loss_weights)
    return adapted, evaluate(adapted, query)[0]
