"""Distortion meta-tasks and bi-level meta-prompt pre-training.

Each task holds images of one distortion type split into disjoint support and
query sets. A mini-batch of tasks is processed as

    theta'_i = theta    - alpha * grad L(theta,    support_i)
    theta_i  = theta'_i - alpha * grad L(theta'_i, query_i)
    theta   <- theta - beta * mean_i(theta - theta_i)

where the last line is either applied literally (``meta_optimizer="sgd"``) or
by feeding the pseudo-gradient ``mean_i(theta - theta_i)`` to Adam.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from .autodiff import Tensor
from .losses import rescale_mos
from .model import DualEncoder, meta_parameter_names, quality_loss_graph
from .optim import Adam
from .params import ParameterStore, value_and_grad
from .synth import Dataset

log = logging.getLogger(__name__)

LOG_COLUMNS = ("epoch", "batch", "task_id", "support_loss", "query_loss")


class NonFiniteGradient(FloatingPointError):
    pass


@dataclass(frozen=True)
class MetaConfig:
    inner_lr: float = 1e-4
    meta_lr: float = 1e-2
    epochs: int = 50
    tasks_per_batch: int = 1
    support_size: int = 8
    query_size: int = 8
    meta_optimizer: str = "adam"

    def __post_init__(self):
        if self.inner_lr < 0 or self.meta_lr <= 0:
            raise ValueError("learning rates must be positive")
        if self.tasks_per_batch < 1:
            raise ValueError("tasks_per_batch must be >= 1")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.meta_optimizer not in ("adam", "sgd"):
            raise ValueError(f"meta_optimizer must be 'adam' or 'sgd', got {self.meta_optimizer!r}")


@dataclass(frozen=True)
class Batch:
    image_ids: np.ndarray
    images: np.ndarray
    y: np.ndarray

    def __len__(self):
        return len(self.image_ids)


@dataclass(frozen=True)
class MetaTask:
    task_id: int
    distortion_type: int
    support: Batch
    query: Batch


def build_meta_tasks(dataset: Dataset, config: MetaConfig, seed) -> list[MetaTask]:
    """One task per distortion type present in ``dataset``.

    Labels are min-max rescaled over each task's support and query together.
    ``seed`` may be an int or a sequence of ints (e.g. ``(run_seed, epoch)``).
    """
    seed = list(np.atleast_1d(seed).astype(np.int64))
    types = sorted({r.distortion_type for r in dataset.records})
    need = config.support_size + config.query_size
    tasks = []
    for task_id, t in enumerate(types):
        idx = dataset.where(distortion_type=t)
        if len(idx) < need:
            raise ValueError(f"distortion type {t} has {len(idx)} images, need {need}")
        rng = np.random.default_rng(seed + [int(t)])
        for _ in range(10):
            pick = idx[rng.permutation(len(idx))[:need]]
            raw = np.array([dataset.records[i].y for i in pick])
            if raw.max() > raw.min():
                break
        else:
            raise ValueError(f"distortion type {t}: could not draw a non-degenerate label set")
        y = rescale_mos(raw)
        s = config.support_size
        ids = np.array([dataset.records[i].image_id for i in pick])
        tasks.append(MetaTask(
            task_id, int(t),
            Batch(ids[:s], dataset.images[pick[:s]], y[:s]),
            Batch(ids[s:], dataset.images[pick[s:]], y[s:]),
        ))
    return tasks


LossFn = Callable[[Mapping[str, Tensor], Batch], Tensor]


def _sgd_step(theta: ParameterStore, batch, lr: float, loss_fn) -> tuple[ParameterStore, float]:
    loss, grads = value_and_grad(lambda p: loss_fn(p, batch), theta)
    bad = [k for k, g in grads.items() if not np.all(np.isfinite(g))]
    if bad or not np.isfinite(loss):
        raise NonFiniteGradient(f"non-finite loss {loss} or gradients in {bad}")
    if lr == 0:
        return theta, loss
    return theta.replace({k: theta[k] - lr * g for k, g in grads.items()}), loss


def inner_step(theta: ParameterStore, support, lr: float, loss_fn: LossFn) -> tuple[ParameterStore, float]:
    """One plain SGD step on the support set; returns the adapted store and the loss."""
    return _sgd_step(theta, support, lr, loss_fn)


def outer_step(theta_adapted: ParameterStore, query, lr: float, loss_fn: LossFn) -> tuple[ParameterStore, float]:
    """One plain SGD step on the query set, with the gradient taken at the adapted point."""
    return _sgd_step(theta_adapted, query, lr, loss_fn)


def meta_update(theta: ParameterStore, task_params: Sequence[ParameterStore], beta: float,
                optimizer: Adam | None = None) -> ParameterStore:
    """Aggregate task-adapted parameters into a new meta initialization.

    Without an optimizer this is ``theta - beta * mean_i(theta - theta_i)``,
    which equals ``(1 - beta) * theta + beta * mean_i(theta_i)``;
    otherwise the mean difference is handed to ``optimizer`` as a gradient.
    Differences are summed in the given task order.
    """
    if not task_params:
        raise ValueError("meta_update needs at least one task")
    k = len(task_params)
    pseudo = {}
    for name in theta.trainable:
        total = np.zeros_like(theta[name])
        for tp in task_params:
            total = total + (theta[name] - tp[name])
        pseudo[name] = total / k
    if optimizer is None:
        if beta == 1.0:
            # the (1 - beta) * theta term vanishes; use the task mean directly so
            # that no cancellation enters (k=1 then returns theta_1 bit for bit)
            return theta.replace({n: sum(tp[n] for tp in task_params) / k for n in pseudo})
        return theta.replace({n: theta[n] - beta * g for n, g in pseudo.items()})
    return optimizer.step(theta, pseudo, lr=beta)


@dataclass
class MetaResult:
    params: ParameterStore
    log: list[dict] = field(default_factory=list)

    def epoch_means(self) -> list[tuple[float, float]]:
        by_epoch: dict[int, list] = {}
        for row in self.log:
            by_epoch.setdefault(row["epoch"], []).append((row["support_loss"], row["query_loss"]))
        return [tuple(np.mean(v, axis=0)) for _, v in sorted(by_epoch.items())]


def model_loss(model: DualEncoder) -> LossFn:
    cfg = model.config
    return lambda p, batch: quality_loss_graph(p, cfg, batch.images, batch.y)


def run_meta_pretraining(dataset: Dataset, config: MetaConfig, model: DualEncoder,
                         seed: int, loss_fn: LossFn | None = None) -> MetaResult:
    """Bi-level pre-training of the prompts and temperature of ``model``.

    Encoder weights are never touched. Deterministic given ``seed``.
    """
    loss_fn = loss_fn or model_loss(model)
    theta = model.params.with_trainable(meta_parameter_names(model.params))
    optimizer = Adam(config.meta_lr) if config.meta_optimizer == "adam" else None
    rows: list[dict] = []
    for epoch in range(config.epochs):
        tasks = build_meta_tasks(dataset, config, (seed, epoch))
        order = np.random.default_rng([seed, epoch, 0x0E]).permutation(len(tasks))
        k = min(config.tasks_per_batch, len(tasks))
        for b, start in enumerate(range(0, len(order), k)):
            batch_tasks = [tasks[i] for i in order[start:start + k]]
            adapted, s_losses, q_losses = [], [], []
            for task in batch_tasks:
                t1, ls = inner_step(theta, task.support, config.inner_lr, loss_fn)
                t2, lq = outer_step(t1, task.query, config.inner_lr, loss_fn)
                adapted.append(t2)
                s_losses.append(ls)
                q_losses.append(lq)
            theta = meta_update(theta, adapted, config.meta_lr, optimizer)
            rows.append({
                "epoch": epoch, "batch": b,
                "task_id": ";".join(str(t.task_id) for t in batch_tasks),
                "support_loss": float(np.mean(s_losses)),
                "query_loss": float(np.mean(q_losses)),
            })
        log.debug("epoch %d support %.4f query %.4f", epoch,
                  np.mean([r["support_loss"] for r in rows if r["epoch"] == epoch]),
                  np.mean([r["query_loss"] for r in rows if r["epoch"] == epoch]))
    return MetaResult(theta.with_trainable(()), rows)
