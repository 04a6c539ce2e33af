"""Few-shot fine-tuning with quality-aware gradient regularization.

Each step builds one forward graph over a batch and differentiates two sinks
from it: the quality cross-entropy (giving ``G_qua``) and the KL divergence
from a frozen semantic reference (giving ``G_sem``). When the two gradients
agree (positive dot product) the component of ``G_qua`` along ``G_sem`` is
scaled back by ``lam``::

    G_qgr = G_qua - lam * (G_qua . G_sem / |G_sem|^2) * G_sem

otherwise ``G_qua`` is used as is.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .losses import quality_loss, rescale_mos
from .meta import NonFiniteGradient
from .metrics import plcc, srcc
from .model import (DualEncoder, encode_image, encode_text, finetune_parameter_names,
                    quality_probability, quality_prompts, semantic_kl_graph, temperature)
from .optim import Adam
from .params import GradientVector, Layout, ParameterStore
from .synth import Dataset

log = logging.getLogger(__name__)

TELEMETRY_COLUMNS = ("step", "loss_ce", "loss_kl", "angle_deg", "dot_sign",
                     "norm_qua", "norm_sem", "lambda")
SPLIT_COLUMNS = ("split", "n", "srcc", "plcc")
DEGENERATE_NORM = 1e-12


@dataclass(frozen=True)
class FinetuneConfig:
    lam: float = 5.0
    lr: float = 1e-3
    epochs: int = 9
    batch_size: int = 16
    weight_decay: float = 0.01
    few_shot_n: int = 50
    splits: int = 10
    mode: str = "global"
    qgr: bool = True

    def __post_init__(self):
        if self.lam < 0 or not math.isfinite(self.lam):
            raise ValueError(f"lambda must be a finite value >= 0, got {self.lam}")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.epochs < 0 or self.batch_size < 1 or self.splits < 1 or self.few_shot_n < 2:
            raise ValueError("epochs >= 0, batch_size >= 1, splits >= 1 and few_shot_n >= 2 required")
        if self.mode not in ("global", "per_tensor"):
            raise ValueError(f"mode must be 'global' or 'per_tensor', got {self.mode!r}")

    @property
    def effective_lambda(self) -> float:
        return self.lam if self.qgr else 0.0


# ---------------------------------------------------------------- gradient geometry

def _regulate_flat(q: np.ndarray, s: np.ndarray, lam: float) -> np.ndarray:
    dot = float(q @ s)
    if lam == 0 or dot <= 0:
        return q
    ss = float(s @ s)
    if math.sqrt(ss) < DEGENERATE_NORM:
        log.warning("degenerate semantic gradient (norm %.3g) with positive dot; "
                    "leaving G_qua unchanged", math.sqrt(ss))
        return q
    return q - lam * (dot / ss) * s


def regulate(g_qua: GradientVector, g_sem: GradientVector, lam: float,
             mode: str = "global") -> GradientVector:
    """Clip the part of ``g_qua`` that points along ``g_sem``.

    With ``mode="global"`` the rule acts on the single flat vector; with
    ``"per_tensor"`` it is applied to each parameter's slice independently.
    ``lam == 0`` and non-positive dot products return ``g_qua`` itself.
    """
    if g_qua.layout != g_sem.layout:
        raise ValueError("G_qua and G_sem have different layouts")
    if lam < 0:
        raise ValueError("lambda must be >= 0")
    if not (np.all(np.isfinite(g_qua.values)) and np.all(np.isfinite(g_sem.values))):
        raise NonFiniteGradient("regulate received non-finite gradients")
    if mode == "global":
        out = _regulate_flat(g_qua.values, g_sem.values, lam)
        return g_qua if out is g_qua.values else GradientVector(out, g_qua.layout)
    if mode != "per_tensor":
        raise ValueError(f"unknown mode {mode!r}")
    out = g_qua.values.copy()
    for _, sl in g_qua.layout.segments():
        out[sl] = _regulate_flat(g_qua.values[sl], g_sem.values[sl], lam)
    return GradientVector(out, g_qua.layout)


def gradient_angle(a, b) -> float:
    """Angle between two gradients in degrees, in [0, 180]."""
    a = a.values if isinstance(a, GradientVector) else np.asarray(a, dtype=np.float64)
    b = b.values if isinstance(b, GradientVector) else np.asarray(b, dtype=np.float64)
    na, nb = float(np.sqrt(a @ a)), float(np.sqrt(b @ b))
    if na < DEGENERATE_NORM or nb < DEGENERATE_NORM:
        raise ValueError(f"angle undefined for near-zero gradient (norms {na:.3g}, {nb:.3g})")
    cos = float(np.clip((a @ b) / (na * nb), -1.0, 1.0))
    return math.degrees(math.acos(cos))


# ---------------------------------------------------------------- one step

def _losses(store: ParameterStore, model_config, images, y, p_sem):
    leaves = store.leaves()
    f = encode_image(leaves, model_config, images)
    g = encode_text(leaves, model_config, quality_prompts(leaves, model_config))
    loss_ce = quality_loss(quality_probability(f, g[0], g[1], temperature(leaves)), y)
    loss_kl = semantic_kl_graph(leaves, model_config, None, p_sem, f=f)
    return leaves, loss_ce, loss_kl


def _flat_grad(sink, leaves, store: ParameterStore, layout: Layout) -> GradientVector:
    g = ad.backward(sink)
    return GradientVector.from_grads(
        {k: g[leaves[k].node_id] for k in store.trainable if leaves[k].node_id in g}, layout)


def semantic_gradient(v_sem: DualEncoder, v_qua: DualEncoder, images,
                      p_sem: np.ndarray | None = None) -> GradientVector:
    """Gradient of the semantic KL term w.r.t. ``v_qua``'s trainable tensors.

    ``p_sem`` may be passed in to reuse a cached reference distribution.
    """
    store = v_qua.params
    if p_sem is None:
        p_sem = v_sem.semantic_distribution(images)
    leaves = store.leaves()
    kl = semantic_kl_graph(leaves, v_qua.config, images, p_sem)
    return _flat_grad(kl, leaves, store, store.layout())


@dataclass
class StepTelemetry:
    step: int
    loss_ce: float
    loss_kl: float
    angle_deg: float
    dot_sign: int
    norm_qua: float
    norm_sem: float
    lam: float
    dot_qua: float = 0.0
    dot_qgr: float = 0.0

    def row(self) -> list:
        return [self.step, self.loss_ce, self.loss_kl, self.angle_deg, self.dot_sign,
                self.norm_qua, self.norm_sem, self.lam]


def step_gradients(store: ParameterStore, model_config, images, y, p_sem
                   ) -> tuple[float, float, GradientVector, GradientVector]:
    """Both losses and their flat gradients from one shared forward graph."""
    leaves, loss_ce, loss_kl = _losses(store, model_config, images, y, p_sem)
    layout = store.layout()
    g_qua = _flat_grad(loss_ce, leaves, store, layout)
    g_sem = _flat_grad(loss_kl, leaves, store, layout)
    return loss_ce.item(), loss_kl.item(), g_qua, g_sem


def finetune_step(store: ParameterStore, model_config, images, y, p_sem,
                  config: FinetuneConfig, optimizer: Adam, lr: float | None = None,
                  step: int = 0) -> tuple[ParameterStore, StepTelemetry, GradientVector]:
    """One regulated update of ``store``'s trainable tensors.

    ``p_sem`` is the frozen semantic model's class distribution for
    ``images``. Returns the new store, telemetry and the gradient that was
    handed to the optimizer.
    """
    ce, kl, g_qua, g_sem = step_gradients(store, model_config, images, y, p_sem)
    if not (math.isfinite(ce) and math.isfinite(kl)
            and np.all(np.isfinite(g_qua.values)) and np.all(np.isfinite(g_sem.values))):
        raise NonFiniteGradient(f"step {step}: loss_ce={ce} loss_kl={kl} "
                                f"|G_qua|={g_qua.norm()} |G_sem|={g_sem.norm()}")
    lam = config.effective_lambda
    g_used = regulate(g_qua, g_sem, lam, config.mode) if lam else g_qua
    dot = g_qua.dot(g_sem)
    nq, ns = g_qua.norm(), g_sem.norm()
    angle = gradient_angle(g_qua, g_sem) if min(nq, ns) >= DEGENERATE_NORM else float("nan")
    tel = StepTelemetry(step, ce, kl, angle, int(np.sign(dot)), nq, ns, lam,
                        dot_qua=dot, dot_qgr=g_used.dot(g_sem))
    new_store = optimizer.step(store, g_used.to_dict(), lr=lr)
    return new_store, tel, g_used


# ---------------------------------------------------------------- full runs

def cosine_lr(base: float, step: int, total: int) -> float:
    if total <= 0:
        return base
    return base * 0.5 * (1.0 + math.cos(math.pi * step / total))


@dataclass
class FinetuneRun:
    params: ParameterStore
    telemetry: list[StepTelemetry] = field(default_factory=list)


def finetune(model: DualEncoder, images: np.ndarray, y: np.ndarray, p_sem: np.ndarray,
             config: FinetuneConfig, seed) -> FinetuneRun:
    """Fine-tune ``model`` on a labelled sample; ``p_sem`` is cached per image."""
    store = model.params.with_trainable(finetune_parameter_names(model.params, model.config))
    opt = Adam(config.lr, weight_decay=config.weight_decay)
    n = len(images)
    per_epoch = math.ceil(n / config.batch_size)
    total = per_epoch * config.epochs
    seed = list(np.atleast_1d(seed).astype(np.int64))
    telemetry, step = [], 0
    for epoch in range(config.epochs):
        order = np.random.default_rng(seed + [epoch, 0xF7]).permutation(n)
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            store, tel, _ = finetune_step(store, model.config, images[idx], y[idx], p_sem[idx],
                                          config, opt, cosine_lr(config.lr, step, total), step)
            telemetry.append(tel)
            step += 1
    return FinetuneRun(store.with_trainable(()), telemetry)


def evaluate(model: DualEncoder, dataset: Dataset) -> dict:
    scores = model.quality_scores(dataset.images)
    return {"srcc": srcc(scores, dataset.labels), "plcc": plcc(scores, dataset.labels),
            "n": len(dataset)}


def draw_labels(pool: Dataset, n: int, seed, attempts: int = 10) -> tuple[np.ndarray, np.ndarray]:
    """Sample ``n`` pool indices with a non-constant label set; returns (idx, rescaled y)."""
    if n > len(pool):
        raise ValueError(f"asked for {n} labels but the training pool has {len(pool)}")
    seed = list(np.atleast_1d(seed).astype(np.int64))
    for attempt in range(attempts):
        idx = np.sort(np.random.default_rng(seed + [attempt]).choice(len(pool), n, replace=False))
        raw = pool.labels[idx]
        if raw.max() > raw.min():
            return idx, rescale_mos(raw)
    raise ValueError(f"no non-degenerate label sample after {attempts} attempts")


@dataclass
class FewShotResult:
    splits: list[dict]
    telemetry: list[list[StepTelemetry]]

    @property
    def medians(self) -> dict:
        return {"srcc": float(np.median([s["srcc"] for s in self.splits])),
                "plcc": float(np.median([s["plcc"] for s in self.splits]))}

    def to_json(self) -> dict:
        return {"splits": self.splits, "median": self.medians}


def run_few_shot(dataset: Dataset, model: DualEncoder, config: FinetuneConfig, seed: int,
                 semantic: DualEncoder | None = None) -> FewShotResult:
    """Sample, fine-tune and evaluate ``config.splits`` times.

    ``dataset`` must carry ``"train-pool"`` and ``"test"`` splits.
    ``semantic`` is the frozen reference; the command line passes the
    initialization snapshot, so a meta-pretrained ``model`` starts away from
    it. When omitted a copy of ``model`` is used.
    """
    pool = dataset.subset(dataset.where(split="train-pool"))
    test = dataset.subset(dataset.where(split="test"))
    if len(test) < 2:
        raise ValueError("test split needs at least two images")
    semantic = semantic or DualEncoder(model.config, model.params, role="semantic")
    sem_before = semantic.params.checksum()
    p_sem_pool = semantic.semantic_distribution(pool.images)
    rows, traces = [], []
    for s in range(config.splits):
        idx, y = draw_labels(pool, config.few_shot_n, [seed, s])
        run = finetune(model, pool.images[idx], y, p_sem_pool[idx], config, [seed, s])
        metrics = evaluate(model.with_params(run.params), test)
        rows.append({"split": s, "n": config.few_shot_n,
                     "srcc": metrics["srcc"], "plcc": metrics["plcc"]})
        traces.append(run.telemetry)
        log.info("split %d srcc %.4f plcc %.4f", s, metrics["srcc"], metrics["plcc"])
    if semantic.params.checksum() != sem_before:
        raise RuntimeError("semantic reference changed during fine-tuning")
    return FewShotResult(rows, traces)


def run_mean_angle(telemetry: list[StepTelemetry], skip_steps: int = 0) -> float:
    """Mean angle in degrees over steps after ``skip_steps`` with a defined angle."""
    a = np.array([t.angle_deg for t in telemetry[skip_steps:]])
    a = a[np.isfinite(a)]
    return float(np.mean(a)) if a.size else float("nan")


def run_angle_stat(telemetry: list[StepTelemetry], skip_steps: int = 0) -> float:
    """Mean ``|angle - 90|`` over steps after ``skip_steps`` with a defined angle."""
    a = np.array([t.angle_deg for t in telemetry[skip_steps:]])
    a = a[np.isfinite(a)]
    return float(np.mean(np.abs(a - 90.0))) if a.size else float("nan")


def write_telemetry(path, telemetry: list[StepTelemetry]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TELEMETRY_COLUMNS)
        for t in telemetry:
            w.writerow([_fmt(v) for v in t.row()])


def _fmt(v) -> str:
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))
