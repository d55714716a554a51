"""Soft-target knowledge distillation.

Phase one trains the teacher with cross-entropy; phase two trains the student
on ``(1 - alpha) * CE(labels, student) + alpha * T^2 * KL(teacher_T || student_T)``
where the ``_T`` distributions are temperature-softened softmaxes and the
teacher is frozen. Both phases use AdamW, per-epoch validation accuracy,
patience-based early stopping and best-epoch model selection.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
from scipy.special import xlogy

from . import functional as F
from .blocks import Module
from .data import Dataset, batch_indices
from .errors import EmptyDataset, InvalidConfig, InvalidDistribution, InvalidLabel, InvalidParameter, ShapeMismatch
from .models import ModelConfig, build_model
from .tensor import Rng, Tensor, no_grad

log = logging.getLogger(__name__)


@dataclass
class DistillConfig:
    temperature: float = 2.0
    alpha: float = 0.1
    lr_teacher: float = 1e-4
    lr_student: float = 1e-4
    weight_decay: float = 1e-3
    batch_size: int = 16
    epochs_teacher: int = 300
    epochs_student: int = 300
    patience: int = 10
    seed: int = 0

    def validate(self) -> "DistillConfig":
        if not self.temperature > 0:
            raise InvalidParameter(f"temperature must be > 0, got {self.temperature}")
        if not 0.0 <= self.alpha <= 1.0:
            raise InvalidParameter(f"alpha must be in [0, 1], got {self.alpha}")
        if self.patience < 1:
            raise InvalidParameter(f"patience must be >= 1, got {self.patience}")
        if self.epochs_teacher < 0 or self.epochs_student < 0:
            raise InvalidParameter("epochs must be >= 0")
        if self.batch_size < 1:
            raise InvalidParameter(f"batch_size must be >= 1, got {self.batch_size}")
        if self.lr_teacher <= 0 or self.lr_student <= 0 or self.weight_decay < 0:
            raise InvalidParameter("learning rates must be > 0 and weight decay >= 0")
        return self

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------


def _check_labels(labels, num_classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise InvalidLabel(f"labels must lie in [0, {num_classes}), got {labels.min()}..{labels.max()}")
    return labels


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Batch mean of -log softmax(logits)[label], fused with its gradient."""
    if logits.ndim != 2:
        raise ShapeMismatch(f"logits must be [B, C], got {logits.shape}")
    B, C = logits.shape
    labels = _check_labels(labels, C)
    if labels.size != B:
        raise ShapeMismatch(f"{labels.size} labels for {B} rows")
    z = logits.data
    shifted = z - z.max(axis=1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    rows = np.arange(B)
    loss = -logp[rows, labels].mean()

    def bw(g):
        grad = np.exp(logp)
        grad[rows, labels] -= 1.0
        return (grad * (g / B),)

    return Tensor._node(np.asarray(loss, dtype=z.dtype), (logits,), bw, "cross_entropy")


def _check_rows(p: np.ndarray, name: str):
    if p.ndim != 2:
        raise ShapeMismatch(f"{name} must be [B, C], got {p.shape}")
    if (p < 0).any() or not np.allclose(p.sum(axis=1), 1.0, rtol=0.0, atol=1e-5):
        raise InvalidDistribution(f"{name} rows must be non-negative and sum to 1")


def kl_divergence(p_teacher, p_student: Tensor) -> Tensor:
    """Batch mean of sum_c p_t * ln(p_t / p_s); the teacher side is treated as a constant."""
    pt = p_teacher.data if isinstance(p_teacher, Tensor) else np.asarray(p_teacher)
    _check_rows(pt, "teacher distribution")
    _check_rows(p_student.data, "student distribution")
    if pt.shape != p_student.shape:
        raise ShapeMismatch(f"{pt.shape} vs {p_student.shape}")
    ps = p_student.data
    B = ps.shape[0]
    value = (xlogy(pt, pt) - xlogy(pt, ps)).sum() / B

    def bw(g):
        return (-g * np.divide(pt, ps, out=np.zeros_like(ps), where=pt > 0) / B,)

    return Tensor._node(np.asarray(value, dtype=ps.dtype), (p_student,), bw, "kl_div")


def soft_kl(student_logits: Tensor, teacher_logits, temperature: float) -> Tensor:
    """KL(softmax(teacher/T) || softmax(student/T)) via a fused log-softmax on the student side."""
    t = teacher_logits.data if isinstance(teacher_logits, Tensor) else np.asarray(teacher_logits)
    pt = F.softmax(Tensor(t, dtype=student_logits.dtype), temperature).data
    log_ps = F.log_softmax(student_logits, temperature)
    B = student_logits.shape[0]
    neg_entropy = Tensor(np.asarray(xlogy(pt, pt).sum() / B, dtype=pt.dtype))
    return neg_entropy - (Tensor(pt) * log_ps).sum() * (1.0 / B)


def kd_total_loss(student_logits: Tensor, teacher_logits, labels, temperature: float, alpha: float) -> Tensor:
    """(1 - alpha) * CE(labels, student at T=1) + alpha * T^2 * KL(teacher_T || student_T).

    The teacher logits never receive gradient. ``alpha == 0`` returns the
    cross-entropy node itself, so the student update is identical to plain
    supervised training.
    """
    if not temperature > 0:
        raise InvalidParameter(f"temperature must be > 0, got {temperature}")
    if not 0.0 <= alpha <= 1.0:
        raise InvalidParameter(f"alpha must be in [0, 1], got {alpha}")
    if alpha == 0.0:
        return cross_entropy(student_logits, labels)
    kd = soft_kl(student_logits, teacher_logits, temperature) * (alpha * temperature**2)
    if alpha == 1.0:
        _check_labels(labels, student_logits.shape[1])
        return kd
    return cross_entropy(student_logits, labels) * (1.0 - alpha) + kd


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0


def adamw_step(
    params: list[np.ndarray],
    grads: list[np.ndarray],
    state: AdamState,
    lr: float,
    weight_decay: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> list[np.ndarray]:
    """One AdamW update with decoupled weight decay; advances ``state.step``.

    theta <- theta - lr*wd*theta - lr * m_hat / (sqrt(v_hat) + eps)
    """
    state.step += 1
    t = state.step
    bc1 = 1.0 - beta1**t
    bc2 = 1.0 - beta2**t
    out = []
    for i, (p, g) in enumerate(zip(params, grads)):
        if p.shape != g.shape or state.m[i].shape != p.shape:
            raise ShapeMismatch(f"param {i}: shape {p.shape}, grad {g.shape}, moment {state.m[i].shape}")
        m = state.m[i]
        v = state.v[i]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        update = (m / bc1) / (np.sqrt(v / bc2) + eps)
        out.append(p - lr * weight_decay * p - lr * update)
    return out


class AdamW:
    def __init__(self, params, lr: float, weight_decay: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.weight_decay = weight_decay
        self.betas = betas
        self.eps = eps
        self.state = AdamState([np.zeros_like(p.data) for p in self.params], [np.zeros_like(p.data) for p in self.params])

    def step(self):
        grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in self.params]
        new = adamw_step(
            [p.data for p in self.params], grads, self.state, self.lr, self.weight_decay, *self.betas, self.eps
        )
        for p, d in zip(self.params, new):
            p.data = d.astype(p.data.dtype, copy=False)

    def zero_grad(self):
        for p in self.params:
            p.grad = None


# ---------------------------------------------------------------------------
# training loops
# ---------------------------------------------------------------------------


@dataclass
class TrainState:
    epoch: int = 0
    best_metric: float = float("-inf")
    best_epoch: int = -1
    since_improvement: int = 0
    history: list[dict] = field(default_factory=list)
    optimizer: AdamW | None = None

    def metric_history(self) -> list[dict]:
        """History without wall-clock fields (what goes into checkpoints)."""
        return [{k: v for k, v in h.items() if k != "wall_time"} for h in self.history]


def early_stopping_check(state: TrainState, new_metric: float, patience: int) -> str:
    """Record one epoch's validation metric; ``"stop"`` after ``patience`` epochs without strict improvement."""
    if patience < 1:
        raise InvalidParameter(f"patience must be >= 1, got {patience}")
    if new_metric > state.best_metric:
        state.best_metric = new_metric
        state.since_improvement = 0
    else:
        state.since_improvement += 1
    return "stop" if state.since_improvement >= patience else "continue"


def predict_logits(model: Module, images: np.ndarray, batch_size: int = 64) -> np.ndarray:
    out = []
    with no_grad():
        for start in range(0, len(images), batch_size):
            out.append(model(Tensor(images[start : start + batch_size])).data)
    if not out:
        return np.zeros((0, model.config.num_classes), dtype=np.float32)
    return np.concatenate(out)


def accuracy(model: Module, dataset: Dataset, split: str, batch_size: int = 64) -> float:
    images, labels = dataset.split_arrays(split)
    if len(labels) == 0:
        raise EmptyDataset(f"split {split!r} is empty")
    preds = predict_logits(model, images, batch_size).argmax(axis=1)
    return float((preds == labels).mean())


def _snapshot(model: Module) -> list[np.ndarray]:
    return [p.data.copy() for p in model.parameters()]


def _restore(model: Module, snap: list[np.ndarray]):
    for p, d in zip(model.parameters(), snap):
        p.data = d


LossFn = Callable[[Tensor, np.ndarray, np.ndarray], Tensor]


def fit(
    model: Module,
    dataset: Dataset,
    loss_fn: LossFn,
    lr: float,
    epochs: int,
    cfg: DistillConfig,
    on_epoch: Callable[[dict], None] | None = None,
) -> TrainState:
    """Generic mini-batch loop; ``loss_fn(logits, labels, sample_indices)``.

    Keeps the parameters of the earliest epoch with the best validation
    accuracy and restores them before returning.
    """
    for split in ("train", "val"):
        if not dataset.manifest.indices(split):
            raise EmptyDataset(f"split {split!r} is empty")
    opt = AdamW(model.parameters(), lr, cfg.weight_decay)
    state = TrainState(optimizer=opt)
    best = _snapshot(model)
    train_idx = np.array(dataset.manifest.indices("train"))
    # map dataset row -> position in the train split (for per-sample caches)
    position = np.full(len(dataset), -1)
    position[train_idx] = np.arange(train_idx.size)
    for epoch in range(epochs):
        t0 = time.perf_counter()
        total, count = 0.0, 0
        for rows in batch_indices(dataset, "train", cfg.batch_size, cfg.seed, epoch):
            xb = Tensor(dataset.images[rows])
            yb = dataset.labels[rows]
            opt.zero_grad()
            loss = loss_fn(model(xb), yb, position[rows])
            loss.backward()
            opt.step()
            total += float(loss.data) * len(rows)
            count += len(rows)
        val_acc = accuracy(model, dataset, "val", max(cfg.batch_size, 64))
        state.epoch = epoch + 1
        record = {
            "epoch": epoch + 1,
            "train_loss": total / count,
            "val_acc": val_acc,
            "lr": lr,
            "wall_time": time.perf_counter() - t0,
        }
        state.history.append(record)
        if on_epoch:
            on_epoch(record)
        log.info("epoch %d loss %.4f val_acc %.4f", epoch + 1, record["train_loss"], val_acc)
        improved = val_acc > state.best_metric
        decision = early_stopping_check(state, val_acc, cfg.patience)
        if improved:
            state.best_epoch = epoch + 1
            best = _snapshot(model)
        if decision == "stop":
            break
    _restore(model, best)
    return state


def train_teacher(
    dataset: Dataset, cfg: DistillConfig, teacher_cfg: ModelConfig, on_epoch=None
) -> tuple[Module, TrainState]:
    """Supervised cross-entropy training of the teacher."""
    cfg.validate()
    model = build_model(teacher_cfg, Rng(cfg.seed))

    def loss_fn(logits, labels, _rows):
        return cross_entropy(logits, labels)

    state = fit(model, dataset, loss_fn, cfg.lr_teacher, cfg.epochs_teacher, cfg, on_epoch)
    return model, state


def train_baseline(
    dataset: Dataset, cfg: DistillConfig, student_cfg: ModelConfig, on_epoch=None
) -> tuple[Module, TrainState]:
    """The student trained on labels only (no teacher)."""
    cfg.validate()
    model = build_model(student_cfg, Rng(cfg.seed))

    def loss_fn(logits, labels, _rows):
        return cross_entropy(logits, labels)

    state = fit(model, dataset, loss_fn, cfg.lr_student, cfg.epochs_student, cfg, on_epoch)
    return model, state


def distill_student(
    dataset: Dataset, cfg: DistillConfig, student_cfg: ModelConfig, teacher: Module, on_epoch=None
) -> tuple[Module, TrainState]:
    """Train the student against labels and the frozen teacher's softened outputs."""
    cfg.validate()
    if teacher.config.num_classes != student_cfg.num_classes:
        raise InvalidConfig(
            f"teacher predicts {teacher.config.num_classes} classes, student {student_cfg.num_classes}"
        )
    if dataset.num_classes != student_cfg.num_classes:
        raise InvalidConfig(f"dataset has {dataset.num_classes} classes, student {student_cfg.num_classes}")
    model = build_model(student_cfg, Rng(cfg.seed))
    # teacher is frozen and deterministic, so its logits are computed once per training sample
    train_images, _ = dataset.split_arrays("train")
    teacher_logits = predict_logits(teacher, train_images, max(cfg.batch_size, 64)).astype(np.float64)

    def loss_fn(logits, labels, rows):
        return kd_total_loss(logits, teacher_logits[rows], labels, cfg.temperature, cfg.alpha)

    state = fit(model, dataset, loss_fn, cfg.lr_student, cfg.epochs_student, cfg, on_epoch)
    return model, state


def write_history(path, history: list[dict]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w") as fh:
        for rec in history:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    return path
