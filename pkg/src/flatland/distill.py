"""Self-distillation against an EMA teacher.

The student minimizes ``CE(student, y) + kd_weight * KL(p_T || p_S)`` where
``p = softmax(logits / temperature)``; the teacher never receives gradients
and instead tracks the student via ``theta_T <- rho*theta_T + (1-rho)*theta_S``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor


@dataclass(frozen=True)
class DistillConfig:
    temperature: float = 5.0
    kd_weight: float = 1.0
    ema_decay: float = 0.999
    kl_literal_order: bool = False
    # multiply the KL term by temperature**2 (off: not part of the loss as published)
    tau_squared: bool = False

    def __post_init__(self):
        if self.temperature <= 0:
            raise ValueError(f"temperature must be positive, got {self.temperature}")
        if self.kd_weight < 0:
            raise ValueError("kd_weight must be nonnegative")
        if not 0.0 <= self.ema_decay <= 1.0:
            raise ValueError(f"ema_decay must lie in [0, 1], got {self.ema_decay}")


def as_targets(labels, num_classes: int) -> np.ndarray:
    """Class indices or (N, C) label distributions -> (N, C) float64 rows."""
    labels = np.asarray(labels)
    if labels.ndim == 1:
        out = np.zeros((labels.shape[0], num_classes))
        out[np.arange(labels.shape[0]), labels.astype(int)] = 1.0
        return out
    if labels.ndim != 2 or labels.shape[1] != num_classes:
        raise T.ShapeError(f"labels of shape {labels.shape} do not match {num_classes} classes")
    return labels.astype(np.float64)


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Batch-mean cross-entropy; labels may be indices or soft rows."""
    n, c = logits.shape
    y = as_targets(labels, c)
    return T.scale(T.sum_(T.mul(T.log_softmax(logits), Tensor(-y, dtype=logits.dtype))), 1.0 / n)


def _logits_array(logits) -> np.ndarray:
    return logits.data if isinstance(logits, Tensor) else np.asarray(logits)


def kl_term(student_logits: Tensor, teacher_logits, cfg: DistillConfig) -> Tensor:
    """Batch-mean KL between temperature-softened distributions.

    Default is ``KL(p_teacher || p_student)``; ``kl_literal_order`` swaps the
    arguments.  The teacher side is a constant.  Both sides go through the
    same ops so identical logits give an exactly zero term.
    """
    n = student_logits.shape[0]
    inv_tau = 1.0 / cfg.temperature
    with T.no_grad():
        teacher = Tensor(_logits_array(teacher_logits), dtype=student_logits.dtype)
        log_pt = T.log_softmax(T.scale(teacher, inv_tau)).data
    log_ps = T.log_softmax(T.scale(student_logits, inv_tau))
    if cfg.kl_literal_order:
        ps = T.exp(log_ps)
        kl = T.sum_(T.mul(ps, T.add(log_ps, Tensor(-log_pt, dtype=log_pt.dtype))))
    else:
        pt = np.exp(log_pt)
        kl = T.sum_(T.mul(Tensor(pt, dtype=pt.dtype), T.add(Tensor(log_pt, dtype=log_pt.dtype), T.neg(log_ps))))
    scale = 1.0 / n
    if cfg.tau_squared:
        scale *= cfg.temperature ** 2
    return T.scale(kl, scale)


def mesa_loss(student_logits: Tensor, teacher_logits, labels, cfg: DistillConfig) -> Tensor:
    if student_logits.shape != np.shape(_logits_array(teacher_logits)):
        raise T.ShapeError("student and teacher logits must have the same shape")
    ce = cross_entropy(student_logits, labels)
    if cfg.kd_weight == 0:
        return ce
    kd = kl_term(student_logits, teacher_logits, cfg)
    if cfg.kd_weight != 1:
        kd = T.scale(kd, cfg.kd_weight)
    return T.add(ce, kd)


class TeacherState:
    """EMA shadow of a student model.

    ``model`` is a structural copy of the student whose parameter arrays are
    the shadow weights; ``shadow`` maps parameter names to those arrays.
    BatchNorm running statistics are averaged with the same decay.
    """

    def __init__(self, student, ema_decay: float = 0.999):
        if not 0.0 <= ema_decay <= 1.0:
            raise ValueError(f"ema_decay must lie in [0, 1], got {ema_decay}")
        self.model = student.copy()
        self.model.eval()
        self.ema_decay = ema_decay
        for p in self.model.parameters():
            p.requires_grad = False
            p.grad.fill(0.0)  # the copy would otherwise carry the student's accumulators

    @property
    def shadow(self) -> dict[str, np.ndarray]:
        return {name: p.data for name, p in self.model.named_parameters().items()}

    def logits(self, x) -> np.ndarray:
        with T.no_grad():
            return self.model(x).data


def ema_update(teacher: TeacherState, student) -> None:
    rho = teacher.ema_decay
    shadow = teacher.shadow
    params = student.named_parameters()
    if set(shadow) != set(params):
        raise KeyError(f"teacher/student parameter sets differ: {sorted(set(shadow) ^ set(params))[:5]}")
    for name, p in params.items():
        t = shadow[name]
        if t.shape != p.shape:
            raise T.ShapeError(f"{name}: teacher {t.shape} vs student {p.shape}")
        t[...] = rho * t + (1.0 - rho) * p.data
    tb, sb = teacher.model.buffers(), student.buffers()
    for name, b in sb.items():
        tb[name][...] = rho * tb[name] + (1.0 - rho) * b


def mesa_train_step(student, teacher: TeacherState, batch, cfg: DistillConfig, optimizer) -> float:
    """One gradient step on the student, then one EMA update of the teacher."""
    x, labels = batch
    teacher_logits = teacher.logits(x) if cfg.kd_weight else None
    logits = student(x)
    if teacher_logits is None:
        loss = cross_entropy(logits, labels)
    else:
        loss = mesa_loss(logits, teacher_logits, labels, cfg)
    optimizer.zero_grad()
    T.backward(loss)
    optimizer.step()
    ema_update(teacher, student)
    return loss.item()
