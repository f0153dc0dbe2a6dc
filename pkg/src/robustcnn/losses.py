"""Classification and distillation losses over ``(N, K, 1, 1)`` logits."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import log_softmax, softmax

from .tensor import Tensor, record


def one_hot(labels, num_classes: int, smoothing: float = 0.0) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    out = np.full((labels.size, num_classes), smoothing / num_classes)
    out[np.arange(labels.size), labels] += 1.0 - smoothing
    return out


def _as_targets(y, n: int, k: int) -> np.ndarray:
    y = np.asarray(y)
    if y.ndim == 1:
        return one_hot(y, k)
    y = y.reshape(n, k)
    return y


def cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean soft-target cross-entropy; ``targets`` are labels ``(N,)`` or probabilities ``(N,K)``."""
    n, k = logits.shape[:2]
    z = logits.data.reshape(n, k).astype(np.float64)
    y = _as_targets(targets, n, k)
    logp = log_softmax(z, axis=1)
    loss = -(y * logp).sum() / n

    def back(g):
        grad = (softmax(z, axis=1) * y.sum(axis=1, keepdims=True) - y) / n
        return ((g.reshape(()) * grad).reshape(logits.shape).astype(logits.dtype),)

    return record("cross_entropy", np.array(loss, dtype=logits.dtype).reshape(1, 1, 1, 1), (logits,), back)


def kl_divergence(student: Tensor, teacher, temperature: float = 1.0) -> Tensor:
    """Mean over the batch of KL(softmax(teacher/T) || softmax(student/T)); no gradient to the teacher."""
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    n, k = student.shape[:2]
    t = teacher.data if isinstance(teacher, Tensor) else np.asarray(teacher)
    zs = student.data.reshape(n, k).astype(np.float64) / temperature
    zt = t.reshape(n, k).astype(np.float64) / temperature
    pt = softmax(zt, axis=1)
    # difference of log-softmaxes is exactly zero for identical logits
    kl = (pt * (log_softmax(zt, axis=1) - log_softmax(zs, axis=1))).sum() / n

    def back(g):
        grad = (softmax(zs, axis=1) - pt) / (n * temperature)
        return ((g.reshape(()) * grad).reshape(student.shape).astype(student.dtype),)

    out = np.array(max(kl, 0.0), dtype=student.dtype).reshape(1, 1, 1, 1)
    return record("kl_divergence", out, (student,), back)


@dataclass
class DistillConfig:
    teacher: object
    temperature: float = 1.0
    weight: float = 0.5

    def __post_init__(self):
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if not 0 <= self.weight <= 1:
            raise ValueError("distillation weight must lie in [0, 1]")


def kd_loss(student: Tensor, teacher, targets, temperature: float = 1.0, weight: float = 0.5) -> Tensor:
    """``(1-w) * CE(student, targets) + w * T^2 * KL(teacher_T || student_T)``."""
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    t = teacher.data if isinstance(teacher, Tensor) else np.asarray(teacher)
    if t.size != student.data.size:
        raise ValueError("student and teacher logits must have the same shape")
    ce = cross_entropy(student, targets)
    if weight == 0:
        return ce
    kl = kl_divergence(student, t, temperature)
    if weight == 1:
        return kl * (temperature**2)
    return ce * (1.0 - weight) + kl * (weight * temperature**2)
