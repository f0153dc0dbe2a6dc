"""AdamW with decoupled weight decay and a warmup + cosine learning-rate schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


@dataclass
class TrainConfig:
    epochs: int = 300
    batch_size: int = 128
    base_lr: float = 5e-4
    min_lr: float = 1e-5
    warmup_epochs: int = 5
    weight_decay: float = 0.05
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    mixup_alpha: float = 0.8
    cutmix_alpha: float = 1.0
    erase_prob: float = 0.25
    drop_path: float = 0.1
    label_smoothing: float = 0.1
    seed: int = 0

    def __post_init__(self):
        self.betas = tuple(float(b) for b in self.betas)
        self.validate()

    def validate(self) -> None:
        if self.epochs < 0 or self.batch_size < 1 or self.warmup_epochs < 0:
            raise ValueError("epochs/warmup must be >= 0 and batch_size >= 1")
        if not self.base_lr > self.min_lr >= 0:
            raise ValueError(f"need base_lr > min_lr >= 0, got {self.base_lr}, {self.min_lr}")
        for name in ("erase_prob", "drop_path", "label_smoothing"):
            v = getattr(self, name)
            if not 0 <= v <= 1:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")
        if self.drop_path >= 1:
            raise ValueError("drop_path must be < 1")
        if not all(0 <= b < 1 for b in self.betas):
            raise ValueError("betas must lie in [0, 1)")
        if self.mixup_alpha < 0 or self.cutmix_alpha < 0 or self.weight_decay < 0:
            raise ValueError("alphas and weight_decay must be non-negative")


def cosine_lr(t: int, total: int, config: TrainConfig, warmup: int | None = None) -> float:
    """Learning rate at step ``t`` of ``total``; ``warmup`` is in steps (default: none)."""
    if not 0 <= t <= total:
        raise ValueError(f"step {t} outside [0, {total}]")
    w = warmup or 0
    if t < w:
        return config.base_lr * t / w
    span = total - w
    progress = 1.0 if span <= 0 else (t - w) / span
    if progress >= 1.0:
        return config.min_lr
    return config.min_lr + 0.5 * (config.base_lr - config.min_lr) * (1.0 + math.cos(math.pi * progress))


@dataclass
class AdamWState:
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    @classmethod
    def for_params(cls, params) -> "AdamWState":
        return cls(0, [np.zeros_like(p.data) for p in params], [np.zeros_like(p.data) for p in params])


def adamw_step(params, grads, state: AdamWState, lr: float, config: TrainConfig, decay=None, names=None) -> None:
    """In-place AdamW update of ``params`` (tensors) from ``grads`` (arrays or None).

    ``decay`` optionally masks weight decay per parameter.
    """
    if len(state.m) != len(params):
        raise ValueError("optimizer state does not match parameter list")
    b1, b2 = config.betas
    state.step += 1
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is not None and not np.isfinite(g).all():
            label = names[i] if names else f"#{i}"
            raise FloatingPointError(f"non-finite gradient in parameter {label} at optimizer step {state.step}")
    for i, (p, g) in enumerate(zip(params, grads)):
        if state.m[i].shape != p.data.shape:
            raise ValueError(f"moment shape {state.m[i].shape} != parameter shape {p.data.shape}")
        wd = config.weight_decay if decay is None or decay[i] else 0.0
        if g is None:
            g = np.zeros_like(p.data)
        m, v = state.m[i], state.v[i]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        update = (m / c1) / (np.sqrt(v / c2) + config.eps) + wd * p.data
        p.data -= (lr * update).astype(p.data.dtype, copy=False)
