"""Desk-scale training loop: augmentation, label smoothing, optional distillation, AdamW + cosine."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .augment import mixup_cutmix, random_erasing
from .data import Dataset, component_rng
from .evaluate import top1_error
from .layers import DropPath
from .losses import DistillConfig, cross_entropy, kd_loss, one_hot
from .optim import AdamWState, TrainConfig, adamw_step, cosine_lr
from .tensor import Tensor, backward, no_grad, reset_tape

log = logging.getLogger(__name__)

OMITTED = "RandAugment and Repeated Augmentation are not implemented; training uses MixUp/CutMix, Random Erasing, label smoothing and stochastic depth only"


@dataclass
class EpochMetrics:
    epoch: int
    lr: float
    train_loss: float
    train_acc: float
    val_acc: float

    def tsv(self) -> str:
        return f"{self.epoch}\t{self.lr:.6g}\t{self.train_loss:.6f}\t{self.train_acc:.4f}\t{self.val_acc:.4f}"


@dataclass
class TrainResult:
    model: object
    log: list[EpochMetrics] = field(default_factory=list)

    def to_tsv(self) -> str:
        return "".join(m.tsv() + "\n" for m in self.log)


def banner(config: TrainConfig, distill: DistillConfig | None = None) -> str:
    lines = [
        f"AdamW lr={config.base_lr:g} (min {config.min_lr:g}, warmup {config.warmup_epochs} ep) "
        f"wd={config.weight_decay:g} betas={config.betas} epochs={config.epochs} batch={config.batch_size}",
        f"mixup={config.mixup_alpha:g} cutmix={config.cutmix_alpha:g} erase={config.erase_prob:g} "
        f"smoothing={config.label_smoothing:g} drop_path={config.drop_path:g} seed={config.seed}",
        f"deviation: {OMITTED}",
    ]
    if distill is not None:
        lines.append(f"distillation: soft KD, temperature={distill.temperature:g}, weight={distill.weight:g}")
    return "\n".join(lines)


def _no_decay(name: str, p) -> bool:
    # BN affine terms and biases are (1, C, 1, 1)
    return p.shape[0] == 1 and p.shape[2:] == (1, 1)


def train(
    model,
    data: Dataset,
    config: TrainConfig,
    distill: DistillConfig | None = None,
    val: Dataset | None = None,
) -> TrainResult:
    """Train ``model`` in place; deterministic for a given ``config.seed``."""
    config.validate()
    result = TrainResult(model)
    if config.epochs == 0:
        return result
    n = len(data)
    if n < 2:
        raise ValueError("training needs at least two samples")
    log.info("%s", banner(config, distill))

    bs = min(config.batch_size, n)
    steps_per_epoch = n // bs
    total = config.epochs * steps_per_epoch
    warmup = config.warmup_epochs * steps_per_epoch
    k = data.num_classes

    order_rng = component_rng(config.seed, "order")
    aug_rng = component_rng(config.seed, "augment")
    model.set_rng(component_rng(config.seed, "drop_path"))
    for m in model.modules():
        if isinstance(m, DropPath):
            m.rate = config.drop_path
    if distill is not None:
        distill.teacher.eval()

    names, params = zip(*model.named_parameters())
    decay = [not _no_decay(nm, p) for nm, p in zip(names, params)]
    state = AdamWState.for_params(params)

    step = 0
    for epoch in range(1, config.epochs + 1):
        model.train()
        perm = order_rng.permutation(n)
        losses, correct, seen = [], 0, 0
        lr = config.base_lr
        for b in range(steps_per_epoch):
            idx = perm[b * bs : (b + 1) * bs]
            x, y = data.images[idx], data.labels[idx]
            x, y_a, y_b, lam = mixup_cutmix(x, y, config, aug_rng)
            if config.erase_prob > 0:
                x = random_erasing(x, config.erase_prob, aug_rng)
            targets = lam * one_hot(y_a, k, config.label_smoothing) + (1 - lam) * one_hot(
                y_b, k, config.label_smoothing
            )

            lr = cosine_lr(step, total, config, warmup)
            reset_tape()
            model.zero_grad()
            xt = Tensor(x.astype(params[0].dtype, copy=False))
            try:
                logits = model(xt)
                if distill is None:
                    loss = cross_entropy(logits, targets)
                else:
                    with no_grad():
                        t_logits = distill.teacher(xt)
                    loss = kd_loss(logits, t_logits, targets, distill.temperature, distill.weight)
            except FloatingPointError as exc:
                raise FloatingPointError(f"loss diverged at step {step}: {exc}") from exc
            value = loss.item()
            if not math.isfinite(value):
                raise FloatingPointError(f"loss diverged at step {step}")
            backward(loss)
            try:
                adamw_step(params, [p.grad for p in params], state, lr, config, decay, names)
            except FloatingPointError as exc:
                raise FloatingPointError(f"step {step}: {exc}") from exc

            pred = logits.data.reshape(len(idx), -1).argmax(axis=1)
            correct += int(np.sum(pred == (y_a if lam >= 0.5 else y_b)))
            seen += len(idx)
            losses.append(value)
            step += 1

        val_acc = float("nan")
        if val is not None:
            val_acc = 100.0 - top1_error(model, val.images, val.labels)
        metrics = EpochMetrics(epoch, lr, float(np.mean(losses)), 100.0 * correct / seen, val_acc)
        result.log.append(metrics)
        log.info("epoch %s", metrics.tsv())
    model.eval()
    return result
