"""Batch-level MixUp/CutMix and per-sample random erasing on ``(N,C,H,W)`` arrays."""

from __future__ import annotations

import math

import numpy as np


def mixup(x: np.ndarray, perm: np.ndarray, lam: float) -> np.ndarray:
    return lam * x + (1.0 - lam) * x[perm]


def cutmix(x: np.ndarray, perm: np.ndarray, box: tuple[int, int, int, int]) -> tuple[np.ndarray, float]:
    """Paste ``box = (y0, y1, x0, x1)`` from the permuted batch; returns the kept-area fraction."""
    y0, y1, x0, x1 = box
    out = x.copy()
    out[:, :, y0:y1, x0:x1] = x[perm][:, :, y0:y1, x0:x1]
    h, w = x.shape[2:]
    return out, 1.0 - (y1 - y0) * (x1 - x0) / (h * w)


def _cut_box(h: int, w: int, lam: float, rng: np.random.Generator) -> tuple[int, int, int, int]:
    ratio = math.sqrt(1.0 - lam)
    ch, cw = int(h * ratio), int(w * ratio)
    cy, cx = rng.integers(h), rng.integers(w)
    return (
        int(np.clip(cy - ch // 2, 0, h)),
        int(np.clip(cy + ch // 2, 0, h)),
        int(np.clip(cx - cw // 2, 0, w)),
        int(np.clip(cx + cw // 2, 0, w)),
    )


def mixup_cutmix(x: np.ndarray, y: np.ndarray, config, rng: np.random.Generator):
    """Mix a batch with a random permutation of itself.

    Picks MixUp or CutMix with equal odds when both alphas are positive.
    Returns ``(x_mixed, y, y_perm, lam)``; the loss is
    ``lam * CE(y) + (1 - lam) * CE(y_perm)``.
    """
    n = x.shape[0]
    if n < 2:
        raise ValueError("mixing needs a batch of at least 2")
    ma, ca = config.mixup_alpha, config.cutmix_alpha
    if ma <= 0 and ca <= 0:
        return x, y, y, 1.0
    perm = rng.permutation(n)
    use_cutmix = ca > 0 and (ma <= 0 or rng.random() < 0.5)
    if use_cutmix:
        lam = float(rng.beta(ca, ca))
        xm, lam = cutmix(x, perm, _cut_box(x.shape[2], x.shape[3], lam, rng))
    else:
        lam = float(rng.beta(ma, ma))
        xm = mixup(x, perm, lam)
    return xm.astype(x.dtype, copy=False), y, y[perm], lam


def random_erasing(
    x: np.ndarray,
    prob: float,
    rng: np.random.Generator,
    area=(0.02, 1 / 3),
    aspect=(0.3, 3.3),
    return_boxes: bool = False,
):
    """Overwrite one random rectangle per selected sample with uniform noise."""
    out = x.copy()
    n, c, h, w = x.shape
    boxes: list[tuple[int, int, int, int] | None] = []
    log_ar = (math.log(aspect[0]), math.log(aspect[1]))
    for i in range(n):
        if rng.random() >= prob:
            boxes.append(None)
            continue
        for _ in range(10):
            target = rng.uniform(*area) * h * w
            ar = math.exp(rng.uniform(*log_ar))
            eh, ew = int(round(math.sqrt(target * ar))), int(round(math.sqrt(target / ar)))
            if 0 < eh < h and 0 < ew < w:
                break
        else:
            eh, ew = max(1, h // 2), max(1, w // 2)
        top, left = int(rng.integers(0, h - eh + 1)), int(rng.integers(0, w - ew + 1))
        out[i, :, top : top + eh, left : left + ew] = rng.random((c, eh, ew))
        boxes.append((top, top + eh, left, left + ew))
    return (out, boxes) if return_boxes else out
