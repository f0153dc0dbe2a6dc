"""Synthetic common corruptions with five severity levels.

Images are ``(N, C, H, W)`` arrays with values in [0, 1].  Severity 0 is the
identity.  Random draws depend on ``(seed, family)`` only, so higher
severities scale the same underlying noise.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.fft import dctn, idctn
from scipy.ndimage import convolve

from .data import component_rng
from .tensor import Tensor

# per-family parameter for severities 1..5
SEVERITY_TABLE: dict[str, tuple[float, ...]] = {
    "gaussian_noise": (0.08, 0.12, 0.18, 0.26, 0.38),  # noise std
    "shot_noise": (60.0, 25.0, 12.0, 5.0, 3.0),  # photons per unit intensity (fewer = noisier)
    "impulse_noise": (0.03, 0.06, 0.09, 0.17, 0.27),  # fraction of salt-and-pepper pixels
    "defocus_blur": (1.0, 1.5, 2.0, 2.5, 3.0),  # disk radius in pixels
    "brightness": (0.1, 0.2, 0.3, 0.4, 0.5),  # additive shift
    "contrast": (0.4, 0.3, 0.2, 0.1, 0.05),  # deviation scale around the channel mean
    "pixelate": (0.6, 0.5, 0.4, 0.3, 0.25),  # kept linear resolution fraction
    "jpeg_block": (0.25, 0.5, 1.0, 2.0, 4.0),  # quantization-table multiplier
}
FAMILIES = tuple(SEVERITY_TABLE)

_ALIASES = {"jpeg": "jpeg_block", "jpeg_like_block": "jpeg_block"}

# standard 8x8 luminance quantization table, rescaled to unit-range pixels
_JPEG_Q = (
    np.array(
        [
            [16, 11, 10, 16, 24, 40, 51, 61],
            [12, 12, 14, 19, 26, 58, 60, 55],
            [14, 13, 16, 24, 40, 57, 69, 56],
            [14, 17, 22, 29, 51, 87, 80, 62],
            [18, 22, 37, 56, 68, 109, 103, 77],
            [24, 35, 55, 64, 81, 104, 113, 92],
            [49, 64, 78, 87, 103, 121, 120, 101],
            [72, 92, 95, 98, 112, 100, 103, 99],
        ],
        dtype=np.float64,
    )
    / 255.0
)


def canonical_family(name: str) -> str:
    key = name.strip().lower().replace("-", "_")
    key = _ALIASES.get(key, key)
    if key not in SEVERITY_TABLE:
        raise ValueError(f"unknown corruption family {name!r}; choose from {', '.join(FAMILIES)}")
    return key


@dataclass(frozen=True)
class CorruptionSpec:
    family: str
    severity: int
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "family", canonical_family(self.family))
        if not 0 <= self.severity <= 5:
            raise ValueError(f"severity must be in 0..5, got {self.severity}")


def _disk(radius: float) -> np.ndarray:
    r = int(np.ceil(radius))
    yy, xx = np.mgrid[-r : r + 1, -r : r + 1]
    k = (yy**2 + xx**2 <= radius**2).astype(np.float64)
    return k / k.sum()


def _partition(size: int, cells: int) -> np.ndarray:
    """Cell index of each pixel when ``size`` pixels are split into ``cells`` runs."""
    edges = np.round(np.linspace(0, size, cells + 1)).astype(int)
    return np.searchsorted(edges, np.arange(size), side="right") - 1


def _pixelate(x: np.ndarray, frac: float) -> np.ndarray:
    n, c, h, w = x.shape
    rows = _partition(h, max(1, int(round(h * frac))))
    cols = _partition(w, max(1, int(round(w * frac))))
    nr, nc = rows.max() + 1, cols.max() + 1
    acc = np.zeros((n, c, nr, nc))
    np.add.at(acc, (slice(None), slice(None), rows[:, None], cols[None, :]), x)
    counts = np.bincount(rows)[:, None] * np.bincount(cols)[None, :]
    return (acc / counts)[:, :, rows][:, :, :, cols]


def _jpeg_block(x: np.ndarray, scale: float) -> np.ndarray:
    n, c, h, w = x.shape
    ph, pw = -h % 8, -w % 8
    xp = np.pad(x, ((0, 0), (0, 0), (0, ph), (0, pw)), mode="edge") - 0.5
    H, W = xp.shape[2:]
    blocks = xp.reshape(n, c, H // 8, 8, W // 8, 8).transpose(0, 1, 2, 4, 3, 5)
    coef = dctn(blocks, axes=(-2, -1), norm="ortho")
    q = _JPEG_Q * scale
    coef = np.round(coef / q) * q
    rec = idctn(coef, axes=(-2, -1), norm="ortho").transpose(0, 1, 2, 4, 3, 5).reshape(n, c, H, W)
    return rec[:, :, :h, :w] + 0.5


def _apply(x: np.ndarray, family: str, level: float, rng: np.random.Generator) -> np.ndarray:
    if family == "gaussian_noise":
        return x + level * rng.standard_normal(x.shape)
    if family == "shot_noise":
        return rng.poisson(np.clip(x, 0, None) * level) / level
    if family == "impulse_noise":
        u = rng.random(x.shape)
        salt = rng.random(x.shape) < 0.5
        out = x.copy()
        hit = u < level
        out[hit] = salt[hit].astype(x.dtype)
        return out
    if family == "defocus_blur":
        k = _disk(level)[None, None]
        return convolve(x, k, mode="reflect")
    if family == "brightness":
        return x + level
    if family == "contrast":
        mean = x.mean(axis=(2, 3), keepdims=True)
        return (x - mean) * level + mean
    if family == "pixelate":
        return _pixelate(x, level)
    if family == "jpeg_block":
        return _jpeg_block(x, level)
    raise ValueError(family)


def corrupt(image, spec: CorruptionSpec):
    """Apply ``spec`` to an ``(N,C,H,W)`` array or Tensor; the result is clamped to [0, 1]."""
    is_tensor = isinstance(image, Tensor)
    x = image.data if is_tensor else np.asarray(image)
    if x.ndim != 4:
        raise ValueError(f"expected (N,C,H,W) images, got shape {x.shape}")
    if spec.severity == 0:
        out = x.copy()
    else:
        level = SEVERITY_TABLE[spec.family][spec.severity - 1]
        out = _apply(x.astype(np.float64), spec.family, level, component_rng(spec.seed, spec.family))
        out = np.clip(out, 0.0, 1.0).astype(x.dtype)
    return Tensor(out) if is_tensor else out
