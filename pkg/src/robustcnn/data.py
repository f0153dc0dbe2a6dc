"""Labeled image datasets on disk and seeded random streams."""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T

MANIFEST = "manifest.tsv"


def component_rng(seed: int, component: str) -> np.random.Generator:
    """Independent counter-based stream for ``component`` under a global ``seed``."""
    return np.random.Generator(np.random.Philox(key=[int(seed), zlib.crc32(component.encode())]))


@dataclass
class Dataset:
    images: np.ndarray  # (N, C, H, W) float32 in [0, 1]
    labels: np.ndarray  # (N,) int64
    classes: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4 or len(self.images) != len(self.labels):
            raise ValueError("images must be (N,C,H,W) with one label per image")
        if not self.classes and len(self.labels):
            self.classes = [str(i) for i in range(int(self.labels.max()) + 1)]

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def num_classes(self) -> int:
        return len(self.classes)

    def subset(self, idx) -> "Dataset":
        return Dataset(self.images[idx], self.labels[idx], list(self.classes))


def save_dataset(root, data: Dataset) -> None:
    """Write one RBT1 tensor per image under ``<root>/<class>/`` plus ``manifest.tsv``."""
    root = Path(root)
    lines = []
    for i, (img, label) in enumerate(zip(data.images, data.labels)):
        rel = Path(data.classes[label]) / f"{i:06d}.rbt"
        (root / rel.parent).mkdir(parents=True, exist_ok=True)
        (root / rel).write_bytes(T.to_bytes(img[None]))
        lines.append(f"{rel.as_posix()}\t{int(label)}")
    root.mkdir(parents=True, exist_ok=True)
    (root / MANIFEST).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_dataset(root) -> Dataset:
    root = Path(root)
    manifest = root / MANIFEST
    if not manifest.is_file():
        raise FileNotFoundError(f"{root}: no {MANIFEST}")
    images, labels, names = [], [], {}
    for lineno, line in enumerate(manifest.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        try:
            rel, label = line.split("\t")
            label = int(label)
        except ValueError:
            raise ValueError(f"{manifest}:{lineno}: expected 'path<TAB>label'") from None
        images.append(T.load(root / rel).data[0])
        labels.append(label)
        names.setdefault(label, Path(rel).parent.name)
    if not images:
        raise ValueError(f"{root}: dataset is empty")
    n_cls = max(names) + 1
    classes = [names.get(i, str(i)) for i in range(n_cls)]
    return Dataset(np.stack(images), np.array(labels), classes)


def synthetic_dataset(n: int, num_classes: int = 10, resolution: int = 32, seed: int = 0, noise: float = 0.08) -> Dataset:
    """Class-conditional images: a per-class smooth color pattern, randomly shifted, plus pixel noise."""
    rng = component_rng(seed, "synthetic")
    r = resolution
    yy, xx = np.mgrid[0:r, 0:r] / r
    protos = []
    for _ in range(num_classes):
        freq = rng.uniform(1.0, 4.0, size=(3, 2))
        phase = rng.uniform(0, 2 * np.pi, size=3)
        protos.append(
            np.stack([0.5 + 0.35 * np.sin(2 * np.pi * (f[0] * yy + f[1] * xx) + p) for f, p in zip(freq, phase)])
        )
    labels = np.arange(n) % num_classes
    rng.shuffle(labels)
    images = np.empty((n, 3, r, r), dtype=np.float32)
    for i, label in enumerate(labels):
        dy, dx = rng.integers(-r // 8, r // 8 + 1, size=2)
        img = np.roll(protos[label], (dy, dx), axis=(1, 2))
        img = img * rng.uniform(0.8, 1.2) + noise * rng.standard_normal(img.shape)
        images[i] = np.clip(img, 0.0, 1.0)
    return Dataset(images, labels, [f"class{i}" for i in range(num_classes)])
