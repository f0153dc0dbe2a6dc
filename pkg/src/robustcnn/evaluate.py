"""Clean and corruption top-1 error, and mean corruption error."""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .corruptions import CorruptionSpec, canonical_family, corrupt
from .data import Dataset
from .tensor import Tensor, no_grad


@dataclass
class RobustnessReport:
    clean_error: float
    errors: dict[tuple[str, int], float] = field(default_factory=dict)

    def __post_init__(self):
        for v in (self.clean_error, *self.errors.values()):
            if not 0 <= v <= 100:
                raise ValueError(f"error {v} outside [0, 100]")

    @property
    def families(self) -> list[str]:
        return sorted({f for f, _ in self.errors})

    def family_error(self, family: str) -> float:
        vals = [e for (f, _), e in self.errors.items() if f == family]
        return sum(vals) / len(vals)

    @property
    def mce(self) -> float:
        """Mean over families of the mean error over severities (unnormalized)."""
        fams = self.families
        if not fams:
            return float("nan")
        return sum(self.family_error(f) for f in fams) / len(fams)

    def normalized_mce(self, baseline: "RobustnessReport") -> float:
        """Mean over families of summed error relative to ``baseline``, in percent."""
        ratios = []
        for fam in self.families:
            keys = [k for k in self.errors if k[0] == fam]
            denom = sum(baseline.errors[k] for k in keys)
            if denom == 0:
                raise ValueError(f"baseline has zero error for {fam}")
            ratios.append(sum(self.errors[k] for k in keys) / denom)
        return 100.0 * sum(ratios) / len(ratios)

    def to_json(self) -> str:
        return json.dumps(
            {
                "clean_error": self.clean_error,
                "errors": [{"family": f, "severity": s, "error": e} for (f, s), e in sorted(self.errors.items())],
                "mce": self.mce,
            },
            indent=2,
        )

    @classmethod
    def from_json(cls, text: str) -> "RobustnessReport":
        raw = json.loads(text)
        errors = {(canonical_family(d["family"]), int(d["severity"])): float(d["error"]) for d in raw["errors"]}
        return cls(float(raw["clean_error"]), errors)

    def save(self, path) -> None:
        Path(path).write_text(self.to_json(), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "RobustnessReport":
        return cls.from_json(Path(path).read_text(encoding="utf-8"))

    def to_text(self, baseline: "RobustnessReport | None" = None) -> str:
        lines = [f"clean error: {self.clean_error:.2f}"]
        for fam in self.families:
            sev = " ".join(f"{self.errors[(fam, s)]:6.2f}" for s in sorted(s for f, s in self.errors if f == fam))
            lines.append(f"{fam:<16} {sev}   mean {self.family_error(fam):.2f}")
        if self.errors:
            lines.append(f"mCE (unnormalized): {self.mce:.2f}")
            if baseline is not None:
                lines.append(f"mCE (normalized): {self.normalized_mce(baseline):.2f}")
        return "\n".join(lines)


def predict(model, images: np.ndarray, batch_size: int = 256, threads: int = 1) -> np.ndarray:
    """Arg-max class per image; ``model`` maps a Tensor batch to ``(N,K,1,1)`` logits."""
    if hasattr(model, "eval"):
        model.eval()
    starts = range(0, len(images), batch_size)

    def run(i):
        with no_grad():
            logits = model(Tensor(images[i : i + batch_size]))
        return logits.data.reshape(logits.shape[0], -1).argmax(axis=1)

    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            parts = list(pool.map(run, starts))
    else:
        parts = [run(i) for i in starts]
    return np.concatenate(parts)


def top1_error(model, images, labels, batch_size: int = 256, threads: int = 1) -> float:
    pred = predict(model, images, batch_size, threads)
    return float(100.0 * np.mean(pred != labels))


def evaluate(
    model,
    data: Dataset,
    corruptions=None,
    severities=(1, 2, 3, 4, 5),
    seed: int = 0,
    batch_size: int = 256,
    threads: int = 1,
) -> RobustnessReport:
    """Top-1 error on ``data`` and on each (family, severity) corrupted copy of it."""
    if len(data) == 0:
        raise ValueError("empty dataset")
    clean = top1_error(model, data.images, data.labels, batch_size, threads)
    errors = {}
    for fam in corruptions or ():
        fam = canonical_family(fam)
        for sev in severities:
            x = corrupt(data.images, CorruptionSpec(fam, sev, seed))
            errors[(fam, sev)] = top1_error(model, x, data.labels, batch_size, threads)
    return RobustnessReport(clean, errors)
