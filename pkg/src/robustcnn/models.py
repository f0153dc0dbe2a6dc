"""Stem + four stages + classifier assembly, stride plans and depth tuning."""

from __future__ import annotations

import dataclasses
import enum
import hashlib
import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .blocks import FULL, Block, BlockKind, BlockSpec, NormActPlacement
from .flops import count_flops
from .layers import (
    Activation,
    BatchNorm2d,
    Conv2d,
    ConvParams,
    DropPath,
    GlobalAvgPool,
    Initializer,
    Linear,
    MaxPool2d,
    Module,
    Sequential,
)


class ConfigError(ValueError):
    """Invalid model or training configuration."""


# ---------------------------------------------------------------------- stems


class StemKind(str, enum.Enum):
    RESNET = "resnet"
    PATCHIFY = "patchify"
    CONV = "conv"


@dataclass(frozen=True)
class StemSpec:
    kind: StemKind = StemKind.RESNET
    patch: int = 0

    def __post_init__(self):
        if self.kind is StemKind.PATCHIFY and self.patch < 1:
            raise ConfigError("patchify stem needs a positive patch size")

    @classmethod
    def resnet(cls):
        return cls(StemKind.RESNET)

    @classmethod
    def patchify(cls, p: int):
        return cls(StemKind.PATCHIFY, p)

    @classmethod
    def conv(cls):
        return cls(StemKind.CONV)

    @property
    def stride(self) -> int:
        return {StemKind.RESNET: 4, StemKind.CONV: 16}.get(self.kind, self.patch)

    @property
    def name(self) -> str:
        if self.kind is StemKind.PATCHIFY:
            return f"P{self.patch}"
        return "ResNetStyle" if self.kind is StemKind.RESNET else "ConvStem"


def stride_plan(stem: StemSpec) -> tuple[int, int, int, int]:
    """First-block stride of each stage, keeping the overall stride at 32."""
    if stem.kind is StemKind.RESNET:
        return (1, 2, 2, 2)
    if stem.kind is StemKind.CONV:
        return (1, 1, 1, 2)
    plans = {4: (1, 2, 2, 2), 8: (1, 1, 2, 2), 16: (1, 1, 1, 2)}
    if stem.patch not in plans:
        raise ConfigError(f"no stride plan for patch size {stem.patch}; give stage_strides explicitly")
    return plans[stem.patch]


class Stem(Module):
    def __init__(self, spec: StemSpec, out_channels: int, init: Initializer | None, act: str = "relu", norm: bool = False):
        super().__init__()
        self.spec = spec
        c = out_channels
        if spec.kind is StemKind.RESNET:
            self.layers = Sequential(
                ("conv", Conv2d(ConvParams(3, c, 7, 2, 3), init)),
                ("norm", BatchNorm2d(c, init)),
                ("act", Activation(act)),
                ("pool", MaxPool2d(3, 2, 1)),
            )
        elif spec.kind is StemKind.PATCHIFY:
            p = spec.patch
            layers = [("conv", Conv2d(ConvParams(3, c, p, p, 0), init, bias=not norm))]
            if norm:
                layers.append(("norm", BatchNorm2d(c, init)))
            self.layers = Sequential(*layers)
        else:
            if c % 8:
                raise ConfigError(f"conv stem needs a stage-1 width divisible by 8, got {c}")
            chans = [3, c // 8, c // 4, c // 2, c]
            layers = []
            for i in range(4):
                layers += [
                    (f"conv{i + 1}", Conv2d(ConvParams(chans[i], chans[i + 1], 3, 2, 1), init)),
                    (f"norm{i + 1}", BatchNorm2d(chans[i + 1], init)),
                    (f"act{i + 1}", Activation(act)),
                ]
            self.layers = Sequential(*layers)

    def forward(self, x):
        return self.layers(x)

    def trace(self, shape, path, out):
        return self.layers.trace(shape, f"{path}.layers" if path else "layers", out)


# ---------------------------------------------------------------------- model


@dataclass(frozen=True)
class ModelSpec:
    stem: StemSpec = field(default_factory=StemSpec.resnet)
    stage_widths: tuple[int, ...] = (96, 192, 384, 768)
    stage_depths: tuple[int, ...] = (3, 4, 6, 3)
    block_kind: BlockKind = BlockKind.DW
    kernel: int = 3
    placement: NormActPlacement = FULL
    num_classes: int = 1000
    input_resolution: int = 224
    stage_strides: tuple[int, ...] | None = None
    drop_path: float = 0.1
    stem_norm: bool = False
    act: str = "relu"

    def __post_init__(self):
        if len(self.stage_widths) != 4 or len(self.stage_depths) != 4:
            raise ConfigError("need exactly four stage widths and depths")
        if min(self.stage_depths) < 1 or min(self.stage_widths) < 1:
            raise ConfigError("stage depths and widths must be >= 1")
        if self.num_classes < 1 or self.input_resolution < 1:
            raise ConfigError("num_classes and input_resolution must be positive")
        if self.stage_strides is not None and (
            len(self.stage_strides) != 4 or any(s not in (1, 2) for s in self.stage_strides)
        ):
            raise ConfigError("stage_strides must be four values in {1, 2}")
        if self.kernel < 3 or self.kernel % 2 == 0:
            raise ConfigError(f"kernel must be odd and >= 3, got {self.kernel}")
        if self.act not in ("relu", "gelu"):
            raise ConfigError(f"unknown activation {self.act!r}")
        if not 0 <= self.drop_path < 1:
            raise ConfigError("drop_path must lie in [0, 1)")

    @property
    def strides(self) -> tuple[int, int, int, int]:
        return tuple(self.stage_strides) if self.stage_strides is not None else stride_plan(self.stem)

    @property
    def total_stride(self) -> int:
        return self.stem.stride * int(np.prod(self.strides))

    def with_depth(self, stage: int, depth: int) -> "ModelSpec":
        depths = list(self.stage_depths)
        depths[stage] = depth
        return dataclasses.replace(self, stage_depths=tuple(depths))

    def validate(self) -> None:
        res = self.input_resolution
        if self.stem.kind is StemKind.PATCHIFY and res % self.stem.patch:
            raise ConfigError(f"patch size {self.stem.patch} does not divide resolution {res}")
        if res % self.total_stride:
            raise ConfigError(f"total stride {self.total_stride} does not divide resolution {res}")


class Model(Module):
    def __init__(self, spec: ModelSpec, init: Initializer | None):
        super().__init__()
        spec.validate()
        self.spec = spec
        c = spec.stage_widths[0]
        self.stem = Stem(spec.stem, c, init, spec.act, spec.stem_norm)
        cin = c
        stages = []
        for i, (width, depth, stride) in enumerate(zip(spec.stage_widths, spec.stage_depths, spec.strides)):
            blocks = []
            for j in range(depth):
                bspec = BlockSpec(
                    spec.block_kind,
                    width,
                    spec.kernel,
                    stride if j == 0 else 1,
                    spec.placement,
                    spec.drop_path,
                )
                blocks.append((f"block{j}", Block(bspec, cin, init, spec.act)))
                cin = bspec.out_channels
            stages.append((f"stage{i + 1}", Sequential(*blocks)))
        self.stages = Sequential(*stages)
        self.pool = GlobalAvgPool()
        self.head = Linear(cin, spec.num_classes, init)
        self.feature_channels = cin

    def features(self, x):
        return self.stages(self.stem(x))

    def forward(self, x):
        return self.head(self.pool(self.features(x)))

    def trace(self, shape, path, out):
        shape = self.stem.trace(shape, "stem", out)
        shape = self.stages.trace(shape, "stages", out)
        shape = self.pool.trace(shape, "pool", out)
        return self.head.trace(shape, "head", out)

    def feature_shape(self, resolution: int | None = None) -> tuple:
        """Shape of the map entering global pooling, by symbolic propagation."""
        r = resolution or self.spec.input_resolution
        entries = []
        shape = self.stem.trace((1, 3, r, r), "stem", entries)
        return self.stages.trace(shape, "stages", entries)

    def set_rng(self, rng: np.random.Generator) -> None:
        for m in self.modules():
            if isinstance(m, DropPath):
                m.rng = rng

    def init_running_stats(self) -> None:
        """Mark every BN layer's default statistics (mean 0, var 1) as usable in eval mode."""
        for m in self.modules():
            if isinstance(m, BatchNorm2d) and m.state is not None:
                m.state.init_running()

    def blocks(self) -> list[Block]:
        return [m for m in self.modules() if isinstance(m, Block)]


def build_model(spec: ModelSpec, seed: int = 0, dtype=T.STANDARD, symbolic: bool = False) -> Model:
    """Build a network from ``spec``; ``symbolic=True`` skips weight allocation."""
    init = None if symbolic else Initializer(np.random.default_rng(seed), dtype)
    return Model(spec, init)


def total_macs(spec: ModelSpec) -> int:
    return count_flops(build_model(spec, symbolic=True)).total


# ---------------------------------------------------------------------- tuner

DEIT_S_MACS = 4.6e9
DEIT_B_MACS = 17.6e9
_MAX_DEPTH = 256


class TuneError(ValueError):
    def __init__(self, message: str, candidates: list[tuple[int, int]]):
        super().__init__(message)
        self.candidates = candidates


def _cache_path(spec: ModelSpec, budget: float, tol: float) -> Path | None:
    root = os.environ.get("ROBUSTCNN_CACHE")
    if not root:
        return None
    key = hashlib.sha256(f"{format_config(spec)}|{budget!r}|{tol!r}".encode()).hexdigest()[:24]
    return Path(root) / f"tune-{key}.json"


def tune_stage3_depth(spec: ModelSpec, budget: float, tol: float = 0.05) -> int:
    """Smallest stage-3 depth whose total MACs lies in ``budget * (1 +- tol)``.

    Results are memoized under ``$ROBUSTCNN_CACHE`` when that is set.
    """
    if budget <= 0 or not 0 <= tol < 1:
        raise ConfigError("budget must be positive and tol in [0, 1)")
    cache = _cache_path(spec, budget, tol)
    if cache is not None and cache.exists():
        return int(json.loads(cache.read_text())["depth"])

    lo, hi = budget * (1 - tol), budget * (1 + tol)
    seen: list[tuple[int, int]] = []
    for depth in range(1, _MAX_DEPTH + 1):
        macs = total_macs(spec.with_depth(2, depth))
        seen.append((depth, macs))
        if lo <= macs <= hi:
            if cache is not None:
                cache.parent.mkdir(parents=True, exist_ok=True)
                cache.write_text(json.dumps({"depth": depth, "macs": macs}))
            return depth
        if macs > hi:
            if depth == 1:  # still report two candidates
                seen.append((2, total_macs(spec.with_depth(2, 2))))
            break
    nearest = sorted(seen, key=lambda dm: abs(dm[1] - budget))[:2]
    desc = ", ".join(f"depth {d}: {m / 1e9:.3f}G" for d, m in sorted(nearest))
    raise TuneError(f"no stage-3 depth lands in [{lo / 1e9:.3f}G, {hi / 1e9:.3f}G]; nearest {desc}", nearest)


# -------------------------------------------------------------------- presets

BASE_WIDTHS = (96, 192, 384, 768)
LARGE_WIDTHS = (128, 256, 512, 1024)
_KINDS = {
    "dw": BlockKind.DW,
    "inverted-dw": BlockKind.INVERTED_DW,
    "up-inverted-dw": BlockKind.UP_INVERTED_DW,
    "down-inverted-dw": BlockKind.DOWN_INVERTED_DW,
}
# kernel/placement per combined-design row; the inverted kind uses k=7
_ROBUST = {
    "dw": (11, NormActPlacement(1, 3)),
    "inverted-dw": (7, NormActPlacement(1, 1)),
    "up-inverted-dw": (11, NormActPlacement(1, 2)),
    "down-inverted-dw": (11, NormActPlacement(1, 1)),
}
# stage-3 depths found by tune_stage3_depth (budget, tol=0.05); tests re-derive them
_TUNED = {
    "resnet-dw": 4,
    "resnet-inverted-dw": 7,
    "resnet-up-inverted-dw": 9,
    "resnet-down-inverted-dw": 9,
    "robust-dw": 12,
    "robust-inverted-dw": 14,
    "robust-up-inverted-dw": 15,
    "robust-down-inverted-dw": 15,
    "robust-base-dw": 33,
    "robust-base-inverted-dw": 35,
    "robust-base-up-inverted-dw": 36,
    "robust-base-down-inverted-dw": 36,
}


@dataclass(frozen=True)
class Preset:
    name: str
    spec: ModelSpec
    description: str
    budget: float | None = None


def _presets() -> dict[str, Preset]:
    out = {}
    out["resnet50"] = Preset(
        "resnet50",
        ModelSpec(
            stem=StemSpec.resnet(),
            stage_widths=(64, 128, 256, 512),
            stage_depths=(3, 4, 6, 3),
            block_kind=BlockKind.BOTTLENECK,
            kernel=3,
        ),
        "ResNet50 reference (dense 3x3 bottleneck)",
    )
    for short, kind in _KINDS.items():
        name = f"resnet-{short}"
        out[name] = Preset(
            name,
            ModelSpec(stage_depths=(3, 4, _TUNED[name], 3), block_kind=kind),
            f"ResNet-{kind.value} baseline (ResNet stem, K3, full norm/act)",
            DEIT_S_MACS,
        )
        k, placement = _ROBUST[short]
        for scale, widths, budget in (("", BASE_WIDTHS, DEIT_S_MACS), ("base-", LARGE_WIDTHS, DEIT_B_MACS)):
            name = f"robust-{scale}{short}"
            out[name] = Preset(
                name,
                ModelSpec(
                    stem=StemSpec.patchify(16),
                    stage_widths=widths,
                    stage_depths=(3, 4, _TUNED[name], 3),
                    block_kind=kind,
                    kernel=k,
                    placement=placement,
                ),
                f"Robust-ResNet-{'Base-' if scale else ''}{kind.value}: P16 + K{k} + {placement.name}",
                budget,
            )
    out["cifar-robust"] = Preset(
        "cifar-robust",
        ModelSpec(
            stem=StemSpec.patchify(4),
            stage_widths=(32, 64, 128, 256),
            stage_depths=(2, 2, 4, 2),
            block_kind=BlockKind.UP_INVERTED_DW,
            kernel=11,
            placement=NormActPlacement(1, 2),
            num_classes=10,
            input_resolution=32,
            stage_strides=(1, 1, 1, 2),
        ),
        "CIFAR-scale Robust-ResNet-UpInvertedDW: 32px, P4 + K11 + Norm1Act2",
    )
    return out


PRESETS = _presets()


def get_preset(name: str) -> Preset:
    try:
        return PRESETS[name]
    except KeyError:
        raise ConfigError(f"unknown preset {name!r}; choose from {', '.join(PRESETS)}") from None


# ---------------------------------------------------------------- config file


def format_config(spec: ModelSpec) -> str:
    lines = [
        f"stem = {spec.stem.kind.value}",
        f"patch_size = {spec.stem.patch}",
        f"block_kind = {spec.block_kind.value}",
        f"kernel = {spec.kernel}",
        f"norm_at = {spec.placement.norm_at}",
        f"act_at = {spec.placement.act_at}",
        f"widths = {','.join(map(str, spec.stage_widths))}",
        f"depths = {','.join(map(str, spec.stage_depths))}",
        f"num_classes = {spec.num_classes}",
        f"input_resolution = {spec.input_resolution}",
        f"drop_path = {spec.drop_path}",
        f"stem_norm = {str(spec.stem_norm).lower()}",
        f"act = {spec.act}",
    ]
    if spec.stage_strides is not None:
        lines.append(f"stage_strides = {','.join(map(str, spec.stage_strides))}")
    return "\n".join(lines) + "\n"


def read_kv(text: str) -> dict[str, str]:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key in out:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        out[key] = value
    return out


_REQUIRED = ("stem", "block_kind", "kernel", "norm_at", "act_at", "widths", "depths", "num_classes", "input_resolution")
_OPTIONAL = ("patch_size", "drop_path", "stem_norm", "act", "stage_strides")


def parse_config(text: str) -> ModelSpec:
    kv = read_kv(text)
    unknown = set(kv) - set(_REQUIRED) - set(_OPTIONAL)
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(sorted(unknown))}")
    missing = [k for k in _REQUIRED if k not in kv]
    if missing:
        raise ConfigError(f"missing config keys: {', '.join(missing)}")
    ints = lambda s: tuple(int(v) for v in s.split(","))  # noqa: E731
    idx = lambda s: s if s == "all" else int(s)  # noqa: E731
    try:
        stem_kind = StemKind(kv["stem"].lower())
        stem = StemSpec(stem_kind, int(kv.get("patch_size", 0)) if stem_kind is StemKind.PATCHIFY else 0)
        return ModelSpec(
            stem=stem,
            stage_widths=ints(kv["widths"]),
            stage_depths=ints(kv["depths"]),
            block_kind=BlockKind.parse(kv["block_kind"]),
            kernel=int(kv["kernel"]),
            placement=NormActPlacement(idx(kv["norm_at"]), idx(kv["act_at"])),
            num_classes=int(kv["num_classes"]),
            input_resolution=int(kv["input_resolution"]),
            stage_strides=ints(kv["stage_strides"]) if "stage_strides" in kv else None,
            drop_path=float(kv.get("drop_path", 0.1)),
            stem_norm=kv.get("stem_norm", "false").lower() in ("1", "true", "yes"),
            act=kv.get("act", "relu"),
        )
    except ConfigError:
        raise
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path) -> ModelSpec:
    return parse_config(Path(path).read_text(encoding="utf-8"))


# ----------------------------------------------------------------- checkpoint

CKPT_MAGIC = b"RBCK1\n"


def state_items(model: Model) -> list[tuple[str, np.ndarray]]:
    """Named parameters then named BN buffers, in a stable order."""
    items = [(name, p.data) for name, p in model.named_parameters()]
    items += [(name, buf.reshape(1, -1, 1, 1)) for name, buf in model.named_buffers()]
    return items


def save_checkpoint(path, model: Model) -> None:
    """Config echo, length-prefixed name table, then concatenated RBT1 tensors."""
    cfg = format_config(model.spec).encode("utf-8")
    items = state_items(model)
    blobs = [T.to_bytes(arr) for _, arr in items]
    parts = [CKPT_MAGIC, struct.pack("<Q", len(cfg)), cfg, struct.pack("<Q", len(items))]
    for (name, _), blob in zip(items, blobs):
        raw = name.encode("utf-8")
        parts += [struct.pack("<Q", len(raw)), raw, struct.pack("<Q", len(blob))]
    parts += blobs
    Path(path).write_bytes(b"".join(parts))


def load_checkpoint(path, dtype=T.STANDARD) -> Model:
    buf = Path(path).read_bytes()
    if not buf.startswith(CKPT_MAGIC):
        raise ConfigError(f"{path}: not a checkpoint")
    pos = len(CKPT_MAGIC)

    def u64():
        nonlocal pos
        (v,) = struct.unpack_from("<Q", buf, pos)
        pos += 8
        return v

    n = u64()
    spec = parse_config(buf[pos : pos + n].decode("utf-8"))
    pos += n
    table = []
    for _ in range(u64()):
        ln = u64()
        name = buf[pos : pos + ln].decode("utf-8")
        pos += ln
        table.append((name, u64()))
    model = build_model(spec, dtype=dtype)
    params = dict(model.named_parameters())
    buffers = dict(model.named_buffers())
    for name, size in table:
        arr = T.from_bytes(buf[pos : pos + size]).data
        pos += size
        if name in params:
            params[name].data[...] = arr
        elif name in buffers:
            buffers[name][...] = arr.reshape(-1)
        else:
            raise ConfigError(f"{path}: unexpected tensor {name!r}")
    for m in model.modules():
        if isinstance(m, BatchNorm2d) and m.state is not None:
            m.state.initialized = True
    return model
