"""Static multiply-accumulate counting by symbolic shape propagation.

One MAC is counted per multiply-accumulate of a parameterized linear map
(convolution or fully connected layer).  Normalization, activation and pooling
layers are listed with zero cost.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .layers import Conv2d, ConvParams, Linear, TraceEntry

# elementwise work of zero-cost layers, reported only when it would matter
_NOTE_THRESHOLD = 0.01


@dataclass(frozen=True)
class LayerCost:
    path: str
    layer: str
    out_shape: tuple
    macs: int


@dataclass
class FlopsReport:
    entries: list[LayerCost]
    notes: list[str] = field(default_factory=list)

    @property
    def total(self) -> int:
        return sum(e.macs for e in self.entries)

    def by_prefix(self, prefix: str) -> int:
        return sum(e.macs for e in self.entries if e.path.startswith(prefix))

    def to_text(self) -> str:
        rows = [(e.path, e.layer, "x".join(map(str, e.out_shape)), f"{e.macs:,}") for e in self.entries]
        heads = ("layer", "type", "output", "MACs")
        widths = [max(len(h), *(len(r[i]) for r in rows)) if rows else len(h) for i, h in enumerate(heads)]
        fmt = "  ".join(f"{{:<{w}}}" if i < 3 else f"{{:>{w}}}" for i, w in enumerate(widths))
        lines = [fmt.format(*heads), fmt.format(*("-" * w for w in widths))]
        lines += [fmt.format(*r) for r in rows]
        lines.append(f"total MACs: {self.total:,} ({self.total / 1e9:.3f} G)")
        lines += [f"note: {n}" for n in self.notes]
        return "\n".join(lines)

    def to_tsv(self) -> str:
        lines = [f"{e.path}\t{'x'.join(map(str, e.out_shape))}\t{e.macs}" for e in self.entries]
        lines.append(f"total\t-\t{self.total}")
        return "\n".join(lines)


def conv_macs(params: ConvParams, out_hw: tuple[int, int], batch: int = 1) -> int:
    ho, wo = out_hw
    return batch * ho * wo * params.out_channels * (params.in_channels // params.groups) * params.kernel**2


def layer_macs(layer, in_shape: tuple) -> int:
    """MACs of one layer for an ``(N, C, H, W)`` input; zero for non-parameterized layers."""
    if len(in_shape) != 4 or min(in_shape) < 1:
        raise ValueError(f"invalid input shape {in_shape}")
    n, c, h, w = in_shape
    if isinstance(layer, Conv2d):
        layer = layer.params
    if isinstance(layer, ConvParams):
        if c != layer.in_channels:
            raise ValueError(f"conv expects {layer.in_channels} channels, got {c}")
        return conv_macs(layer, layer.out_size(h, w), n)
    if isinstance(layer, Linear):
        if (c, h, w) != (layer.in_features, 1, 1):
            raise ValueError(f"linear expects ({layer.in_features},1,1), got {in_shape[1:]}")
        return n * layer.in_features * layer.out_features
    return 0


def _trace(model, input_shape) -> list[TraceEntry]:
    entries: list[TraceEntry] = []
    model.trace(tuple(input_shape), "", entries)
    return entries


def count_flops(model, input_shape: tuple | None = None) -> FlopsReport:
    """Per-layer MACs of ``model`` (anything with ``trace``) for ``input_shape``.

    Models carrying a ``spec`` default to a single image at the spec resolution.
    """
    if input_shape is None:
        spec = getattr(model, "spec", None)
        if spec is None:
            raise ValueError("input_shape required for models without a spec")
        input_shape = (1, 3, spec.input_resolution, spec.input_resolution)
    try:
        traced = _trace(model, input_shape)
    except ValueError as exc:
        raise ValueError(f"shape propagation failed: {exc}") from exc

    entries = [
        LayerCost(t.path, type(t.module).__name__, t.out_shape, layer_macs(t.module, t.in_shape)) for t in traced
    ]
    report = FlopsReport(entries)
    free = sum(_elements(t.out_shape) for t in traced if not isinstance(t.module, (Conv2d, Linear)))
    if report.total and free > _NOTE_THRESHOLD * report.total:
        report.notes.append(
            f"norm/act/pool layers touch {free:,} elements ({100 * free / report.total:.1f}% of MACs); counted as 0"
        )
    return report


def _elements(shape) -> int:
    n = 1
    for d in shape:
        n *= d
    return n
