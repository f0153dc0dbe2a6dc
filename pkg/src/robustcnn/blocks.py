"""Residual blocks built around a depthwise convolution.

Four arrangements of (1x1, kxk depthwise, 1x1) convolutions are supported,
plus the dense-3x3 ResNet bottleneck used only as a cost reference.  Each
block keeps either a norm and an activation after every convolution, or
exactly one of each at chosen positions.
"""

from __future__ import annotations

import enum
import re
from dataclasses import dataclass, field

from .layers import (
    Activation,
    BatchNorm2d,
    Conv2d,
    ConvParams,
    DropPath,
    Initializer,
    Module,
    Sequential,
    TraceEntry,
)
from .tensor import add

EXPANSION = 4


class BlockKind(str, enum.Enum):
    DW = "DW"
    INVERTED_DW = "InvertedDW"
    UP_INVERTED_DW = "UpInvertedDW"
    DOWN_INVERTED_DW = "DownInvertedDW"
    BOTTLENECK = "Bottleneck"  # dense 3x3 ResNet bottleneck, reference only

    @classmethod
    def parse(cls, text: str) -> "BlockKind":
        key = re.sub(r"[-_ ]", "", text).lower()
        for kind in cls:
            if kind.value.lower() == key:
                return kind
        raise ValueError(f"unknown block kind {text!r}")


ALL = "all"


@dataclass(frozen=True)
class NormActPlacement:
    """Where norms/activations follow convs: a 1-based conv index, or ``"all"``."""

    norm_at: int | str = ALL
    act_at: int | str = ALL

    def __post_init__(self):
        for name in ("norm_at", "act_at"):
            v = getattr(self, name)
            if v != ALL and v not in (1, 2, 3):
                raise ValueError(f"{name} must be 1, 2, 3 or 'all'; got {v!r}")

    @property
    def full(self) -> bool:
        return self.norm_at == ALL and self.act_at == ALL

    def norm_after(self, i: int) -> bool:
        return self.norm_at == ALL or self.norm_at == i

    def act_after(self, i: int) -> bool:
        return self.act_at == ALL or self.act_at == i

    @property
    def name(self) -> str:
        if self.full:
            return "full"
        return f"Norm{self.norm_at}Act{self.act_at}"

    @classmethod
    def parse(cls, text: str) -> "NormActPlacement":
        if text.strip().lower() in ("full", "all"):
            return cls()
        m = re.fullmatch(r"norm(\d|all)act(\d|all)", text.strip().lower())
        if not m:
            raise ValueError(f"bad placement {text!r}; expected 'full' or 'NormXActY'")
        conv = lambda s: s if s == ALL else int(s)  # noqa: E731
        return cls(conv(m.group(1)), conv(m.group(2)))


FULL = NormActPlacement()


@dataclass(frozen=True)
class BlockSpec:
    kind: BlockKind
    width: int
    kernel: int = 3
    stride: int = 1
    placement: NormActPlacement = field(default=FULL)
    drop_path: float = 0.1

    def __post_init__(self):
        if self.width < 1:
            raise ValueError("width must be positive")
        if self.kernel < 1 or self.kernel % 2 == 0:
            raise ValueError(f"kernel must be odd, got {self.kernel}")
        if self.kernel < 3 and self.kind is not BlockKind.BOTTLENECK:
            raise ValueError(f"depthwise kernel must be >= 3, got {self.kernel}")
        if self.stride not in (1, 2):
            raise ValueError(f"stride must be 1 or 2, got {self.stride}")
        if not 0 <= self.drop_path < 1:
            raise ValueError("drop_path must lie in [0, 1)")

    @property
    def out_channels(self) -> int:
        if self.kind in (BlockKind.DW, BlockKind.BOTTLENECK):
            return EXPANSION * self.width
        return self.width

    def descriptor(self) -> str:
        norm = self.placement.norm_at
        act = self.placement.act_at
        return f"{self.kind.value}:w{self.width}:k{self.kernel}:s{self.stride}:norm{norm}:act{act}"


_DESC = re.compile(r"(?P<kind>[A-Za-z]+):w(?P<w>\d+):k(?P<k>\d+):s(?P<s>\d+):norm(?P<n>\d|all):act(?P<a>\d|all)")


def parse_descriptor(text: str, drop_path: float = 0.1) -> BlockSpec:
    """Parse ``<kind>:w<width>:k<kernel>:s<stride>:norm<idx|all>:act<idx|all>``."""
    m = _DESC.fullmatch(text.strip())
    if not m:
        raise ValueError(f"bad block descriptor {text!r}")
    conv = lambda s: s if s == ALL else int(s)  # noqa: E731
    return BlockSpec(
        kind=BlockKind.parse(m["kind"]),
        width=int(m["w"]),
        kernel=int(m["k"]),
        stride=int(m["s"]),
        placement=NormActPlacement(conv(m["n"]), conv(m["a"])),
        drop_path=drop_path,
    )


def conv_sequence(kind: BlockKind, cin: int, width: int, kernel: int, stride: int) -> list[ConvParams]:
    """The three convolutions of a block, in order."""
    hidden = EXPANSION * width
    pad = kernel // 2
    dw = lambda c, s: ConvParams(c, c, kernel, s, pad, groups=c)  # noqa: E731
    pw = lambda a, b, s=1: ConvParams(a, b, 1, s, 0)  # noqa: E731
    if kind is BlockKind.DW:
        return [pw(cin, width), dw(width, stride), pw(width, hidden)]
    if kind is BlockKind.INVERTED_DW:
        return [pw(cin, hidden), dw(hidden, stride), pw(hidden, width)]
    if kind is BlockKind.UP_INVERTED_DW:
        return [dw(cin, stride), pw(cin, hidden), pw(hidden, width)]
    if kind is BlockKind.DOWN_INVERTED_DW:
        # stride rides on the first 1x1 so the expanded maps are computed at output resolution
        return [pw(cin, hidden, stride), pw(hidden, width), dw(width, 1)]
    if kind is BlockKind.BOTTLENECK:
        return [pw(cin, width), ConvParams(width, width, kernel, stride, pad), pw(width, hidden)]
    raise ValueError(kind)


def expansion_conv_index(kind: BlockKind | str) -> int:
    """1-based index of the conv whose output channels exceed its input channels."""
    kind = BlockKind.parse(kind) if isinstance(kind, str) else kind
    # canonical channel pattern: block input equals block output
    width = 8
    cin = width * EXPANSION if kind in (BlockKind.DW, BlockKind.BOTTLENECK) else width
    seq = conv_sequence(kind, cin, width, 3, 1)
    hits = [i + 1 for i, p in enumerate(seq) if p.out_channels > p.in_channels]
    assert len(hits) == 1, hits
    return hits[0]


def optimal_placement(kind: BlockKind | str) -> NormActPlacement:
    """One norm after the first conv, one activation after the expanding conv."""
    return NormActPlacement(norm_at=1, act_at=expansion_conv_index(kind))


class Block(Module):
    """``shortcut(x) + drop_path(branch(x))``."""

    def __init__(
        self,
        spec: BlockSpec,
        in_channels: int,
        init: Initializer | None = None,
        act: str = "relu",
        zero_init_last: bool = False,
    ):
        super().__init__()
        self.spec = spec
        self.in_channels = in_channels
        self.out_channels = spec.out_channels
        vanilla = spec.kind is BlockKind.BOTTLENECK

        layers = []
        for i, params in enumerate(conv_sequence(spec.kind, in_channels, spec.width, spec.kernel, spec.stride), 1):
            layers.append((f"conv{i}", Conv2d(params, init)))
            if spec.placement.norm_after(i):
                layers.append((f"norm{i}", BatchNorm2d(params.out_channels, init)))
            if spec.placement.act_after(i) and not (vanilla and i == 3):
                layers.append((f"act{i}", Activation(act)))
        self.branch = Sequential(*layers)
        if zero_init_last and init is not None:
            self.branch.conv3.weight.data[...] = 0

        self.shortcut = None
        if spec.stride != 1 or in_channels != self.out_channels:
            self.shortcut = Sequential(
                ("conv", Conv2d(ConvParams(in_channels, self.out_channels, 1, spec.stride, 0), init)),
                ("norm", BatchNorm2d(self.out_channels, init)),
            )
        self.drop_path = DropPath(spec.drop_path)
        self.post_act = Activation(act) if vanilla else None

    @property
    def norm_count(self) -> int:
        return sum(isinstance(m, BatchNorm2d) for m in self.branch)

    @property
    def act_count(self) -> int:
        return sum(isinstance(m, Activation) for m in self.branch)

    def forward(self, x):
        y = self.drop_path(self.branch(x))
        skip = x if self.shortcut is None else self.shortcut(x)
        out = add(skip, y)
        return out if self.post_act is None else self.post_act(out)

    def trace(self, shape, path, out: list[TraceEntry]):
        y = self.branch.trace(shape, f"{path}.branch", out)
        skip = shape if self.shortcut is None else self.shortcut.trace(shape, f"{path}.shortcut", out)
        if tuple(y) != tuple(skip):
            raise ValueError(f"{path}: branch {y} and shortcut {skip} disagree")
        if self.post_act is not None:
            y = self.post_act.trace(y, f"{path}.post_act", out)
        return y


def build_block(
    spec: BlockSpec,
    in_channels: int | None = None,
    init: Initializer | None = None,
    act: str = "relu",
    zero_init_last: bool = False,
    symbolic: bool = False,
) -> Block:
    """Instantiate a block; ``in_channels`` defaults to the block's own output width.

    ``symbolic=True`` skips weight allocation (the block can then only be traced).
    """
    cin = spec.out_channels if in_channels is None else in_channels
    if not symbolic and init is None:
        init = Initializer()
    return Block(spec, cin, init=None if symbolic else init, act=act, zero_init_last=zero_init_last)
