"""Convolution, normalization, activation, pooling and regularization layers.

Functional forms operate on :class:`~robustcnn.tensor.Tensor` values and record
their own backward rules.  The :class:`Module` classes wrap them with
parameters; a module built without an :class:`Initializer` has no weights and
can only be traced symbolically (shape propagation for cost counting).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from . import _kernels
from .tensor import STANDARD, Tensor, record

# ---------------------------------------------------------------- convolution


@dataclass(frozen=True)
class ConvParams:
    in_channels: int
    out_channels: int
    kernel: int
    stride: int = 1
    padding: int = 0
    groups: int = 1

    def __post_init__(self):
        for name in ("in_channels", "out_channels", "kernel", "stride", "groups"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.padding < 0:
            raise ValueError("padding must be >= 0")
        if self.in_channels % self.groups or self.out_channels % self.groups:
            raise ValueError(
                f"channels ({self.in_channels}->{self.out_channels}) not divisible by groups={self.groups}"
            )

    @property
    def depthwise(self) -> bool:
        return self.groups == self.in_channels == self.out_channels

    def out_size(self, h: int, w: int) -> tuple[int, int]:
        ho = (h + 2 * self.padding - self.kernel) // self.stride + 1
        wo = (w + 2 * self.padding - self.kernel) // self.stride + 1
        if ho < 1 or wo < 1 or h + 2 * self.padding < self.kernel or w + 2 * self.padding < self.kernel:
            raise ValueError(f"conv {self} produces empty output for {h}x{w} input")
        return ho, wo

    def weight_shape(self) -> tuple[int, int, int, int]:
        return (self.out_channels, self.in_channels // self.groups, self.kernel, self.kernel)


def _pad(x: np.ndarray, p: int, value: float = 0.0) -> np.ndarray:
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)), constant_values=value)


def _im2col(xp: np.ndarray, k: int, s: int, ho: int, wo: int) -> np.ndarray:
    n, c = xp.shape[:2]
    cols = np.empty((n, c, k, k, ho, wo), dtype=xp.dtype)
    hs, ws = s * (ho - 1) + 1, s * (wo - 1) + 1
    for i in range(k):
        for j in range(k):
            cols[:, :, i, j] = xp[:, :, i : i + hs : s, j : j + ws : s]
    return cols


def _col2im(dcols: np.ndarray, k: int, s: int, hp: int, wp: int) -> np.ndarray:
    n, c, _, _, ho, wo = dcols.shape
    dxp = np.zeros((n, c, hp, wp), dtype=dcols.dtype)
    hs, ws = s * (ho - 1) + 1, s * (wo - 1) + 1
    for i in range(k):
        for j in range(k):
            dxp[:, :, i : i + hs : s, j : j + ws : s] += dcols[:, :, i, j]
    return dxp


def conv2d(x: Tensor, w: Tensor, params: ConvParams, bias: Tensor | None = None) -> Tensor:
    """2-D cross-correlation with zero padding and channel groups."""
    n, c, h, wd = x.shape
    if c != params.in_channels:
        raise ValueError(f"input has {c} channels, conv expects {params.in_channels}")
    if w.shape != params.weight_shape():
        raise ValueError(f"weight shape {w.shape} != expected {params.weight_shape()}")
    if bias is not None and bias.shape != (1, params.out_channels, 1, 1):
        raise ValueError("bias must have shape (1, Cout, 1, 1)")
    ho, wo = params.out_size(h, wd)
    k, s, p, g = params.kernel, params.stride, params.padding, params.groups
    cout = params.out_channels
    xd, wdata = x.data, w.data
    hp, wp = h + 2 * p, wd + 2 * p

    if params.depthwise:
        xp = _pad(xd, p)
        out = _kernels.kernel("dw_forward")(xp, wdata[:, 0], s, ho, wo)

        def back_core(gy):
            dxp = _kernels.kernel("dw_backward_input")(gy, wdata[:, 0], s, hp, wp)
            dw = _kernels.kernel("dw_backward_weight")(gy, xp, s, k)
            return dxp[:, :, p : p + h, p : p + wd], dw[:, None]

    elif k == 1 and p == 0 and g == 1:
        xs = xd[:, :, ::s, ::s] if s > 1 else xd
        xs = np.ascontiguousarray(xs).reshape(n, c, ho * wo)
        w2 = wdata.reshape(cout, c)
        out = np.matmul(w2, xs).reshape(n, cout, ho, wo)

        def back_core(gy):
            g2 = gy.reshape(n, cout, ho * wo)
            dxs = np.matmul(w2.T, g2).reshape(n, c, ho, wo)
            dw = np.tensordot(g2, xs, axes=([0, 2], [0, 2])).reshape(wdata.shape)
            if s > 1:
                dx = np.zeros_like(xd)
                dx[:, :, ::s, ::s] = dxs
                return dx, dw
            return dxs, dw

    else:
        cg, og = c // g, cout // g
        kk = cg * k * k
        cols = _im2col(_pad(xd, p), k, s, ho, wo).reshape(n, g, kk, ho * wo)
        wg = wdata.reshape(g, og, kk)
        out = np.matmul(wg[None], cols).reshape(n, cout, ho, wo)

        def back_core(gy):
            g2 = gy.reshape(n, g, og, ho * wo)
            dcols = np.matmul(np.swapaxes(wg, 1, 2)[None], g2)
            dw = np.matmul(g2, np.swapaxes(cols, 2, 3)).sum(axis=0).reshape(wdata.shape)
            dxp = _col2im(dcols.reshape(n, c, k, k, ho, wo), k, s, hp, wp)
            return dxp[:, :, p : p + h, p : p + wd], dw

    inputs = (x, w)
    if bias is not None:
        out = out + bias.data
        inputs = (x, w, bias)

    def back(gy):
        dx, dw = back_core(gy)
        if bias is None:
            return dx, dw
        return dx, dw, gy.sum(axis=(0, 2, 3), keepdims=True)

    return record("conv2d", out, inputs, back)


# -------------------------------------------------------------- normalization


@dataclass
class BatchNormState:
    gamma: Tensor
    beta: Tensor
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1
    eps: float = 1e-5
    mode: str = "train"
    initialized: bool = False

    @classmethod
    def create(cls, channels: int, dtype=STANDARD, **kw) -> "BatchNormState":
        return cls(
            gamma=Tensor(np.ones((1, channels, 1, 1), dtype=dtype), requires_grad=True),
            beta=Tensor(np.zeros((1, channels, 1, 1), dtype=dtype), requires_grad=True),
            running_mean=np.zeros(channels, dtype=dtype),
            running_var=np.ones(channels, dtype=dtype),
            **kw,
        )

    def init_running(self, mean=None, var=None) -> None:
        """Explicitly set running statistics, enabling eval mode without training."""
        if mean is not None:
            self.running_mean[...] = mean
        if var is not None:
            var = np.asarray(var)
            if np.any(var <= 0):
                raise ValueError("running_var must be strictly positive")
            self.running_var[...] = var
        self.initialized = True


def batch_norm(x: Tensor, state: BatchNormState) -> Tensor:
    """Per-channel normalization; train mode uses and records batch statistics."""
    c = x.shape[1]
    if state.gamma.shape != (1, c, 1, 1):
        raise ValueError(f"BN has {state.gamma.shape[1]} channels, input has {c}")
    xd = x.data
    gamma, beta = state.gamma, state.beta
    eps = state.eps

    if state.mode == "train":
        m = xd.shape[0] * xd.shape[2] * xd.shape[3]
        mu = xd.mean(axis=(0, 2, 3), keepdims=True)
        xc = xd - mu
        var = (xc * xc).mean(axis=(0, 2, 3), keepdims=True)
        inv = 1.0 / np.sqrt(var + eps)
        xhat = xc * inv
        out = gamma.data * xhat + beta.data

        mom = state.momentum
        unbiased = var.reshape(c) * (m / (m - 1) if m > 1 else 1.0)
        state.running_mean[...] = (1 - mom) * state.running_mean + mom * mu.reshape(c)
        state.running_var[...] = (1 - mom) * state.running_var + mom * unbiased
        state.initialized = True

        def back(g):
            dxhat = g * gamma.data
            s1 = dxhat.sum(axis=(0, 2, 3), keepdims=True)
            s2 = (dxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
            dx = inv * (dxhat - s1 / m - xhat * s2 / m)
            return dx, (g * xhat).sum(axis=(0, 2, 3), keepdims=True), g.sum(axis=(0, 2, 3), keepdims=True)

    elif state.mode == "eval":
        if not state.initialized:
            raise RuntimeError("batch_norm in eval mode needs running statistics (train first or init_running)")
        rm = state.running_mean.reshape(1, c, 1, 1).astype(xd.dtype)
        inv = (1.0 / np.sqrt(state.running_var.reshape(1, c, 1, 1) + eps)).astype(xd.dtype)
        xhat = (xd - rm) * inv
        out = gamma.data * xhat + beta.data

        def back(g):
            return (
                g * gamma.data * inv,
                (g * xhat).sum(axis=(0, 2, 3), keepdims=True),
                g.sum(axis=(0, 2, 3), keepdims=True),
            )

    else:
        raise ValueError(f"unknown BN mode {state.mode!r}")

    return record("batch_norm", out.astype(xd.dtype, copy=False), (x, gamma, beta), back)


# ---------------------------------------------------------------- activations

_GELU_C = math.sqrt(2.0 / math.pi)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return record("relu", x.data * mask, (x,), lambda g: (g * mask,))


def gelu(x: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    xd = x.data
    u = _GELU_C * (xd + 0.044715 * xd**3)
    t = np.tanh(u)
    out = 0.5 * xd * (1.0 + t)

    def back(g):
        du = _GELU_C * (1.0 + 3 * 0.044715 * xd**2)
        return (g * (0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t * t) * du),)

    return record("gelu", out, (x,), back)


def activation(kind: str, x: Tensor) -> Tensor:
    if kind == "relu":
        return relu(x)
    if kind == "gelu":
        return gelu(x)
    raise ValueError(f"unknown activation {kind!r}")


# ------------------------------------------------------------------- pooling


def pool_out_size(h: int, w: int, k: int, s: int, p: int) -> tuple[int, int]:
    if k > h + 2 * p or k > w + 2 * p:
        raise ValueError(f"pool window {k} larger than padded input {h + 2 * p}x{w + 2 * p}")
    return (h + 2 * p - k) // s + 1, (w + 2 * p - k) // s + 1


def max_pool2d(x: Tensor, k: int = 3, s: int = 2, p: int = 1) -> Tensor:
    n, c, h, w = x.shape
    ho, wo = pool_out_size(h, w, k, s, p)
    xp = _pad(x.data, p, value=-np.inf)
    out, arg = _kernels.kernel("maxpool_forward")(xp, k, s, ho, wo)
    hp, wp = h + 2 * p, w + 2 * p

    def back(g):
        dxp = _kernels.kernel("maxpool_backward")(g, arg, k, s, hp, wp)
        return (dxp[:, :, p : p + h, p : p + w],)

    return record("max_pool2d", out, (x,), back)


def global_avg_pool(x: Tensor) -> Tensor:
    n, c, h, w = x.shape
    out = x.data.mean(axis=(2, 3), keepdims=True)
    return record("global_avg_pool", out, (x,), lambda g: (np.broadcast_to(g / (h * w), x.shape).copy(),))


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Fully connected map over channels: ``(N,Cin,1,1) -> (N,Cout,1,1)``; ``w`` is ``(Cout,Cin,1,1)``."""
    n, cin, h, wd = x.shape
    if (h, wd) != (1, 1):
        raise ValueError(f"linear expects (N,C,1,1) input, got {x.shape}")
    if w.shape[1:] != (cin, 1, 1):
        raise ValueError(f"weight {w.shape} incompatible with input {x.shape}")
    cout = w.shape[0]
    x2, w2 = x.data.reshape(n, cin), w.data.reshape(cout, cin)
    out = x2 @ w2.T
    inputs = (x, w)
    if b is not None:
        out = out + b.data.reshape(1, cout)
        inputs = (x, w, b)

    def back(g):
        g2 = g.reshape(n, cout)
        grads = [(g2 @ w2).reshape(x.shape), (g2.T @ x2).reshape(w.shape)]
        if b is not None:
            grads.append(g2.sum(axis=0).reshape(1, cout, 1, 1))
        return grads

    return record("linear", out.reshape(n, cout, 1, 1), inputs, back)


# ------------------------------------------------------------ stochastic depth


def stochastic_depth(x: Tensor, rate: float, training: bool, rng: np.random.Generator | None = None) -> Tensor:
    """Per-sample drop of a residual branch with survivor rescaling by ``1/(1-rate)``."""
    if not 0 <= rate < 1:
        raise ValueError(f"drop rate must lie in [0, 1), got {rate}")
    if not training or rate == 0:
        return x
    rng = rng if rng is not None else np.random.default_rng()
    keep = (rng.random(x.shape[0]) >= rate).astype(x.dtype) / x.dtype.type(1 - rate)
    mask = keep.reshape(-1, 1, 1, 1)
    return record("stochastic_depth", x.data * mask, (x,), lambda g: (g * mask,))


# ==================================================================== modules


@dataclass
class Initializer:
    """Source of initial weights: fan-in scaled centered uniform draws."""

    rng: np.random.Generator = field(default_factory=lambda: np.random.default_rng(0))
    dtype: type = STANDARD

    def fan_in_uniform(self, shape, fan_in: int) -> Tensor:
        bound = math.sqrt(6.0 / fan_in)
        return Tensor(self.rng.uniform(-bound, bound, size=shape).astype(self.dtype), requires_grad=True)

    def zeros(self, shape) -> Tensor:
        return Tensor(np.zeros(shape, dtype=self.dtype), requires_grad=True)


@dataclass
class TraceEntry:
    path: str
    module: "Module"
    in_shape: tuple
    out_shape: tuple


class Module:
    """Minimal container with ordered parameter and child registration."""

    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_children", {})
        object.__setattr__(self, "training", True)

    def __setattr__(self, name, value):
        if isinstance(value, Module):
            self._children[name] = value
        elif isinstance(value, Tensor) and value.requires_grad:
            self._params[name] = value
        object.__setattr__(self, name, value)

    def __call__(self, x: Tensor) -> Tensor:
        return self.forward(x)

    def forward(self, x: Tensor) -> Tensor:  # pragma: no cover - abstract
        raise NotImplementedError

    def trace(self, shape: tuple, path: str, out: list[TraceEntry]) -> tuple:
        """Propagate ``shape`` symbolically, appending leaf layers to ``out``."""
        raise NotImplementedError(type(self).__name__)

    def children(self) -> Iterator[tuple[str, "Module"]]:
        return iter(self._children.items())

    def modules(self) -> Iterator["Module"]:
        yield self
        for _, child in self.children():
            yield from child.modules()

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, p in self._params.items():
            yield prefix + name, p
        for name, child in self.children():
            yield from child.named_parameters(prefix + name + ".")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name, child in self.children():
            yield from child.named_buffers(prefix + name + ".")

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            object.__setattr__(m, "training", mode)
            m._on_mode()
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def _on_mode(self) -> None:
        pass

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None


class Sequential(Module):
    def __init__(self, *layers: tuple[str, Module]):
        super().__init__()
        self._order = []
        for name, layer in layers:
            setattr(self, name, layer)
            self._order.append(name)

    def __iter__(self):
        return (getattr(self, name) for name in self._order)

    def __len__(self):
        return len(self._order)

    def forward(self, x):
        for layer in self:
            x = layer(x)
        return x

    def trace(self, shape, path, out):
        for name in self._order:
            shape = getattr(self, name).trace(shape, f"{path}.{name}" if path else name, out)
        return shape


class Leaf(Module):
    """A module that appears as exactly one entry in a trace."""

    def out_shape(self, shape: tuple) -> tuple:
        raise NotImplementedError

    def trace(self, shape, path, out):
        o = self.out_shape(shape)
        out.append(TraceEntry(path, self, tuple(shape), tuple(o)))
        return o


class Conv2d(Leaf):
    def __init__(self, params: ConvParams, init: Initializer | None = None, bias: bool = False):
        super().__init__()
        self.params = params
        self.weight = None
        self.bias = None
        if init is not None:
            fan_in = (params.in_channels // params.groups) * params.kernel**2
            self.weight = init.fan_in_uniform(params.weight_shape(), fan_in)
            if bias:
                self.bias = init.zeros((1, params.out_channels, 1, 1))
        self.has_bias = bias

    def forward(self, x):
        if self.weight is None:
            raise RuntimeError("module was built without weights (symbolic only)")
        return conv2d(x, self.weight, self.params, self.bias)

    def out_shape(self, shape):
        n, c, h, w = shape
        if c != self.params.in_channels:
            raise ValueError(f"conv expects {self.params.in_channels} channels, got {c}")
        return (n, self.params.out_channels, *self.params.out_size(h, w))


class BatchNorm2d(Leaf):
    def __init__(self, channels: int, init: Initializer | None = None, momentum: float = 0.1, eps: float = 1e-5):
        super().__init__()
        self.channels = channels
        self.state = None
        if init is not None:
            self.state = BatchNormState.create(channels, dtype=init.dtype, momentum=momentum, eps=eps)
            self.gamma = self.state.gamma
            self.beta = self.state.beta

    def _on_mode(self):
        if self.state is not None:
            self.state.mode = "train" if self.training else "eval"

    def forward(self, x):
        if self.state is None:
            raise RuntimeError("module was built without weights (symbolic only)")
        return batch_norm(x, self.state)

    def named_buffers(self, prefix=""):
        if self.state is not None:
            yield prefix + "running_mean", self.state.running_mean
            yield prefix + "running_var", self.state.running_var

    def out_shape(self, shape):
        if shape[1] != self.channels:
            raise ValueError(f"BN has {self.channels} channels, input has {shape[1]}")
        return shape


class Activation(Leaf):
    def __init__(self, kind: str = "relu"):
        super().__init__()
        if kind not in ("relu", "gelu"):
            raise ValueError(f"unknown activation {kind!r}")
        self.kind = kind

    def forward(self, x):
        return activation(self.kind, x)

    def out_shape(self, shape):
        return shape


class MaxPool2d(Leaf):
    def __init__(self, k: int = 3, s: int = 2, p: int = 1):
        super().__init__()
        self.k, self.s, self.p = k, s, p

    def forward(self, x):
        return max_pool2d(x, self.k, self.s, self.p)

    def out_shape(self, shape):
        n, c, h, w = shape
        return (n, c, *pool_out_size(h, w, self.k, self.s, self.p))


class GlobalAvgPool(Leaf):
    def forward(self, x):
        return global_avg_pool(x)

    def out_shape(self, shape):
        return (shape[0], shape[1], 1, 1)


class Linear(Leaf):
    def __init__(self, in_features: int, out_features: int, init: Initializer | None = None):
        super().__init__()
        self.in_features, self.out_features = in_features, out_features
        self.weight = self.bias = None
        if init is not None:
            self.weight = init.fan_in_uniform((out_features, in_features, 1, 1), in_features)
            self.bias = init.zeros((1, out_features, 1, 1))

    def forward(self, x):
        if self.weight is None:
            raise RuntimeError("module was built without weights (symbolic only)")
        return linear(x, self.weight, self.bias)

    def out_shape(self, shape):
        n, c, h, w = shape
        if (c, h, w) != (self.in_features, 1, 1):
            raise ValueError(f"linear expects ({self.in_features},1,1) features, got {shape[1:]}")
        return (n, self.out_features, 1, 1)


class DropPath(Module):
    def __init__(self, rate: float):
        super().__init__()
        if not 0 <= rate < 1:
            raise ValueError(f"drop rate must lie in [0, 1), got {rate}")
        self.rate = rate
        self.rng: np.random.Generator | None = None

    def forward(self, x):
        return stochastic_depth(x, self.rate, self.training, self.rng)

    def trace(self, shape, path, out):
        return shape
