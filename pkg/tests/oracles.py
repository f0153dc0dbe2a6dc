"""Independent reference implementations used by the tests.

Deliberately naive: explicit loops, float64, no shared code with the package.
"""

import math

import numpy as np


def conv2d_loops(x, w, stride=1, padding=0, groups=1, bias=None):
    n, c, h, wd = x.shape
    cout, cg, k, _ = w.shape
    og = cout // groups
    ho = (h + 2 * padding - k) // stride + 1
    wo = (wd + 2 * padding - k) // stride + 1
    out = np.zeros((n, cout, ho, wo))
    for b in range(n):
        for o in range(cout):
            grp = o // og
            for oy in range(ho):
                for ox in range(wo):
                    acc = 0.0
                    for ci in range(cg):
                        for i in range(k):
                            for j in range(k):
                                iy = oy * stride + i - padding
                                ix = ox * stride + j - padding
                                if 0 <= iy < h and 0 <= ix < wd:
                                    acc += float(x[b, grp * cg + ci, iy, ix]) * float(w[o, ci, i, j])
                    out[b, o, oy, ox] = acc + (0.0 if bias is None else float(bias[0, o, 0, 0]))
    return out


def depthwise_loops(x, w, stride, padding):
    """``w`` is ``(C, 1, k, k)``; per-channel cross-correlation."""
    n, c, h, wd = x.shape
    k = w.shape[-1]
    ho = (h + 2 * padding - k) // stride + 1
    wo = (wd + 2 * padding - k) // stride + 1
    out = np.zeros((n, c, ho, wo))
    for b in range(n):
        for ch in range(c):
            for oy in range(ho):
                for ox in range(wo):
                    acc = 0.0
                    for i in range(k):
                        for j in range(k):
                            iy, ix = oy * stride + i - padding, ox * stride + j - padding
                            if 0 <= iy < h and 0 <= ix < wd:
                                acc += x[b, ch, iy, ix] * w[ch, 0, i, j]
                    out[b, ch, oy, ox] = acc
    return out


def maxpool_loops(x, k, s, p):
    n, c, h, w = x.shape
    ho, wo = (h + 2 * p - k) // s + 1, (w + 2 * p - k) // s + 1
    out = np.full((n, c, ho, wo), -np.inf)
    for b in range(n):
        for ch in range(c):
            for oy in range(ho):
                for ox in range(wo):
                    for i in range(k):
                        for j in range(k):
                            iy, ix = oy * s + i - p, ox * s + j - p
                            if 0 <= iy < h and 0 <= ix < w:
                                out[b, ch, oy, ox] = max(out[b, ch, oy, ox], x[b, ch, iy, ix])
    return out


def batch_norm_ref(x, gamma, beta, eps=1e-5):
    mu = x.mean(axis=(0, 2, 3), keepdims=True)
    var = x.var(axis=(0, 2, 3), keepdims=True)
    return gamma * (x - mu) / np.sqrt(var + eps) + beta


def gelu_tanh(x):
    return 0.5 * x * (1 + np.tanh(math.sqrt(2 / math.pi) * (x + 0.044715 * x**3)))


def log_softmax(z):
    z = z - z.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def resnet50_macs(resolution=224, classes=1000):
    """ResNet-50 multiply-accumulates from the layer table, counted by hand."""
    total = 0
    r = resolution // 2
    total += r * r * 64 * 3 * 49  # 7x7/2 stem
    r //= 2  # 3x3/2 max pool
    cin = 64
    for width, depth, stride in ((64, 3, 1), (128, 4, 2), (256, 6, 2), (512, 3, 2)):
        for d in range(depth):
            s = stride if d == 0 else 1
            ro = r // s
            total += r * r * cin * width  # 1x1 reduce
            total += ro * ro * width * width * 9  # 3x3 (strided)
            total += ro * ro * width * width * 4  # 1x1 expand
            if d == 0:
                total += ro * ro * cin * width * 4  # projection
            cin, r = width * 4, ro
    return total + cin * classes


class KinkCrossed(Exception):
    pass


class KinkWatch:
    """Detects ReLU sign flips across the forward passes of a finite-difference check.

    Central differences are only valid where no ReLU input changes sign
    between the base point and the perturbed points.  Call ``mark()`` after
    one reference forward pass; ``crossed`` is then true if any later pass
    saw a different sign pattern.  With ``abort`` the first flip ends the
    ``with`` block early; perturbed tensors are then left modified, so the
    instance must be discarded.
    """

    def __init__(self, abort: bool = True):
        self.calls = []
        self.per_pass = None
        self.abort = abort
        self.flipped = False

    def __enter__(self):
        from robustcnn import layers

        self._layers = layers
        self._orig = layers.relu

        def spy(x):
            sign = np.sign(x.data)
            n = self.per_pass
            if n:
                ref = self.calls[len(self.calls) % n]
                if not np.array_equal(sign, ref):
                    self.flipped = True
                    if self.abort:
                        raise KinkCrossed
                self.calls.append(None)
            else:
                self.calls.append(sign)
            return self._orig(x)

        layers.relu = spy
        return self

    def __exit__(self, exc_type, exc, tb):
        self._layers.relu = self._orig
        return exc_type is KinkCrossed

    def mark(self):
        self.per_pass = len(self.calls)

    @property
    def crossed(self) -> bool:
        return self.flipped


def checked_instances(make, count, select=None, include_x=True, **kw):
    """grad_check results for the first ``count`` seeds whose check never crosses a ReLU kink.

    ``make(seed)`` returns ``(model, x, probe)``; the checked tensors are ``x``
    plus ``select(model)`` (default: every parameter).
    """
    from robustcnn import tensor as T
    from robustcnn.gradcheck import grad_check

    results, seed = [], 0
    while len(results) < count:
        model, x, probe = make(seed)
        seed += 1

        def f(x_, *_):
            return T.tensor_sum(T.mul(model(x_), probe))

        with KinkWatch() as watch:
            with T.no_grad():
                f(x)
            watch.mark()
            params = model.parameters() if select is None else select(model)
            res = grad_check(lambda *ts: f(x) if not include_x else f(*ts), ([x] if include_x else []) + list(params), **kw)
        if not watch.crossed:
            results.append(res)
        if seed >= 4 * count and len(results) < count:
            raise AssertionError("too many instances straddle a ReLU kink")
    return results
