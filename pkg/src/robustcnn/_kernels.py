"""Hot inner loops: depthwise convolution and max pooling.

Every kernel exists twice, as a numba ``@njit`` loop nest and as a pure-numpy
routine.  The backend is chosen once per process from ``ROBUSTCNN_KERNELS``
(``numba`` or ``numpy``); when unset, numba is used if it imports.  Both
backends take already-padded inputs and return freshly allocated arrays.
"""

from __future__ import annotations

import os

import numpy as np

_ENV = "ROBUSTCNN_KERNELS"

try:  # numba is optional; the numpy path is always available
    import numba

    if "NUMBA_THREADING_LAYER" not in os.environ:
        numba.config.THREADING_LAYER = "workqueue"
    HAS_NUMBA = True
except ImportError:  # pragma: no cover - exercised only without numba
    numba = None
    HAS_NUMBA = False


def _resolve_backend() -> str:
    choice = os.environ.get(_ENV, "").strip().lower()
    if choice not in ("", "numba", "numpy"):
        raise ValueError(f"{_ENV} must be 'numba' or 'numpy', got {choice!r}")
    if choice == "numpy" or not HAS_NUMBA:
        return "numpy"
    return "numba"


BACKEND = _resolve_backend()


# ---------------------------------------------------------------- numpy path


def dw_forward_numpy(xp, w, stride, ho, wo):
    n, c = xp.shape[:2]
    k = w.shape[-1]
    out = np.zeros((n, c, ho, wo), dtype=xp.dtype)
    hs, ws = stride * (ho - 1) + 1, stride * (wo - 1) + 1
    for i in range(k):
        for j in range(k):
            out += xp[:, :, i : i + hs : stride, j : j + ws : stride] * w[None, :, i, j, None, None]
    return out


def dw_backward_input_numpy(g, w, stride, hp, wp):
    n, c, ho, wo = g.shape
    k = w.shape[-1]
    dxp = np.zeros((n, c, hp, wp), dtype=g.dtype)
    hs, ws = stride * (ho - 1) + 1, stride * (wo - 1) + 1
    for i in range(k):
        for j in range(k):
            dxp[:, :, i : i + hs : stride, j : j + ws : stride] += g * w[None, :, i, j, None, None]
    return dxp


def dw_backward_weight_numpy(g, xp, stride, k):
    n, c, ho, wo = g.shape
    dw = np.zeros((c, k, k), dtype=g.dtype)
    hs, ws = stride * (ho - 1) + 1, stride * (wo - 1) + 1
    for i in range(k):
        for j in range(k):
            win = xp[:, :, i : i + hs : stride, j : j + ws : stride]
            dw[:, i, j] = np.einsum("nchw,nchw->c", g, win)
    return dw


def maxpool_forward_numpy(xp, k, stride, ho, wo):
    n, c = xp.shape[:2]
    hs, ws = stride * (ho - 1) + 1, stride * (wo - 1) + 1
    out = np.full((n, c, ho, wo), -np.inf, dtype=xp.dtype)
    arg = np.zeros((n, c, ho, wo), dtype=np.int64)
    for i in range(k):
        for j in range(k):
            win = xp[:, :, i : i + hs : stride, j : j + ws : stride]
            better = win > out  # strict: first maximum wins ties
            out = np.where(better, win, out)
            arg[better] = i * k + j
    return out, arg


def maxpool_backward_numpy(g, arg, k, stride, hp, wp):
    n, c, ho, wo = g.shape
    dxp = np.zeros((n, c, hp, wp), dtype=g.dtype)
    hs, ws = stride * (ho - 1) + 1, stride * (wo - 1) + 1
    for i in range(k):
        for j in range(k):
            dxp[:, :, i : i + hs : stride, j : j + ws : stride] += np.where(arg == i * k + j, g, 0)
    return dxp


# ---------------------------------------------------------------- numba path

if HAS_NUMBA:

    @numba.njit(cache=True, parallel=True)
    def _dw_forward_nb(xp, w, stride, ho, wo):
        n, c = xp.shape[0], xp.shape[1]
        k = w.shape[2]
        out = np.zeros((n, c, ho, wo), dtype=xp.dtype)
        for nc in numba.prange(n * c):
            b = nc // c
            ch = nc % c
            for oy in range(ho):
                iy = oy * stride
                for ox in range(wo):
                    ix = ox * stride
                    acc = xp.dtype.type(0)
                    for i in range(k):
                        for j in range(k):
                            acc += xp[b, ch, iy + i, ix + j] * w[ch, i, j]
                    out[b, ch, oy, ox] = acc
        return out

    @numba.njit(cache=True, parallel=True)
    def _dw_backward_input_nb(g, w, stride, hp, wp):
        n, c, ho, wo = g.shape
        k = w.shape[2]
        dxp = np.zeros((n, c, hp, wp), dtype=g.dtype)
        for nc in numba.prange(n * c):
            b = nc // c
            ch = nc % c
            for oy in range(ho):
                iy = oy * stride
                for ox in range(wo):
                    ix = ox * stride
                    gv = g[b, ch, oy, ox]
                    for i in range(k):
                        for j in range(k):
                            dxp[b, ch, iy + i, ix + j] += gv * w[ch, i, j]
        return dxp

    # fastmath lets the inner reduction vectorize; order differs from the numpy path by roundoff only
    @numba.njit(cache=True, parallel=True, fastmath=True)
    def _dw_backward_weight_nb(g, xp, stride, k):
        n, c, ho, wo = g.shape
        dw = np.zeros((c, k, k), dtype=g.dtype)
        for ch in numba.prange(c):
            for b in range(n):
                for i in range(k):
                    for j in range(k):
                        acc = g.dtype.type(0)
                        for oy in range(ho):
                            iy = oy * stride + i
                            for ox in range(wo):
                                acc += g[b, ch, oy, ox] * xp[b, ch, iy, ox * stride + j]
                        dw[ch, i, j] += acc
        return dw

    @numba.njit(cache=True, parallel=True)
    def _maxpool_forward_nb(xp, k, stride, ho, wo):
        n, c = xp.shape[0], xp.shape[1]
        out = np.empty((n, c, ho, wo), dtype=xp.dtype)
        arg = np.empty((n, c, ho, wo), dtype=np.int64)
        for nc in numba.prange(n * c):
            b = nc // c
            ch = nc % c
            for oy in range(ho):
                for ox in range(wo):
                    best = -np.inf
                    besti = 0
                    for i in range(k):
                        for j in range(k):
                            v = xp[b, ch, oy * stride + i, ox * stride + j]
                            if v > best:
                                best = v
                                besti = i * k + j
                    out[b, ch, oy, ox] = best
                    arg[b, ch, oy, ox] = besti
        return out, arg

    @numba.njit(cache=True, parallel=True)
    def _maxpool_backward_nb(g, arg, k, stride, hp, wp):
        n, c, ho, wo = g.shape
        dxp = np.zeros((n, c, hp, wp), dtype=g.dtype)
        for nc in numba.prange(n * c):
            b = nc // c
            ch = nc % c
            for oy in range(ho):
                for ox in range(wo):
                    a = arg[b, ch, oy, ox]
                    dxp[b, ch, oy * stride + a // k, ox * stride + a % k] += g[b, ch, oy, ox]
        return dxp


def dw_forward_numba(xp, w, stride, ho, wo):
    return _dw_forward_nb(np.ascontiguousarray(xp), np.ascontiguousarray(w), stride, ho, wo)


def dw_backward_input_numba(g, w, stride, hp, wp):
    return _dw_backward_input_nb(np.ascontiguousarray(g), np.ascontiguousarray(w), stride, hp, wp)


def dw_backward_weight_numba(g, xp, stride, k):
    return _dw_backward_weight_nb(np.ascontiguousarray(g), np.ascontiguousarray(xp), stride, k)


def maxpool_forward_numba(xp, k, stride, ho, wo):
    return _maxpool_forward_nb(np.ascontiguousarray(xp), k, stride, ho, wo)


def maxpool_backward_numba(g, arg, k, stride, hp, wp):
    return _maxpool_backward_nb(np.ascontiguousarray(g), np.ascontiguousarray(arg), k, stride, hp, wp)


KERNELS = {
    "numpy": {
        "dw_forward": dw_forward_numpy,
        "dw_backward_input": dw_backward_input_numpy,
        "dw_backward_weight": dw_backward_weight_numpy,
        "maxpool_forward": maxpool_forward_numpy,
        "maxpool_backward": maxpool_backward_numpy,
    },
}
if HAS_NUMBA:
    KERNELS["numba"] = {
        "dw_forward": dw_forward_numba,
        "dw_backward_input": dw_backward_input_numba,
        "dw_backward_weight": dw_backward_weight_numba,
        "maxpool_forward": maxpool_forward_numba,
        "maxpool_backward": maxpool_backward_numba,
    }


def kernel(name: str, backend: str | None = None):
    """Look up kernel ``name`` for ``backend`` (default: the process backend)."""
    return KERNELS[backend or BACKEND][name]
