"""Central finite-difference check of tape gradients."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, TapeError, backward, no_grad, reset_tape


@dataclass
class GradCheckResult:
    passed: bool
    max_rel_err: float
    analytic: list[np.ndarray]
    numeric: list[np.ndarray]


def relative_error(a: np.ndarray, n: np.ndarray) -> np.ndarray:
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-8)


def numeric_grad(f: Callable[[], Tensor], x: Tensor, h: float, richardson: bool = False) -> np.ndarray:
    """Coordinate-wise ``(f(x+h) - f(x-h)) / 2h``; ``x`` is perturbed in place and restored.

    With ``richardson`` the estimate is ``(4 D(h/2) - D(h)) / 3``, which cancels
    the ``h^2`` truncation term of the central difference.
    """
    if richardson:
        return (4.0 * numeric_grad(f, x, h / 2) - numeric_grad(f, x, h)) / 3.0
    flat = x.data.reshape(-1)
    out = np.zeros(flat.size, dtype=np.float64)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = float(f().data.reshape(-1)[0])
            flat[i] = orig - h
            fm = float(f().data.reshape(-1)[0])
            flat[i] = orig
            out[i] = (fp - fm) / (2.0 * h)
    return out.reshape(x.shape)


def grad_check(
    f: Callable[..., Tensor],
    x: Tensor | Sequence[Tensor],
    h: float = 1e-4,
    tol: float = 1e-6,
    richardson: bool = False,
) -> GradCheckResult:
    """Compare backward() against central differences for every tensor in ``x``.

    ``f`` is called with the tensors of ``x`` as positional arguments and must
    return a (1,1,1,1) tensor.  Inputs are switched to ``requires_grad`` for
    the duration of the check.  Relative error per coordinate is
    ``|a - n| / max(|a|, |n|, 1e-8)``.
    """
    if h <= 0:
        raise ValueError("step h must be positive")
    xs = [x] if isinstance(x, Tensor) else list(x)
    flags = [t.requires_grad for t in xs]
    for t in xs:
        t.requires_grad = True
        t.grad = None

    reset_tape()
    out = f(*xs)
    if out.shape != (1, 1, 1, 1):
        raise TapeError(f"grad_check needs a scalar-valued function, got shape {out.shape}")
    got = backward(out)
    analytic = [np.asarray(got.get(t, np.zeros_like(t.data)), dtype=np.float64) for t in xs]

    numeric = [numeric_grad(lambda: f(*xs), t, h, richardson) for t in xs]
    for t, flag in zip(xs, flags):
        t.requires_grad = flag
        t.grad = None

    worst = max(float(relative_error(a, n).max()) for a, n in zip(analytic, numeric))
    return GradCheckResult(worst <= tol, worst, analytic, numeric)
