"""Central finite differences, used as the oracle for every backward pass."""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, no_grad

__all__ = ["finite_diff_grad", "relative_error", "check_gradients"]


def finite_diff_grad(f: Callable[[Tensor], object], x: Tensor, h: float = 1e-6) -> np.ndarray:
    """Estimate d f / d x element by element in float64.

    ``f`` must be deterministic and return a scalar (Tensor or number). The
    input is promoted to float64 for the evaluation; ``x`` itself is left
    untouched.
    """
    base = np.array(x.data, dtype=np.float64)
    grad = np.zeros_like(base)
    flat = base.reshape(-1)
    gflat = grad.reshape(-1)

    def evaluate(arr):
        with no_grad():
            value = f(Tensor(arr, dtype=np.float64))
        return float(value.item() if isinstance(value, Tensor) else value)

    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = evaluate(base)
        flat[i] = orig - h
        down = evaluate(base)
        flat[i] = orig
        gflat[i] = (up - down) / (2 * h)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> float:
    """Max absolute difference scaled by the larger of the two gradients' max magnitude."""
    a = np.asarray(analytic, dtype=np.float64)
    b = np.asarray(numeric, dtype=np.float64)
    scale = max(np.abs(a).max(initial=0.0), np.abs(b).max(initial=0.0), floor)
    return float(np.abs(a - b).max(initial=0.0) / scale)


def check_gradients(
    f: Callable[..., Tensor],
    inputs: Sequence[np.ndarray],
    h: float = 1e-6,
) -> float:
    """Return the worst relative error of ``backward()`` against finite differences.

    ``f`` receives one float64 Tensor per entry of ``inputs``; each input is
    perturbed in turn with the others held fixed.
    """
    leaves = [Tensor(np.asarray(a, dtype=np.float64), requires_grad=True, dtype=np.float64)
              for a in inputs]
    f(*leaves).backward()
    worst = 0.0
    for i, leaf in enumerate(leaves):
        others = [np.asarray(a, dtype=np.float64) for a in inputs]

        def partial(t, i=i):
            args = [Tensor(o, dtype=np.float64) for o in others]
            args[i] = t
            return f(*args)

        numeric = finite_diff_grad(partial, leaf, h)
        analytic = leaf.grad if leaf.grad is not None else np.zeros_like(numeric)
        worst = max(worst, relative_error(analytic, numeric))
    return worst
