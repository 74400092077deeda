"""Central finite-difference checks of analytic gradients."""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, backward


def numeric_grad(fn: Callable[[], Tensor], x: Tensor, eps: float = 1e-5) -> np.ndarray:
    g = np.zeros_like(x.data)
    flat = x.data.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + eps
        fp = float(fn().data.sum())
        flat[i] = old - eps
        fm = float(fn().data.sum())
        flat[i] = old
        gflat[i] = (fp - fm) / (2 * eps)
    return g


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    num = np.abs(analytic - numeric).max()
    den = max(np.abs(analytic).max(), np.abs(numeric).max(), 1e-8)
    return float(num / den)


def check_gradients(fn: Callable[[], Tensor], inputs: Sequence[Tensor], eps: float = 1e-5,
                    probe: np.ndarray | None = None) -> float:
    """Worst relative error between backprop and finite differences.

    ``fn`` maps the current values of ``inputs`` to a tensor; a fixed random
    ``probe`` turns it into the scalar ``sum(fn() * probe)`` so every output
    element contributes.
    """
    for x in inputs:
        x.requires_grad = True
        x.grad = None
    out = fn()
    if probe is None:
        probe = np.random.default_rng(0).standard_normal(out.dims)

    def scalar() -> Tensor:
        return (fn() * probe).sum()

    backward(scalar())
    worst = 0.0
    for x in inputs:
        analytic = x.grad if x.grad is not None else np.zeros_like(x.data)
        worst = max(worst, relative_error(analytic, numeric_grad(scalar, x, eps)))
    return worst
