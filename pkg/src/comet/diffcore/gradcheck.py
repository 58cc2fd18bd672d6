"""Central finite-difference oracle, independent of autograd."""

from __future__ import annotations

from typing import Callable, Iterable

import numpy as np
import torch


def rel_error(analytic, numeric, floor: float = 1e-8) -> np.ndarray:
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)


@torch.no_grad()
def numeric_grad(fn: Callable[[], torch.Tensor], t: torch.Tensor, eps: float = 1e-6,
                 indices: Iterable[int] | None = None) -> np.ndarray:
    """d fn() / d t by central differences, perturbing ``t`` in place.

    ``fn`` must return a scalar tensor. When ``indices`` is given only those
    flat positions are evaluated; the rest of the result is NaN.
    """
    flat = t.view(-1)
    out = np.full(flat.numel(), np.nan)
    idx = range(flat.numel()) if indices is None else indices
    for i in idx:
        orig = flat[i].item()
        flat[i] = orig + eps
        fp = float(fn())
        flat[i] = orig - eps
        fm = float(fn())
        flat[i] = orig
        out[i] = (fp - fm) / (2 * eps)
    return out.reshape(tuple(t.shape))


@torch.no_grad()
def piecewise_numeric_grad(fn: Callable[[], tuple[torch.Tensor, torch.Tensor]], t: torch.Tensor,
                           eps: float = 1e-4, min_eps: float = 1e-9) -> tuple[np.ndarray, int, int]:
    """Central differences for a piecewise-smooth ``fn`` that never straddle a kink when avoidable.

    ``fn`` returns ``(scalar, pattern)`` where ``pattern`` identifies the smooth piece
    (e.g. activation signs). If either probe lands on another piece the step is halved,
    down to ``min_eps``. Returns the gradient, the number of entries that needed a
    smaller step and the number still straddling a kink at ``min_eps``.
    """
    _, base = fn()
    flat = t.view(-1)
    out = np.empty(flat.numel())
    shrunk = straddling = 0
    for i in range(flat.numel()):
        orig = flat[i].item()
        h = eps
        while True:
            flat[i] = orig + h
            fp, pp = fn()
            flat[i] = orig - h
            fm, pm = fn()
            flat[i] = orig
            same = torch.equal(pp, base) and torch.equal(pm, base)
            if same or h / 2 < min_eps:
                break
            h /= 2
        shrunk += h < eps
        straddling += not same
        out[i] = (float(fp) - float(fm)) / (2 * h)
    return out.reshape(tuple(t.shape)), shrunk, straddling


def backward(root: torch.Tensor, inputs=None):
    """Reverse-mode sweep from a scalar root; gradients accumulate into ``.grad``."""
    if root.numel() != 1:
        raise ValueError(f"backward needs a scalar root, got shape {tuple(root.shape)}")
    root.backward(inputs=inputs)
