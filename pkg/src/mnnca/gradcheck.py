"""Central finite-difference checks of recorded gradients.

Relative error is norm-wise per input: ``max|a - n| / max(max|a|, max|n|)``,
then maximised over inputs. Checks run in float64.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import engine


@dataclass
class GradReport:
    name: str
    trials: int
    max_rel_error: float


def analytic_grads(fn: Callable, arrays: Sequence[np.ndarray]) -> list[np.ndarray]:
    tensors = [engine.Tensor(a.copy(), requires_grad=True) for a in arrays]
    with engine.DiffGraph() as g:
        loss = fn(*tensors)
    grads = engine.backward(loss, g)
    return [grads.get(t, np.zeros_like(t.data)) for t in tensors]


def _value(fn, arrays) -> float:
    return float(fn(*[engine.Tensor(a) for a in arrays]).data)


def numeric_grads(fn: Callable, arrays: Sequence[np.ndarray], h: float = 1e-6,
                  max_coords: int | None = None, rng=None) -> list[tuple[np.ndarray, np.ndarray]]:
    """Central differences; returns (flat indices, values) per input."""
    out = []
    arrays = [a.copy() for a in arrays]
    for i, a in enumerate(arrays):
        flat = a.reshape(-1)
        idx = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            idx = np.sort(rng.choice(flat.size, max_coords, replace=False))
        vals = np.empty(idx.size)
        for j, k in enumerate(idx):
            orig = flat[k]
            flat[k] = orig + h
            fp = _value(fn, arrays)
            flat[k] = orig - h
            fm = _value(fn, arrays)
            flat[k] = orig
            vals[j] = (fp - fm) / (2 * h)
        out.append((idx, vals))
    return out


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    scale = max(np.max(np.abs(analytic)), np.max(np.abs(numeric)))
    if scale == 0:
        return 0.0
    return float(np.max(np.abs(analytic - numeric)) / scale)


def check(fn: Callable, arrays: Sequence[np.ndarray], h: float = 1e-6,
          max_coords: int | None = None, rng=None) -> float:
    """Max relative error between recorded and finite-difference gradients."""
    arrays = [np.asarray(a, dtype=np.float64) for a in arrays]
    ana = analytic_grads(fn, arrays)
    num = numeric_grads(fn, arrays, h, max_coords, rng)
    errs = [relative_error(g.reshape(-1)[idx], vals) for g, (idx, vals) in zip(ana, num)]
    return max(errs)


def weighted_sum(out: engine.Tensor, weights: np.ndarray) -> engine.Tensor:
    """Reduce any output to a scalar whose gradient probes every element."""
    return engine.sum(engine.mul(out, weights.astype(out.dtype)))
