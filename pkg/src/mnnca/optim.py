"""Adam with bias correction and per-array gradient normalisation."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0

    @classmethod
    def zeros_like(cls, params: dict[str, np.ndarray]) -> "AdamState":
        return cls({k: np.zeros_like(p) for k, p in params.items()},
                   {k: np.zeros_like(p) for k, p in params.items()}, 0)


@dataclass(frozen=True)
class AdamHyper:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState,
              hyper: AdamHyper = AdamHyper()) -> tuple[dict[str, np.ndarray], AdamState]:
    """Return updated parameters and moments; inputs are left untouched."""
    if params.keys() != grads.keys():
        raise KeyError(f"params {sorted(params)} vs grads {sorted(grads)}")
    t = state.step + 1
    bc1 = 1.0 - hyper.beta1 ** t
    bc2 = 1.0 - hyper.beta2 ** t
    new_p, new_m, new_v = {}, {}, {}
    for k, p in params.items():
        g = grads[k]
        if g.shape != p.shape:
            raise ValueError(f"{k}: gradient {g.shape} vs parameter {p.shape}")
        m = hyper.beta1 * state.m[k] + (1.0 - hyper.beta1) * g
        v = hyper.beta2 * state.v[k] + (1.0 - hyper.beta2) * (g * g)
        m_hat = m / bc1
        v_hat = v / bc2
        new_p[k] = (p - hyper.lr * m_hat / (np.sqrt(v_hat) + hyper.eps)).astype(p.dtype)
        new_m[k] = m.astype(p.dtype)
        new_v[k] = v.astype(p.dtype)
    return new_p, AdamState(new_m, new_v, t)


def normalize_grads(grads: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    out = {}
    for k, g in grads.items():
        norm = float(np.sqrt(np.sum(np.square(g, dtype=np.float64))))
        out[k] = (g / (norm + 1e-8)).astype(g.dtype)
    return out
