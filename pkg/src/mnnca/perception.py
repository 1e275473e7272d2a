"""Fixed multi-scale stencils and the perception stack fed to each rule."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import engine
from .engine import Kernel, Tensor

KERNEL_NAMES = ("identity", "sobel_x", "sobel_y", "laplacian")

_SOBEL_X = np.array([[-1, 0, 1], [-2, 0, 2], [-1, 0, 1]], dtype=np.float64) / 8.0
_STENCILS = {
    "identity": np.array([[0, 0, 0], [0, 1, 0], [0, 0, 0]], dtype=np.float64),
    "sobel_x": _SOBEL_X,
    "sobel_y": _SOBEL_X.T.copy(),
    "laplacian": np.array([[1, 2, 1], [2, -12, 2], [1, 2, 1]], dtype=np.float64) / 16.0,
}


@dataclass(frozen=True)
class NeighborhoodSpec:
    """A perception scale: 3x3 stencils dilated by ``radius``."""

    radius: int = 1
    kernels: tuple[str, ...] = field(default=KERNEL_NAMES)

    def __post_init__(self):
        object.__setattr__(self, "kernels", tuple(self.kernels))
        if self.radius < 1:
            raise ValueError(f"radius must be >= 1, got {self.radius}")
        if not self.kernels:
            raise ValueError("kernel set must be non-empty")
        unknown = set(self.kernels) - set(KERNEL_NAMES)
        if unknown:
            raise ValueError(f"unknown kernels {sorted(unknown)}; choose from {KERNEL_NAMES}")
        if len(set(self.kernels)) != len(self.kernels):
            raise ValueError(f"duplicate kernels in {self.kernels}")

    def to_json(self) -> dict:
        return {"radius": self.radius, "kernels": list(self.kernels)}

    @classmethod
    def from_json(cls, d: dict) -> "NeighborhoodSpec":
        return cls(radius=int(d.get("radius", 1)), kernels=tuple(d.get("kernels", KERNEL_NAMES)))


def stencil(name: str) -> np.ndarray:
    return _STENCILS[name].copy()


def standard_kernels(spec: NeighborhoodSpec, channels: int, dtype=np.float32) -> list[Kernel]:
    """One depthwise kernel (groups = channels) per stencil name, in spec order."""
    if channels < 1:
        raise ValueError(f"channels must be >= 1, got {channels}")
    out = []
    for name in spec.kernels:
        w = np.broadcast_to(_STENCILS[name], (channels, 1, 3, 3)).astype(dtype)
        out.append(Kernel(w, groups=channels, dilation=spec.radius))
    return out


def perception_channels(channels: int, specs) -> int:
    return channels * sum(len(s.kernels) for s in specs)


def perceive(state, specs, kernel_cache: dict | None = None) -> Tensor:
    """Concatenate stencil responses: spec-major, then kernel, then channel.

    Output channel ``(s, k, c)`` sits at ``offset(s) + k*C + c`` where
    ``offset(s)`` is the channel count contributed by earlier specs.
    """
    specs = list(specs)
    if not specs:
        raise ValueError("perceive needs at least one neighborhood")
    state = engine.as_tensor(state)
    C = state.shape[1]
    parts = []
    for spec in specs:
        key = (spec, C, state.dtype)
        kernels = kernel_cache.get(key) if kernel_cache is not None else None
        if kernels is None:
            kernels = standard_kernels(spec, C, state.dtype)
            if kernel_cache is not None:
                kernel_cache[key] = kernels
        for name, k in zip(spec.kernels, kernels):
            # identity stencil is an exact copy; skip the convolution
            parts.append(state if name == "identity" else engine.conv2d_circular(state, k))
    if len(parts) == 1:
        return parts[0]
    return engine.concat_channels(parts)
