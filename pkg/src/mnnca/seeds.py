"""Initial states: uniform noise and multi-octave periodic gradient noise."""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import _kernels

# Max |noise| for unit gradients in 2-D: every corner contributes at most
# |offset| = sqrt(2)/2 at a cell centre, and the fade weights sum to one.
PERLIN_AMPLITUDE = float(np.sqrt(0.5))


def fade(t):
    """Quintic smoothstep 6t^5 - 15t^4 + 10t^3."""
    return t * t * t * (t * (t * 6.0 - 15.0) + 10.0)


@dataclass(frozen=True)
class UniformSeed:
    lo: float = -0.5
    hi: float = 0.5
    seed: int = 0

    def __post_init__(self):
        # lo == hi is accepted as a constant field
        if self.lo > self.hi:
            raise ValueError(f"uniform seed needs lo <= hi, got {self.lo} > {self.hi}")

    kind = "uniform"

    def to_json(self) -> dict:
        return {"kind": "uniform", "lo": self.lo, "hi": self.hi, "seed": self.seed}


@dataclass(frozen=True)
class PerlinSeed:
    frequency: int = 4
    octaves: int = 4
    persistence: float = 0.5
    seed: int = 0
    periodic: bool = True

    def __post_init__(self):
        if int(self.frequency) != self.frequency or self.frequency < 1:
            raise ValueError(f"frequency must be a positive integer, got {self.frequency}")
        if not 1 <= self.octaves <= 8:
            raise ValueError(f"octaves must be in [1, 8], got {self.octaves}")
        if not 0.0 < self.persistence <= 1.0:
            raise ValueError(f"persistence must be in (0, 1], got {self.persistence}")

    kind = "perlin"

    def to_json(self) -> dict:
        return {"kind": "perlin", "frequency": self.frequency, "octaves": self.octaves,
                "persistence": self.persistence, "seed": self.seed, "periodic": self.periodic}


SeedSpec = UniformSeed | PerlinSeed


def seed_spec_from_json(d: dict) -> SeedSpec:
    d = dict(d)
    kind = d.pop("kind", "perlin")
    if kind == "uniform":
        return UniformSeed(**d)
    if kind == "perlin":
        return PerlinSeed(**d)
    raise ValueError(f"unknown seed kind {kind!r}")


def with_seed(spec: SeedSpec, seed: int) -> SeedSpec:
    return replace(spec, seed=int(seed))


def _rng(*key: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(k) for k in key])))


def lattice_gradients(frequency_y: int, frequency_x: int, seed: int, periodic: bool):
    """Unit gradient vectors (gy, gx) on a (fy+1, fx+1) lattice."""
    rng = _rng(seed, 0x9E3779B9)
    theta = rng.uniform(0.0, 2.0 * np.pi, size=(frequency_y + 1, frequency_x + 1))
    grads = np.stack([np.sin(theta), np.cos(theta)], axis=-1)
    if periodic:
        grads[-1, :] = grads[0, :]
        grads[:, -1] = grads[:, 0]
    return grads


def perlin_raw(h: int, w: int, frequency: int, seed: int, periodic: bool = True) -> np.ndarray:
    """Gradient noise before rescaling: exactly zero on lattice pixels."""
    if h <= 0 or w <= 0:
        raise ValueError(f"noise dimensions must be positive, got {h}x{w}")
    if frequency < 1 or int(frequency) != frequency:
        raise ValueError(f"frequency must be a positive integer, got {frequency}")
    grads = lattice_gradients(int(frequency), int(frequency), seed, periodic)
    return _kernels.gradient_noise(grads, h, w)


def perlin_at(ys, xs, frequency: int, seed: int, periodic: bool = True, h: int = 1,
              w: int = 1) -> np.ndarray:
    """Evaluate the noise of an ``h x w`` field at arbitrary pixel coordinates.

    Periodic fields wrap, so ``perlin_at(y, x + w)`` equals ``perlin_at(y, x)``.
    Used for tiling checks; the grid path is :func:`perlin2d`.
    """
    grads = lattice_gradients(int(frequency), int(frequency), seed, periodic)
    L = int(frequency)
    fy = np.asarray(ys, dtype=np.float64) * L / h
    fx = np.asarray(xs, dtype=np.float64) * L / w
    if periodic:
        fy = np.mod(fy, L)
        fx = np.mod(fx, L)
    iy = np.minimum(np.floor(fy).astype(np.int64), L - 1)
    ix = np.minimum(np.floor(fx).astype(np.int64), L - 1)
    ty, tx = fy - iy, fx - ix

    def corner(dy, dx):
        g = grads[iy + dy, ix + dx]
        return g[..., 0] * (ty - dy) + g[..., 1] * (tx - dx)

    u, v = fade(tx), fade(ty)
    top = corner(0, 0) + u * (corner(0, 1) - corner(0, 0))
    bot = corner(1, 0) + u * (corner(1, 1) - corner(1, 0))
    return (top + v * (bot - top)) / PERLIN_AMPLITUDE


def perlin2d(h: int, w: int, frequency: int, seed: int, periodic: bool = True) -> np.ndarray:
    """Gradient noise with ``frequency`` lattice cells per side, range [-1, 1]."""
    return perlin_raw(h, w, frequency, seed, periodic) / PERLIN_AMPLITUDE


def octave_seed(seed: int, octave: int) -> int:
    return int(np.random.SeedSequence([int(seed), int(octave)]).generate_state(1)[0])


def fbm(h: int, w: int, spec: PerlinSeed) -> np.ndarray:
    """Sum of octaves ``persistence**k * perlin2d(frequency * 2**k)``, range [-1, 1]."""
    total = np.zeros((h, w), dtype=np.float64)
    norm = 0.0
    for k in range(spec.octaves):
        amp = spec.persistence ** k
        seed = spec.seed if k == 0 else octave_seed(spec.seed, k)
        total += amp * perlin2d(h, w, spec.frequency * 2 ** k, seed, spec.periodic)
        norm += amp
    return total / norm


def make_seed(spec: SeedSpec, shape, dtype=np.float32) -> np.ndarray:
    """Independent field per (batch, channel), each from its own sub-seed."""
    B, C, H, W = shape
    if min(shape) < 1:
        raise ValueError(f"invalid seed shape {shape}")
    out = np.empty((B, C, H, W), dtype=dtype)
    if isinstance(spec, UniformSeed):
        if spec.lo == spec.hi:
            out[...] = spec.lo
            return out
        for b in range(B):
            for c in range(C):
                out[b, c] = _rng(spec.seed, b, c).uniform(spec.lo, spec.hi, size=(H, W))
        return out
    for b in range(B):
        for c in range(C):
            sub = replace(spec, seed=int(np.random.SeedSequence([spec.seed, b, c])
                                         .generate_state(1)[0]))
            out[b, c] = fbm(H, W, sub)
    return out
