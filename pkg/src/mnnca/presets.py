"""Shipped automaton configurations.

Paper-scale hidden sizes reproduce the reference parameter counts with 12
channels: NCA 2806, NCA-XL 37576, MNNCA 37536. Desk-scale sizes keep the
same structure (MNNCA and NCA-XL within 0.2% of each other) at a cost that
trains on a laptop CPU.
"""
from __future__ import annotations

from .automaton import AutomatonConfig, MixStrategy
from .perception import KERNEL_NAMES, NeighborhoodSpec
from .seeds import PerlinSeed, UniformSeed

CHANNELS = 12
NO_IDENTITY = ("sobel_x", "sobel_y", "laplacian")

_HIDDEN = {
    "paper": {"nca": (46,), "nca_xl": (616,), "mnnca": (335, 349)},
    "desk": {"nca": (8,), "nca_xl": (96,), "mnnca": (52, 55)},
}

MODELS = ("nca", "nca_xl", "mnnca")
SEED_KINDS = ("uniform", "perlin")


def automaton_config(model: str, scale: str = "desk", fire_rate: float = 0.5,
                     mix: str = "env") -> AutomatonConfig:
    hidden = _HIDDEN[scale][model]
    if model == "mnnca":
        # the wide rule skips identity: the cell's own state is already seen by rule 0
        rules = (NeighborhoodSpec(1, KERNEL_NAMES), NeighborhoodSpec(3, NO_IDENTITY))
        return AutomatonConfig(CHANNELS, rules, hidden, MixStrategy(mix), fire_rate)
    return AutomatonConfig(CHANNELS, (NeighborhoodSpec(1, KERNEL_NAMES),), hidden,
                           MixStrategy("sum"), fire_rate)


def seed_spec(kind: str):
    if kind == "uniform":
        return UniformSeed(-0.5, 0.5)
    if kind == "perlin":
        return PerlinSeed(frequency=4, octaves=4, persistence=0.5, periodic=True)
    raise ValueError(f"unknown seed kind {kind!r}")


DESK = {"resolution": 64, "batch_count": 200, "batch_size": 2}
PAPER = {"resolution": 256, "batch_count": 3000, "batch_size": 4}
