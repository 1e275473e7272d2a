"""Gradient-free rollouts from a trained checkpoint, at any grid size."""
from __future__ import annotations

import logging
from pathlib import Path

import numpy as np

from . import engine, seeds
from .automaton import Automaton
from .checkpoint import Checkpoint
from .imageio import state_to_png
from .texture import FeatureBank, TargetFeatures, rgb_view, texture_loss
from .trainer import TrainConfig, automaton_from_checkpoint

DEFAULT_SNAPS = (50, 200, 600)

log = logging.getLogger(__name__)


def seed_spec_of(ckpt: Checkpoint):
    return TrainConfig.from_json(ckpt.config).seed


def sample(automaton: Automaton, seed_spec, size: tuple[int, int], steps: int, snaps=(),
           seed: int = 0, batch: int = 1) -> tuple[np.ndarray, dict[int, np.ndarray]]:
    """Seed a (batch, C, H, W) grid and roll it out; returns final state and snapshots."""
    H, W = size
    shape = (batch, automaton.config.channels, H, W)
    x0 = seeds.make_seed(seeds.with_seed(seed_spec, seed), shape)
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), 0x6E6E])))
    # a model trained on short rollouts may blow up far past its horizon; report that once
    # instead of a stream of floating point warnings
    with np.errstate(over="ignore", invalid="ignore"):
        final, snapshots = automaton.rollout(engine.Tensor(x0), steps, rng, record_at=snaps)
    if not np.all(np.isfinite(final.data)):
        first = min((s for s, v in snapshots.items() if not np.all(np.isfinite(v))), default=steps)
        log.warning("rollout state became non-finite (first seen at step %d of %d)", first, steps)
    return final.data, snapshots


def frame_name(step: int) -> str:
    return f"frame_{step:04d}.png"


def render(ckpt: Checkpoint, out_dir, size: tuple[int, int], steps: int = 600,
           snaps=DEFAULT_SNAPS, seed: int = 0, seed_spec=None) -> list[Path]:
    snaps = sorted(set(int(s) for s in snaps))
    if any(s > steps or s < 0 for s in snaps):
        raise ValueError(f"snapshot steps {snaps} must lie in [0, {steps}]")
    automaton = automaton_from_checkpoint(ckpt)
    spec = seed_spec if seed_spec is not None else seed_spec_of(ckpt)
    _, frames = sample(automaton, spec, size, steps, snaps, seed)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for s in snaps:
        p = out_dir / frame_name(s)
        state_to_png(frames[s][0], p)
        paths.append(p)
    return paths


def evaluate_loss(ckpt: Checkpoint, target: np.ndarray, size: tuple[int, int], steps: int,
                  seed: int = 0, batch: int = 2) -> float:
    """Texture loss of generated states against the target (target features at its own size)."""
    cfg = TrainConfig.from_json(ckpt.config)
    automaton = automaton_from_checkpoint(ckpt)
    bank = FeatureBank.from_spec(cfg.loss)
    feats = TargetFeatures.compute(target, bank)
    final, _ = sample(automaton, cfg.seed, size, steps, (), seed, batch)
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), 0x1055])))
    return texture_loss(rgb_view(final), feats, cfg.loss, bank, rng).item()
