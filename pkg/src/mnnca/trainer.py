"""Backprop-through-time training of an automaton against a texture target."""
from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import engine, seeds
from .automaton import Automaton, AutomatonConfig, rollout
from .checkpoint import Checkpoint
from .optim import AdamHyper, AdamState, adam_step, normalize_grads
from .seeds import PerlinSeed, SeedSpec
from .texture import FeatureBank, LossSpec, TargetFeatures, rgb_view, texture_loss

log = logging.getLogger(__name__)


class TrainingDiverged(FloatingPointError):
    def __init__(self, batch: int, norms: dict[str, float], what: str = "loss"):
        detail = ", ".join(f"{k}={v:.3g}" for k, v in norms.items())
        super().__init__(f"non-finite {what} at batch {batch}; parameter norms: {detail}")
        self.batch = batch
        self.norms = norms


@dataclass(frozen=True)
class TrainConfig:
    automaton: AutomatonConfig = field(default_factory=AutomatonConfig)
    seed: SeedSpec = field(default_factory=PerlinSeed)
    loss: LossSpec = field(default_factory=LossSpec)
    batch_size: int = 4
    steps_min: int = 32
    steps_max: int = 96
    batch_count: int = 3000
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    normalize_grads: bool = True
    resolution: int = 256
    master_seed: int = 0
    pool_size: int = 0
    overflow_weight: float = 0.0

    def __post_init__(self):
        if not 1 <= self.steps_min <= self.steps_max:
            raise ValueError(f"need 1 <= steps_min <= steps_max, got "
                             f"{self.steps_min}, {self.steps_max}")
        if self.batch_count < 0:
            raise ValueError(f"batch_count must be >= 0, got {self.batch_count}")
        if self.batch_size < 1 or self.resolution < 4:
            raise ValueError("batch_size must be >= 1 and resolution >= 4")
        if self.overflow_weight < 0:
            raise ValueError(f"overflow_weight must be >= 0, got {self.overflow_weight}")
        if self.pool_size and self.pool_size < self.batch_size:
            raise ValueError(f"pool_size {self.pool_size} smaller than batch_size")

    @property
    def adam(self) -> AdamHyper:
        return AdamHyper(self.lr, self.beta1, self.beta2, self.eps)

    def to_json(self) -> dict:
        return {
            "automaton": self.automaton.to_json(),
            "seed": self.seed.to_json(),
            "loss": self.loss.to_json(),
            "batch_size": self.batch_size,
            "steps_min": self.steps_min,
            "steps_max": self.steps_max,
            "batch_count": self.batch_count,
            "lr": self.lr,
            "beta1": self.beta1,
            "beta2": self.beta2,
            "eps": self.eps,
            "normalize_grads": self.normalize_grads,
            "resolution": self.resolution,
            "master_seed": self.master_seed,
            "pool_size": self.pool_size,
            "overflow_weight": self.overflow_weight,
        }

    @classmethod
    def from_json(cls, d: dict) -> "TrainConfig":
        kw = dict(d)
        if "automaton" in kw:
            kw["automaton"] = AutomatonConfig.from_json(kw["automaton"])
        if "seed" in kw:
            kw["seed"] = seeds.seed_spec_from_json(kw["seed"])
        if "loss" in kw:
            kw["loss"] = LossSpec.from_json(kw["loss"])
        return cls(**kw)


@dataclass
class LossCurve:
    batches: list[int] = field(default_factory=list)
    losses: list[float] = field(default_factory=list)
    wall_ms: list[float] = field(default_factory=list)

    def append(self, batch: int, loss: float, ms: float) -> None:
        if self.batches and batch <= self.batches[-1]:
            raise ValueError(f"batch index {batch} not after {self.batches[-1]}")
        self.batches.append(batch)
        self.losses.append(loss)
        self.wall_ms.append(ms)

    def __len__(self):
        return len(self.batches)

    def extend(self, other: "LossCurve") -> None:
        for row in zip(other.batches, other.losses, other.wall_ms):
            self.append(*row)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["batch", "loss", "wall_ms"])
            for b, l, ms in zip(self.batches, self.losses, self.wall_ms):
                w.writerow([b, repr(l), f"{ms:.3f}"])

    @classmethod
    def read_csv(cls, path) -> "LossCurve":
        curve = cls()
        with open(path, newline="") as fh:
            for row in csv.DictReader(fh):
                curve.append(int(row["batch"]), float(row["loss"]), float(row["wall_ms"]))
        return curve


def overflow_penalty(state) -> engine.Tensor:
    """Mean squared excess of the state beyond [-1, 1]; zero for any in-range state."""
    return engine.mean(engine.square(engine.sub(state, engine.clamp(state, -1.0, 1.0))))


def _rng_from_seed(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), 0x7EA1])))


def _param_norms(automaton: Automaton) -> dict[str, float]:
    return {p.name: float(np.linalg.norm(p.data.astype(np.float64))) for p in automaton.params()}


def initial_checkpoint(config: TrainConfig) -> Checkpoint:
    automaton = Automaton.init(config.automaton, seed=config.master_seed)
    weights = automaton.state_dict()
    rng = _rng_from_seed(config.master_seed)
    return Checkpoint(config=config.to_json(), weights=dict(weights),
                      adam=AdamState.zeros_like(weights), rng_state=rng.bit_generator.state,
                      bank_seed=config.loss.bank_seed,
                      metadata={"batches_completed": 0, "final_loss": None})


class Trainer:
    """Holds the mutable state of one run; :meth:`run` advances it batch by batch."""

    def __init__(self, config: TrainConfig, target: np.ndarray, resume: Checkpoint | None = None):
        self.config = config
        ckpt = resume if resume is not None else initial_checkpoint(config)
        self.automaton = Automaton.init(config.automaton, seed=config.master_seed)
        self.automaton.load_state_dict(ckpt.weights)
        self.adam = AdamState({k: v.copy() for k, v in ckpt.adam.m.items()},
                              {k: v.copy() for k, v in ckpt.adam.v.items()}, ckpt.adam.step)
        self.rng = np.random.Generator(np.random.Philox())
        self.rng.bit_generator.state = ckpt.rng_state
        self.batches_done = int(ckpt.metadata.get("batches_completed", 0))
        self.last_loss = ckpt.metadata.get("final_loss")
        self.pool = None if ckpt.pool is None else ckpt.pool.copy()
        self.bank = FeatureBank.from_spec(config.loss)
        target = np.asarray(target, dtype=np.float32)
        if target.ndim == 3:
            target = target[None]
        self.target = TargetFeatures.compute(target, self.bank)

    def _fresh_seed(self, n: int) -> np.ndarray:
        cfg = self.config
        sub = int(self.rng.integers(0, 2 ** 63 - 1))
        shape = (n, cfg.automaton.channels, cfg.resolution, cfg.resolution)
        return seeds.make_seed(seeds.with_seed(cfg.seed, sub), shape)

    def _batch_seed(self):
        cfg = self.config
        if not cfg.pool_size:
            return self._fresh_seed(cfg.batch_size), None
        if self.pool is None:
            self.pool = self._fresh_seed(cfg.pool_size)
        idx = self.rng.choice(cfg.pool_size, cfg.batch_size, replace=False)
        x = self.pool[idx].copy()
        x[0] = self._fresh_seed(1)[0]
        return x, idx

    def train_batch(self) -> float:
        cfg = self.config
        b = self.batches_done
        n_steps = int(self.rng.integers(cfg.steps_min, cfg.steps_max + 1))
        x0, pool_idx = self._batch_seed()
        with engine.DiffGraph() as graph:
            final, _ = rollout(engine.Tensor(x0), self.automaton, n_steps, self.rng)
            loss = texture_loss(rgb_view(final), self.target, cfg.loss, self.bank, self.rng)
            if cfg.overflow_weight:
                loss = engine.add(loss, engine.scale(overflow_penalty(final), cfg.overflow_weight))
            value = loss.item()
            if not np.isfinite(value):
                raise TrainingDiverged(b, _param_norms(self.automaton))
            grads = engine.backward(loss, graph).by_name()
        if pool_idx is not None:
            self.pool[pool_idx] = final.data
        del final, loss
        params = self.automaton.state_dict()
        if cfg.normalize_grads:
            grads = normalize_grads(grads)
        new_params, self.adam = adam_step(params, grads, self.adam, cfg.adam)
        self.automaton.load_state_dict(new_params)
        if not all(np.all(np.isfinite(p)) for p in new_params.values()):
            raise TrainingDiverged(b, _param_norms(self.automaton), "parameters")
        self.batches_done += 1
        self.last_loss = value
        return value

    def run(self, until: int | None = None, callback=None) -> LossCurve:
        until = self.config.batch_count if until is None else until
        curve = LossCurve()
        while self.batches_done < until:
            t0 = time.perf_counter()
            b = self.batches_done
            value = self.train_batch()
            ms = (time.perf_counter() - t0) * 1e3
            curve.append(b, value, ms)
            if callback is not None:
                callback(b, value, ms)
            if b % 20 == 0:
                log.info("batch %d loss %.5f (%.0f ms)", b, value, ms)
        return curve

    def checkpoint(self) -> Checkpoint:
        return Checkpoint(
            config=self.config.to_json(),
            weights={k: v.copy() for k, v in self.automaton.state_dict().items()},
            adam=AdamState({k: v.copy() for k, v in self.adam.m.items()},
                           {k: v.copy() for k, v in self.adam.v.items()}, self.adam.step),
            rng_state=self.rng.bit_generator.state,
            bank_seed=self.config.loss.bank_seed,
            metadata={"batches_completed": self.batches_done,
                      "final_loss": None if self.last_loss is None else float(self.last_loss)},
            pool=None if self.pool is None else self.pool.copy(),
        )


def train(config: TrainConfig, target: np.ndarray, resume: Checkpoint | None = None,
          callback=None) -> tuple[Checkpoint, LossCurve]:
    """Run (or continue) training up to ``config.batch_count`` batches."""
    if resume is not None:
        stored = TrainConfig.from_json(resume.config)
        if replace(stored, batch_count=config.batch_count) != config:
            raise ValueError("resume checkpoint was produced by a different configuration")
    trainer = Trainer(config, target, resume)
    curve = trainer.run(callback=callback)
    return trainer.checkpoint(), curve


def automaton_from_checkpoint(ckpt: Checkpoint, dtype=np.float32) -> Automaton:
    cfg = AutomatonConfig.from_json(ckpt.config["automaton"])
    aut = Automaton.init(cfg, seed=0, dtype=dtype)
    aut.load_state_dict(ckpt.weights)
    return aut
