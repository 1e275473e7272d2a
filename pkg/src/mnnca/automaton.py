"""Multi-neighborhood cellular automaton: rule networks, output mixing, rollouts."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import engine
from .engine import Tensor
from .perception import NeighborhoodSpec, perceive, perception_channels

MIX_KINDS = ("sum", "random", "env", "output")


@dataclass(frozen=True)
class MixStrategy:
    kind: str = "env"
    reserved: tuple[int, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "reserved", tuple(int(i) for i in self.reserved))
        if self.kind not in MIX_KINDS:
            raise ValueError(f"mix type must be one of {MIX_KINDS}, got {self.kind!r}")
        if len(set(self.reserved)) != len(self.reserved):
            raise ValueError(f"duplicate reserved channels {self.reserved}")

    def to_json(self) -> dict:
        return {"type": self.kind, "reserved": list(self.reserved)}


@dataclass(frozen=True)
class AutomatonConfig:
    channels: int = 12
    rules: tuple[NeighborhoodSpec, ...] = (NeighborhoodSpec(),)
    hidden: tuple[int, ...] = (96,)
    mix: MixStrategy = field(default_factory=lambda: MixStrategy("sum"))
    fire_rate: float = 0.5

    def __post_init__(self):
        rules = tuple(self.rules)
        hidden = self.hidden
        if isinstance(hidden, int):
            hidden = (hidden,) * len(rules)
        hidden = tuple(int(h) for h in hidden)
        object.__setattr__(self, "rules", rules)
        object.__setattr__(self, "hidden", hidden)
        C, R = self.channels, len(rules)
        if C < 4:
            raise ValueError(f"channels must be >= 4, got {C}")
        if R < 1:
            raise ValueError("at least one rule is required")
        if len(hidden) != R:
            raise ValueError(f"{len(hidden)} hidden sizes for {R} rules")
        if any(h < 1 for h in hidden):
            raise ValueError(f"hidden sizes must be positive, got {hidden}")
        if not 0.0 < self.fire_rate <= 1.0:
            raise ValueError(f"fire_rate must be in (0, 1], got {self.fire_rate}")
        if sum("identity" in r.kernels for r in rules) > 1:
            raise ValueError("identity stencil may appear in at most one rule")
        mix = self.mix
        if mix.kind != "sum" and R < 2:
            raise ValueError(f"mix {mix.kind!r} needs at least 2 rules")
        if mix.kind in ("env", "output"):
            if not mix.reserved:
                # default: the last state channels
                mix = MixStrategy(mix.kind, tuple(range(C - (1 if R == 2 else R), C)))
                object.__setattr__(self, "mix", mix)
            need = 1 if R == 2 else R
            if len(mix.reserved) != need:
                raise ValueError(f"mix {mix.kind!r} with {R} rules needs {need} reserved "
                                 f"channels, got {mix.reserved}")
        if any(not 0 <= i < C for i in mix.reserved):
            raise ValueError(f"reserved channels {mix.reserved} out of range for {C} channels")

    @property
    def rule_count(self) -> int:
        return len(self.rules)

    def to_json(self) -> dict:
        return {
            "channels": self.channels,
            "hidden": list(self.hidden),
            "fire_rate": self.fire_rate,
            "mix": self.mix.to_json(),
            "rules": [r.to_json() for r in self.rules],
        }

    @classmethod
    def from_json(cls, d: dict) -> "AutomatonConfig":
        rules = tuple(NeighborhoodSpec.from_json(r) for r in d.get("rules", [{}]))
        mix = d.get("mix", {"type": "env"})
        return cls(
            channels=int(d.get("channels", 12)),
            rules=rules,
            hidden=d.get("hidden", 96),
            mix=MixStrategy(mix.get("type", "env"), tuple(mix.get("reserved", ()))),
            fire_rate=float(d.get("fire_rate", 0.5)),
        )


def rule_param_count(channels: int, spec: NeighborhoodSpec, hidden: int) -> int:
    k = perception_channels(channels, [spec])
    return hidden * k + hidden + channels * hidden


def param_count(config: AutomatonConfig) -> int:
    return sum(rule_param_count(config.channels, r, h) for r, h in zip(config.rules, config.hidden))


class RuleNet:
    """Per-cell two-layer network reading one neighborhood's perception."""

    def __init__(self, neighborhood: NeighborhoodSpec, W1, b1, W2, index: int = 0):
        self.neighborhood = neighborhood
        self.W1 = engine.as_tensor(W1)
        self.b1 = engine.as_tensor(b1)
        self.W2 = engine.as_tensor(W2)
        for name, t in (("W1", self.W1), ("b1", self.b1), ("W2", self.W2)):
            t.requires_grad = True
            t.name = f"rules.{index}.{name}"
        self._kernels: dict = {}

    @classmethod
    def init(cls, neighborhood, channels, hidden, rng, dtype=np.float32, index=0):
        fan_in = perception_channels(channels, [neighborhood])
        bound = 1.0 / np.sqrt(fan_in)
        W1 = rng.uniform(-bound, bound, size=(hidden, fan_in)).astype(dtype)
        b1 = np.zeros(hidden, dtype=dtype)
        W2 = np.zeros((channels, hidden), dtype=dtype)
        return cls(neighborhood, W1, b1, W2, index)

    def params(self) -> list[Tensor]:
        return [self.W1, self.b1, self.W2]


def rule_delta(state, rule: RuleNet) -> Tensor:
    """W2 . relu(W1 . perceive(state) + b1) at every cell."""
    state = engine.as_tensor(state)
    if state.shape[1] != rule.W2.shape[0]:
        raise engine.ShapeError(f"state {state.shape} has {state.shape[1]} channels, "
                                f"rule expects {rule.W2.shape[0]}")
    p = perceive(state, [rule.neighborhood], rule._kernels)
    h = engine.relu(engine.per_cell_dense(p, rule.W1, rule.b1))
    return engine.per_cell_dense(h, rule.W2)


# ---------------------------------------------------------------------------
# mixing
# ---------------------------------------------------------------------------

def _check_deltas(deltas, at_least=1):
    if len(deltas) < at_least:
        raise ValueError(f"mixing needs at least {at_least} deltas, got {len(deltas)}")
    shape = deltas[0].shape
    for d in deltas[1:]:
        if d.shape != shape:
            raise engine.ShapeError(f"delta shapes differ: {shape} vs {d.shape}")


def _check_reserved(reserved, channels, needed):
    reserved = tuple(int(i) for i in reserved)
    if len(reserved) < needed:
        raise ValueError(f"need {needed} reserved channels, got {reserved}")
    if len(set(reserved)) != len(reserved):
        raise ValueError(f"duplicate reserved channels {reserved}")
    if any(not 0 <= i < channels for i in reserved):
        raise IndexError(f"reserved channels {reserved} out of range for {channels} channels")
    return reserved


def _blend(deltas, mask) -> Tensor:
    """sum_i deltas[i] * mask[:, i] with the mask broadcast over channels."""
    C = deltas[0].shape[1]
    out = None
    for i, d in enumerate(deltas):
        term = engine.mul(d, engine.expand_channels(engine.select_channels(mask, [i]), C))
        out = term if out is None else engine.add(out, term)
    return out


def _blend_two(d0, d1, m) -> Tensor:
    C = d0.shape[1]
    M = engine.expand_channels(m, C)
    return engine.add(engine.mul(d0, M), engine.mul(d1, engine.sub(1.0, M)))


def mix_sum(deltas) -> Tensor:
    _check_deltas(deltas)
    out = deltas[0]
    for d in deltas[1:]:
        out = engine.add(out, d)
    return out


def random_mask(shape, rules: int, rng, dtype=np.float32) -> np.ndarray:
    """Per-pixel softmax of standard-normal logits: (B, R, H, W)."""
    B, _, H, W = shape
    logits = rng.standard_normal((B, rules, H, W)).astype(dtype)
    return softmax_channels(logits)


def softmax_channels(logits: np.ndarray) -> np.ndarray:
    e = np.exp(logits - logits.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def mix_random(deltas, rng=None, mask: np.ndarray | None = None) -> Tensor:
    _check_deltas(deltas, at_least=2)
    if mask is None:
        mask = random_mask(deltas[0].shape, len(deltas), rng, deltas[0].dtype)
    return _blend(deltas, engine.Tensor(mask))


def mix_env(deltas, state, reserved) -> Tensor:
    _check_deltas(deltas, at_least=2)
    state = engine.as_tensor(state)
    R = len(deltas)
    reserved = _check_reserved(reserved, state.shape[1], 1 if R == 2 else R)
    if R == 2:
        m = engine.sigmoid(engine.select_channels(state, [reserved[0]]))
        return _blend_two(deltas[0], deltas[1], m)
    mask = engine.channel_softmax(engine.select_channels(state, reserved[:R]))
    return _blend(deltas, mask)


def mix_output(deltas, reserved) -> Tensor:
    _check_deltas(deltas, at_least=2)
    R = len(deltas)
    reserved = _check_reserved(reserved, deltas[0].shape[1], 1 if R == 2 else R)
    if R == 2:
        m = engine.sigmoid(engine.select_channels(deltas[0], [reserved[0]]))
        return _blend_two(deltas[0], deltas[1], m)
    logits = engine.concat_channels(
        [engine.select_channels(d, [reserved[i]]) for i, d in enumerate(deltas)])
    return _blend(deltas, engine.channel_softmax(logits))


def mix_weights(deltas, state, mix: MixStrategy, rng=None, mask=None) -> np.ndarray:
    """The per-pixel rule weights (B, R, H, W) a strategy would use; for inspection."""
    R = len(deltas)
    if mix.kind == "sum":
        return np.ones((deltas[0].shape[0], R) + deltas[0].shape[2:], dtype=deltas[0].dtype)
    if mix.kind == "random":
        return mask if mask is not None else random_mask(deltas[0].shape, R, rng,
                                                         deltas[0].dtype)
    src = state.data if mix.kind == "env" else None
    if R == 2:
        if mix.kind == "env":
            z = src[:, mix.reserved[0]:mix.reserved[0] + 1]
        else:
            z = deltas[0].data[:, mix.reserved[0]:mix.reserved[0] + 1]
        m = 1.0 / (1.0 + np.exp(-z))
        return np.concatenate([m, 1.0 - m], axis=1)
    if mix.kind == "env":
        logits = src[:, list(mix.reserved[:R])]
    else:
        logits = np.concatenate([d.data[:, [mix.reserved[i]]] for i, d in enumerate(deltas)],
                                axis=1)
    return softmax_channels(logits)


# ---------------------------------------------------------------------------
# dynamics
# ---------------------------------------------------------------------------

class Automaton:
    """Rule networks plus the mixing/firing dynamics of one configuration."""

    def __init__(self, config: AutomatonConfig, rules: list[RuleNet]):
        if len(rules) != config.rule_count:
            raise ValueError(f"{len(rules)} rule networks for {config.rule_count} rules")
        self.config = config
        self.rules = rules

    @classmethod
    def init(cls, config: AutomatonConfig, seed: int = 0, dtype=np.float32) -> "Automaton":
        rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(seed)))
        rules = [RuleNet.init(spec, config.channels, h, rng, dtype, i)
                 for i, (spec, h) in enumerate(zip(config.rules, config.hidden))]
        return cls(config, rules)

    def params(self) -> list[Tensor]:
        return [p for r in self.rules for p in r.params()]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {p.name: p.data for p in self.params()}

    def load_state_dict(self, weights: dict[str, np.ndarray]) -> None:
        for p in self.params():
            if p.name not in weights:
                raise KeyError(f"missing weight {p.name}")
            w = np.asarray(weights[p.name])
            if w.shape != p.shape:
                raise engine.ShapeError(f"{p.name}: stored {w.shape}, expected {p.shape}")
            p.data = w.astype(p.dtype, copy=True)

    def astype(self, dtype) -> "Automaton":
        rules = [RuleNet(r.neighborhood, r.W1.data.astype(dtype), r.b1.data.astype(dtype),
                         r.W2.data.astype(dtype), i) for i, r in enumerate(self.rules)]
        return Automaton(self.config, rules)

    @property
    def param_count(self) -> int:
        return sum(p.data.size for p in self.params())

    def deltas(self, state) -> list[Tensor]:
        return [rule_delta(state, r) for r in self.rules]

    def mix(self, deltas, state, rng=None, mask=None) -> Tensor:
        mix = self.config.mix
        if mix.kind == "sum":
            return mix_sum(deltas)
        if mix.kind == "random":
            return mix_random(deltas, rng, mask)
        if mix.kind == "env":
            return mix_env(deltas, state, mix.reserved)
        return mix_output(deltas, mix.reserved)

    def step(self, state, rng=None, fire_mask=None, mix_mask=None) -> Tensor:
        return step(state, self, rng, fire_mask=fire_mask, mix_mask=mix_mask)

    def rollout(self, state, n_steps, rng=None, record_at=None):
        return rollout(state, self, n_steps, rng, record_at)


def fire_mask_for(shape, fire_rate: float, rng, dtype=np.float32) -> np.ndarray:
    B, _, H, W = shape
    return (rng.random((B, 1, H, W)) < fire_rate).astype(dtype)


def step(state, automaton: Automaton, rng=None, fire_mask=None, mix_mask=None) -> Tensor:
    """state + mix(deltas) * fire_mask.

    Random draws happen in a fixed order: the random-mix logits (if the
    strategy needs them), then the fire mask (if fire_rate < 1).
    """
    state = engine.as_tensor(state)
    cfg = automaton.config
    if state.ndim != 4 or state.shape[1] != cfg.channels:
        raise engine.ShapeError(f"state {state.shape} does not match {cfg.channels} channels")
    deltas = automaton.deltas(state)
    if cfg.mix.kind == "random" and mix_mask is None:
        mix_mask = random_mask(state.shape, len(deltas), rng, state.dtype)
    update = automaton.mix(deltas, state, rng, mix_mask)
    if fire_mask is None and cfg.fire_rate < 1.0:
        fire_mask = fire_mask_for(state.shape, cfg.fire_rate, rng, state.dtype)
    if fire_mask is not None:
        fm = np.repeat(np.asarray(fire_mask, dtype=state.dtype), cfg.channels, axis=1)
        update = engine.mul(update, fm)
    return engine.add(state, update)


def rollout(state, automaton: Automaton, n_steps: int, rng=None, record_at=None):
    """Apply ``step`` ``n_steps`` times.

    Returns ``(final, snapshots)`` where snapshots maps each requested step
    count (0 = the seed) to a detached array copy.
    """
    if n_steps < 1:
        raise ValueError(f"n_steps must be >= 1, got {n_steps}")
    wanted = sorted(set(int(s) for s in (record_at or ())))
    bad = [s for s in wanted if not 0 <= s <= n_steps]
    if bad:
        raise ValueError(f"record steps {bad} outside [0, {n_steps}]")
    snapshots = {}
    state = engine.as_tensor(state)
    if 0 in wanted:
        snapshots[0] = state.data.copy()
    for t in range(1, n_steps + 1):
        state = step(state, automaton, rng)
        if t in wanted:
            snapshots[t] = state.data.copy()
    return state, snapshots
