"""Texture losses over a fixed, seeded random filter bank.

The bank stands in for pretrained network features: each level average-pools
the RGB image, applies a circular 5x5 convolution with random weights, and a
relu. Statistics of those features are compared with either Gram matrices or
a sliced Wasserstein distance.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import engine
from .engine import Kernel, Tensor


@dataclass(frozen=True)
class BankLevel:
    factor: int = 1
    filters: int = 32
    size: int = 5


@dataclass(frozen=True)
class LossSpec:
    kind: str = "sw"
    projections: int = 32
    levels: tuple[BankLevel, ...] = (BankLevel(1), BankLevel(2), BankLevel(4))
    weights: tuple[float, ...] = ()
    bank_seed: int = 0

    def __post_init__(self):
        levels = tuple(lv if isinstance(lv, BankLevel) else BankLevel(**lv) for lv in self.levels)
        object.__setattr__(self, "levels", levels)
        weights = tuple(float(w) for w in self.weights) or (1.0,) * len(levels)
        object.__setattr__(self, "weights", weights)
        if self.kind not in ("sw", "gram"):
            raise ValueError(f"loss kind must be 'sw' or 'gram', got {self.kind!r}")
        if self.projections < 8:
            raise ValueError(f"projections must be >= 8, got {self.projections}")
        if len(weights) != len(levels):
            raise ValueError(f"{len(weights)} level weights for {len(levels)} levels")
        if any(w <= 0 for w in weights):
            raise ValueError(f"level weights must be positive, got {weights}")
        for lv in levels:
            if lv.factor not in (1, 2, 4):
                raise ValueError(f"downsample factor must be 1, 2 or 4, got {lv.factor}")
            if lv.size % 2 == 0 or lv.filters < 1:
                raise ValueError(f"invalid bank level {lv}")

    def to_json(self) -> dict:
        return {
            "kind": self.kind,
            "projections": self.projections,
            "levels": [{"factor": lv.factor, "filters": lv.filters, "size": lv.size}
                       for lv in self.levels],
            "weights": list(self.weights),
            "bank_seed": self.bank_seed,
        }

    @classmethod
    def from_json(cls, d: dict) -> "LossSpec":
        kw = dict(d)
        if "levels" in kw:
            kw["levels"] = tuple(BankLevel(**lv) for lv in kw["levels"])
        if "weights" in kw:
            kw["weights"] = tuple(kw["weights"])
        return cls(**kw)


@dataclass
class FeatureBank:
    levels: tuple[BankLevel, ...]
    kernels: list[Kernel]
    seed: int = 0

    @classmethod
    def build(cls, levels, seed: int = 0, dtype=np.float32) -> "FeatureBank":
        rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, 0xBA4C])))
        kernels = []
        for lv in levels:
            fan_in = 3 * lv.size * lv.size
            w = rng.standard_normal((lv.filters, 3, lv.size, lv.size)) / np.sqrt(fan_in)
            kernels.append(Kernel(w.astype(dtype)))
        return cls(tuple(levels), kernels, seed)

    @classmethod
    def from_spec(cls, spec: LossSpec, dtype=np.float32) -> "FeatureBank":
        return cls.build(spec.levels, spec.bank_seed, dtype)

    def astype(self, dtype) -> "FeatureBank":
        return FeatureBank(self.levels, [Kernel(k.weight.data.astype(dtype)) for k in self.kernels],
                           self.seed)


def rgb_view(state) -> Tensor:
    """Channels 0..2 clamped to [0, 1]."""
    return engine.clamp(engine.select_channels(state, [0, 1, 2]), 0.0, 1.0)


def extract(img, bank: FeatureBank) -> list[Tensor]:
    img = engine.as_tensor(img)
    if img.ndim != 4 or img.shape[1] != 3:
        raise engine.ShapeError(f"extract expects (B,3,H,W) images, got {img.shape}")
    feats = []
    for lv, k in zip(bank.levels, bank.kernels):
        x = engine.avg_pool(img, lv.factor)
        if k.weight.dtype != x.dtype:
            k = Kernel(k.weight.data.astype(x.dtype), k.groups, k.dilation)
        feats.append(engine.relu(engine.conv2d_circular(x, k)))
    return feats


def gram(f) -> Tensor:
    return engine.gram(f)


def random_directions(features: int, count: int, rng, dtype=np.float32) -> np.ndarray:
    """``count`` unit vectors in feature space, shape (count, features)."""
    d = rng.standard_normal((count, features))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    return d.astype(dtype)


def nearest_rank_index(n_long: int, n_short: int) -> np.ndarray:
    """Indices into a sorted length-``n_long`` sequence picking ``n_short`` quantiles."""
    return np.minimum(((np.arange(n_short) + 0.5) * n_long / n_short).astype(np.int64),
                      n_long - 1)


def _project_sorted(f: Tensor, dirs: np.ndarray) -> Tensor:
    B, F = f.shape[:2]
    proj = engine.per_cell_dense(f, engine.Tensor(dirs.astype(f.dtype)))
    return engine.sort_last(engine.reshape(proj, (B, dirs.shape[0], -1)))


def sw_distance(fa, fb, projections: int = 32, rng=None, directions=None) -> Tensor:
    """Sliced Wasserstein distance between pixel feature sets.

    For each unit direction both sets are projected and sorted; the result is
    the mean squared gap between sorted values. When pixel counts differ the
    longer sorted sequence is resampled by nearest rank. ``fb`` may carry a
    batch of 1 against any batch of ``fa``.
    """
    fa, fb = engine.as_tensor(fa), engine.as_tensor(fb)
    if fa.shape[1] != fb.shape[1]:
        raise engine.ShapeError(f"feature count mismatch: {fa.shape} vs {fb.shape}")
    if directions is None:
        directions = random_directions(fa.shape[1], projections, rng, fa.dtype)
    sa = _project_sorted(fa, directions)
    sb = _project_sorted(fb, directions)
    na, nb = sa.shape[-1], sb.shape[-1]
    if na > nb:
        sa = engine.take_last(sa, nearest_rank_index(na, nb))
    elif nb > na:
        sb = engine.take_last(sb, nearest_rank_index(nb, na))
    if sb.shape[0] != sa.shape[0]:
        if sb.shape[0] != 1 or sb.requires_grad:
            raise engine.ShapeError(f"batch mismatch: {sa.shape} vs {sb.shape}")
        sb = engine.Tensor(np.repeat(sb.data, sa.shape[0], axis=0))
    return engine.mean(engine.square(engine.sub(sa, sb)))


def gram_distance(fa, target_gram: np.ndarray) -> Tensor:
    g = engine.gram(fa)
    t = np.asarray(target_gram, dtype=g.dtype)
    if t.shape[0] != g.shape[0]:
        t = np.repeat(t, g.shape[0], axis=0)
    return engine.mean(engine.square(engine.sub(g, t)))


@dataclass
class TargetFeatures:
    """Features of the target image, computed once per run."""

    features: list[np.ndarray]
    grams: list[np.ndarray] = field(default_factory=list)

    @classmethod
    def compute(cls, target, bank: FeatureBank) -> "TargetFeatures":
        feats = [f.data for f in extract(engine.Tensor(np.asarray(target)), bank)]
        grams = [engine.gram(engine.Tensor(f)).data for f in feats]
        return cls(feats, grams)


def texture_loss(img, target: TargetFeatures, spec: LossSpec, bank: FeatureBank,
                 rng=None) -> Tensor:
    """Weighted sum over bank levels of the chosen feature-statistics distance."""
    if tuple(bank.levels) != tuple(spec.levels) or len(target.features) != len(spec.levels):
        raise ValueError(f"bank levels {bank.levels} do not match spec levels {spec.levels} "
                         f"({len(target.features)} target levels)")
    feats = extract(img, bank)
    total = None
    for i, (f, w) in enumerate(zip(feats, spec.weights)):
        if spec.kind == "sw":
            tf = engine.Tensor(target.features[i].astype(f.dtype))
            term = sw_distance(f, tf, spec.projections, rng)
        else:
            term = gram_distance(f, target.grams[i])
        term = engine.scale(term, w) if w != 1.0 else term
        total = term if total is None else engine.add(total, term)
    return total
