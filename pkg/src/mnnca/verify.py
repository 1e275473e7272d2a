"""Self-check suite behind ``mnnca verify``: gradients, mixing identities, noise."""
from __future__ import annotations

import contextlib
import time
from dataclasses import dataclass

import numpy as np

from . import automaton as am
from . import engine, gradcheck, seeds, texture
from .engine import Kernel
from .perception import NeighborhoodSpec

GRAD_TOL = 1e-5
ROLLOUT_GRAD_TOL = 1e-5


@dataclass
class CheckResult:
    name: str
    passed: bool
    value: float
    detail: str = ""

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"[{status}] {self.name}: {self.detail}"


@contextlib.contextmanager
def perturbed_conv_backward(factor: float = 1.01):
    """Negative control: scale the conv input-gradient so gradient checks must fail."""
    old = engine._CONV_BACKWARD_SCALE
    engine._CONV_BACKWARD_SCALE = factor
    try:
        yield
    finally:
        engine._CONV_BACKWARD_SCALE = old


# ---------------------------------------------------------------------------
# gradient cases: each takes an rng and returns (fn, input arrays)
# ---------------------------------------------------------------------------

def _probe(rng, shape):
    return rng.standard_normal(shape)


def _unary(op):
    def case(rng):
        shape = (rng.integers(1, 3), rng.integers(1, 5), rng.integers(2, 7), rng.integers(2, 7))
        x = rng.standard_normal(shape)
        if op == "clamp":
            x = rng.uniform(-0.5, 1.5, shape)
        r = _probe(rng, shape)
        fns = {
            "relu": engine.relu, "tanh": engine.tanh, "sigmoid": engine.sigmoid,
            "square": engine.square, "neg": engine.neg,
            "clamp": lambda t: engine.clamp(t, 0.0, 1.0),
            "scale": lambda t: engine.scale(t, -1.7),
        }
        f = fns[op]
        return (lambda t: gradcheck.weighted_sum(f(t), r)), [x]
    return case


def _binary(op):
    def case(rng):
        shape = (rng.integers(1, 3), rng.integers(1, 5), rng.integers(2, 7), rng.integers(2, 7))
        x, y = rng.standard_normal(shape), rng.standard_normal(shape)
        r = _probe(rng, shape)
        f = {"add": engine.add, "sub": engine.sub, "mul": engine.mul}[op]
        return (lambda a, b: gradcheck.weighted_sum(f(a, b), r)), [x, y]
    return case


def _conv_case(kind):
    def case(rng):
        B = int(rng.integers(1, 3))
        H, W = int(rng.integers(3, 7)), int(rng.integers(3, 7))
        if kind == "depthwise":
            C = int(rng.integers(1, 5))
            M = int(rng.integers(1, 3))
            w = rng.standard_normal((C * M, 1, 3, 3))
            groups, dil = C, int(rng.integers(1, 3))
        elif kind == "grouped":
            G = 2
            C = 2 * int(rng.integers(1, 3))
            w = rng.standard_normal((2 * G, C // G, 3, 3))
            groups, dil = G, 1
        else:
            C = int(rng.integers(1, 4))
            w = rng.standard_normal((int(rng.integers(1, 4)), C, 5, 5))
            groups, dil = 1, 1
        x = rng.standard_normal((B, C, H, W))
        r = _probe(rng, (B, w.shape[0], H, W))

        def fn(xt, wt):
            return gradcheck.weighted_sum(engine.conv2d_circular(xt, Kernel(wt, groups, dil)), r)
        return fn, [x, w]
    return case


def _dense_case(rng):
    B, Cin, Cout = int(rng.integers(1, 3)), int(rng.integers(1, 5)), int(rng.integers(1, 5))
    H, W = int(rng.integers(2, 6)), int(rng.integers(2, 6))
    x = rng.standard_normal((B, Cin, H, W))
    Wm = rng.standard_normal((Cout, Cin))
    b = rng.standard_normal(Cout)
    r = _probe(rng, (B, Cout, H, W))
    return (lambda a, w, c: gradcheck.weighted_sum(engine.per_cell_dense(a, w, c), r)), [x, Wm, b]


def _softmax_case(rng):
    shape = (int(rng.integers(1, 3)), int(rng.integers(1, 5)), 4, 5)
    x = rng.standard_normal(shape) * 2
    r = _probe(rng, shape)
    return (lambda t: gradcheck.weighted_sum(engine.channel_softmax(t), r)), [x]


def _layout_case(rng):
    B, H, W = 2, 3, 4
    x = rng.standard_normal((B, 4, H, W))
    y = rng.standard_normal((B, 1, H, W))
    r = _probe(rng, (B, 4 + 2 + 4, H, W))

    def fn(a, c):
        sel = engine.select_channels(a, [2, 0])
        exp = engine.expand_channels(c, 4)
        return gradcheck.weighted_sum(engine.concat_channels([a, sel, exp]), r)
    return fn, [x, y]


def _pool_case(rng):
    f = int(rng.choice([2, 4]))
    x = rng.standard_normal((2, 3, 2 * f, f))
    r = _probe(rng, (2, 3, 2, 1))
    return (lambda t: gradcheck.weighted_sum(engine.avg_pool(t, f), r)), [x]


def _gram_case(rng):
    x = rng.standard_normal((2, int(rng.integers(1, 5)), 3, 4))
    F = x.shape[1]
    r = _probe(rng, (2, F, F))
    return (lambda t: gradcheck.weighted_sum(engine.gram(t), r)), [x]


def _sort_take_case(rng):
    x = rng.standard_normal((2, 3, int(rng.integers(4, 9))))
    idx = rng.integers(0, x.shape[-1], size=5)
    r = _probe(rng, (2, 3, 5))
    return (lambda t: gradcheck.weighted_sum(engine.take_last(engine.sort_last(t), idx), r)), [x]


def _matmul_case(rng):
    a = rng.standard_normal((2, 3, 4))
    b = rng.standard_normal((2, 4, 2))
    r = _probe(rng, (2, 3, 2))
    return (lambda p, q: gradcheck.weighted_sum(engine.matmul(p, q), r)), [a, b]


def _reduce_case(rng):
    x = rng.standard_normal((2, 3, 4, 2))
    return (lambda t: engine.add(engine.mean(engine.reshape(t, (6, 8))),
                                 engine.scale(engine.sum(engine.square(t)), 0.3))), [x]


def _sw_case(rng):
    F = int(rng.integers(1, 5))
    fa = rng.standard_normal((2, F, 4, 4))
    fb = rng.standard_normal((2, F, int(rng.choice([2, 4, 8])), 4))
    dirs = texture.random_directions(F, 8, rng, np.float64)
    return (lambda a, b: texture.sw_distance(a, b, directions=dirs)), [fa, fb]


def _small_bank(F=4):
    levels = (texture.BankLevel(1, F), texture.BankLevel(2, F), texture.BankLevel(4, F))
    spec_sw = texture.LossSpec("sw", 8, levels, bank_seed=3)
    spec_gram = texture.LossSpec("gram", 8, levels, bank_seed=3)
    bank = texture.FeatureBank.from_spec(spec_sw, np.float64)
    return spec_sw, spec_gram, bank


def _texture_case(kind):
    def case(rng):
        spec_sw, spec_gram, bank = _small_bank()
        spec = spec_sw if kind == "sw" else spec_gram
        target = texture.TargetFeatures.compute(rng.uniform(0.05, 0.95, (1, 3, 8, 8)), bank)
        img = rng.uniform(0.05, 0.95, (2, 3, 8, 8))
        key = int(rng.integers(1 << 30))

        def fn(x):
            return texture.texture_loss(x, target, spec, bank, np.random.default_rng(key))
        return fn, [img]
    return case


def _small_automaton(rng, mix="env", R=2, C=5, hidden=3):
    rules = [NeighborhoodSpec(1), NeighborhoodSpec(2, ("sobel_x", "sobel_y", "laplacian")),
             NeighborhoodSpec(3, ("laplacian",))][:R]
    cfg = am.AutomatonConfig(C, tuple(rules), hidden, am.MixStrategy(mix), fire_rate=1.0)
    aut = am.Automaton.init(cfg, int(rng.integers(1 << 30)), np.float64)
    for r in aut.rules:
        r.W2.data = rng.standard_normal(r.W2.shape) * 0.3
        r.b1.data = rng.standard_normal(r.b1.shape) * 0.1
    return aut


def _with_params(aut, arrays):
    """Rebuild an automaton around the given parameter tensors."""
    params = aut.params()
    rules = []
    for i, r in enumerate(aut.rules):
        rn = am.RuleNet.__new__(am.RuleNet)
        rn.neighborhood = r.neighborhood
        rn.W1, rn.b1, rn.W2 = arrays[3 * i:3 * i + 3]
        rn._kernels = {}
        rules.append(rn)
    assert len(params) == len(arrays)
    return am.Automaton(aut.config, rules)


def _rule_delta_case(rng):
    aut = _small_automaton(rng, "sum", R=1, C=4, hidden=4)
    x = rng.standard_normal((2, 4, 5, 5))
    r = _probe(rng, x.shape)
    rule = aut.rules[0]

    def fn(s, W1, b1, W2):
        rn = _with_params(aut, [W1, b1, W2]).rules[0]
        return gradcheck.weighted_sum(am.rule_delta(s, rn), r)
    return fn, [x, rule.W1.data, rule.b1.data, rule.W2.data]


def _mix_case(kind, R):
    def case(rng):
        C = 5
        shape = (2, C, 3, 4)
        deltas = [rng.standard_normal(shape) for _ in range(R)]
        state = rng.standard_normal(shape)
        reserved = tuple(range(C - (1 if R == 2 else R), C))
        mask = am.random_mask(shape, R, rng, np.float64)
        r = _probe(rng, shape)

        def fn(s, *ds):
            if kind == "sum":
                out = am.mix_sum(list(ds))
            elif kind == "random":
                out = am.mix_random(list(ds), mask=mask)
            elif kind == "env":
                out = am.mix_env(list(ds), s, reserved)
            else:
                out = am.mix_output(list(ds), reserved)
            return gradcheck.weighted_sum(out, r)
        return fn, [state] + deltas
    return case


def _rollout_case(n_steps):
    def case(rng):
        aut = _small_automaton(rng, "env", R=2, C=4, hidden=3)
        _, _, bank = _small_bank()
        spec = texture.LossSpec("sw", 8, bank.levels, bank_seed=3)
        target = texture.TargetFeatures.compute(rng.uniform(0.1, 0.9, (1, 3, 8, 8)), bank)
        x0 = rng.uniform(0.1, 0.9, (1, 4, 8, 8))
        key = int(rng.integers(1 << 30))

        def fn(s, *params):
            a = _with_params(aut, list(params))
            final, _ = am.rollout(s, a, n_steps, np.random.default_rng(key))
            return texture.texture_loss(texture.rgb_view(final), target, spec, bank,
                                        np.random.default_rng(key))
        return fn, [x0] + [p.data for p in aut.params()]
    return case


GRAD_CASES = {
    "conv2d_circular[depthwise]": _conv_case("depthwise"),
    "conv2d_circular[grouped]": _conv_case("grouped"),
    "conv2d_circular[dense 5x5]": _conv_case("dense"),
    "per_cell_dense": _dense_case,
    "add": _binary("add"),
    "sub": _binary("sub"),
    "mul": _binary("mul"),
    "relu": _unary("relu"),
    "tanh": _unary("tanh"),
    "sigmoid": _unary("sigmoid"),
    "clamp": _unary("clamp"),
    "scale": _unary("scale"),
    "square": _unary("square"),
    "channel_softmax": _softmax_case,
    "select/expand/concat": _layout_case,
    "avg_pool": _pool_case,
    "gram": _gram_case,
    "sort/take": _sort_take_case,
    "matmul": _matmul_case,
    "sum/mean/reshape": _reduce_case,
    "sw_distance": _sw_case,
    "texture_loss[sw]": _texture_case("sw"),
    "texture_loss[gram]": _texture_case("gram"),
    "rule_delta": _rule_delta_case,
    "mix_sum": _mix_case("sum", 3),
    "mix_random": _mix_case("random", 3),
    "mix_env[R=2]": _mix_case("env", 2),
    "mix_env[R=3]": _mix_case("env", 3),
    "mix_output[R=2]": _mix_case("output", 2),
    "mix_output[R=3]": _mix_case("output", 3),
    "rollout10+texture_loss": _rollout_case(10),
}


def gradient_suite(trials: int = 4, seed: int = 0, tol: float = GRAD_TOL,
                   max_coords: int = 40) -> list[CheckResult]:
    results = []
    for i, (name, case) in enumerate(GRAD_CASES.items()):
        rng = np.random.default_rng([seed, i])
        worst = 0.0
        for _ in range(trials):
            fn, arrays = case(rng)
            worst = max(worst, gradcheck.check(fn, arrays, max_coords=max_coords, rng=rng))
        results.append(CheckResult(f"grad {name}", worst < tol, worst,
                                   f"max rel err {worst:.2e} over {trials} trials (tol {tol:g})"))
    return results


# ---------------------------------------------------------------------------
# property checks
# ---------------------------------------------------------------------------

def mixing_identities(seed: int = 0) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    out = []
    C, shape = 6, (2, 6, 5, 5)
    d = rng.standard_normal(shape).astype(np.float32)
    state = rng.standard_normal(shape).astype(np.float32)

    single = am.mix_sum([engine.Tensor(d)]).data
    out.append(CheckResult("mix sum-of-one", np.array_equal(single, d), 0.0, "sum of one delta"))

    worst = 0.0
    for R in (2, 3):
        deltas = [engine.Tensor(d.copy()) for _ in range(R)]
        res = tuple(range(C - (1 if R == 2 else R), C))
        outs = [am.mix_sum(deltas).data / R,
                am.mix_random(deltas, np.random.default_rng(1)).data,
                am.mix_env(deltas, state, res).data,
                am.mix_output(deltas, res).data]
        worst = max(worst, max(float(np.max(np.abs(o - d))) for o in outs))
    out.append(CheckResult("mix equal-delta convexity", worst < 1e-6, worst,
                           f"max |mix(d,..,d) - d| = {worst:.1e}"))

    worst = 0.0
    for R in (2, 3, 4):
        deltas = [engine.Tensor(rng.standard_normal(shape).astype(np.float32)) for _ in range(R)]
        res = tuple(range(C - (1 if R == 2 else R), C))
        for kind in ("random", "env", "output"):
            m = am.mix_weights(deltas, engine.Tensor(state), am.MixStrategy(kind, res),
                               np.random.default_rng(2))
            worst = max(worst, float(np.max(np.abs(m.sum(axis=1) - 1))))
            if m.min() < 0 or m.max() > 1:
                worst = np.inf
    out.append(CheckResult("mix masks sum to 1", worst < 1e-6, worst,
                           f"max |sum(mask) - 1| = {worst:.1e}"))

    d0 = rng.standard_normal(shape)
    d1 = rng.standard_normal(shape)
    s = np.zeros(shape)
    s[:, C - 1] = 20.0
    hi = am.mix_env([engine.Tensor(d0), engine.Tensor(d1)], s, (C - 1,)).data
    s[:, C - 1] = -20.0
    lo = am.mix_env([engine.Tensor(d0), engine.Tensor(d1)], s, (C - 1,)).data
    err = max(float(np.max(np.abs(hi - d0))), float(np.max(np.abs(lo - d1))))
    out.append(CheckResult("mix sigmoid saturation", err < 1e-6, err,
                           f"|env(+20) - d0|, |env(-20) - d1| <= {err:.1e}"))
    return out


def perlin_invariants(seed: int = 0) -> list[CheckResult]:
    out = []
    raw = seeds.perlin_raw(64, 64, 4, seed, True)
    lattice = float(np.max(np.abs(raw[::16, ::16])))
    out.append(CheckResult("perlin zero at lattice", lattice < 1e-6, lattice,
                           f"max |noise| on lattice pixels = {lattice:.1e}"))
    mid = float(seeds.fade(0.5))
    out.append(CheckResult("perlin fade midpoint", mid == 0.5, mid, f"fade(0.5) = {mid!r}"))
    ys, xs = np.mgrid[0:32, 0:32].astype(np.float64)
    xs = xs + 0.25
    a = seeds.perlin_at(ys, xs, 4, seed, True, 32, 32)
    b = seeds.perlin_at(ys, xs + 32, 4, seed, True, 32, 32)
    c = seeds.perlin_at(ys + 32, xs, 4, seed, True, 32, 32)
    tile = float(max(np.max(np.abs(a - b)), np.max(np.abs(a - c))))
    out.append(CheckResult("perlin periodic tiling", tile == 0.0, tile,
                           f"max |f(x+W) - f(x)| = {tile:.1e}"))
    spec = seeds.PerlinSeed(seed=seed)
    same = np.array_equal(seeds.make_seed(spec, (1, 2, 32, 32)),
                          seeds.make_seed(spec, (1, 2, 32, 32)))
    out.append(CheckResult("perlin determinism", same, 0.0, "same seed -> identical field"))
    return out


def equivariance_checks(seed: int = 0) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((1, 3, 8, 8))
    k = Kernel(rng.standard_normal((3, 1, 3, 3)), groups=3, dilation=2)
    a = np.roll(engine.conv2d_circular(x, k).data, (2, 3), axis=(2, 3))
    b = engine.conv2d_circular(np.roll(x, (2, 3), axis=(2, 3)), k).data
    err = float(np.max(np.abs(a - b)))
    return [CheckResult("conv translation equivariance", err == 0.0, err,
                        f"max |shift(conv(x)) - conv(shift(x))| = {err:.1e}")]


def run_all(trials: int = 4, seed: int = 0) -> list[CheckResult]:
    t0 = time.perf_counter()
    results = gradient_suite(trials, seed)
    results += mixing_identities(seed)
    results += perlin_invariants(seed)
    results += equivariance_checks(seed)
    elapsed = time.perf_counter() - t0
    results.append(CheckResult("verify runtime", elapsed < 120.0, elapsed,
                               f"{elapsed:.1f}s (limit 120s)"))
    return results
