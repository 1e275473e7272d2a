import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mnnca import automaton as am
from mnnca import engine, gradcheck, presets
from mnnca.automaton import (Automaton, AutomatonConfig, MixStrategy, RuleNet, mix_env,
                             mix_output, mix_random, mix_sum, param_count, rule_delta)
from mnnca.engine import Tensor
from mnnca.perception import NeighborhoodSpec, perceive

IDENT = NeighborhoodSpec(1, ("identity",))


def _rule(rng, C, hidden, spec=NeighborhoodSpec()):
    K = C * len(spec.kernels)
    return RuleNet(spec, rng.standard_normal((hidden, K)) * 0.3, rng.standard_normal(hidden) * 0.1,
                   rng.standard_normal((C, hidden)) * 0.3)


def _config(R=2, mix="env", fire_rate=1.0, C=6, hidden=5):
    rules = tuple(NeighborhoodSpec(r + 1, ("identity",) + ("sobel_x", "laplacian") if r == 0
                                   else ("sobel_y", "laplacian")) for r in range(R))
    return AutomatonConfig(C, rules, hidden, MixStrategy(mix), fire_rate)


# -- rule_delta --------------------------------------------------------------

def test_fresh_rule_delta_is_zero(rng):
    r = RuleNet.init(NeighborhoodSpec(), 6, 8, rng)
    assert not rule_delta(rng.standard_normal((1, 6, 4, 4)).astype(np.float32), r).data.any()


def test_rule_delta_forced_arithmetic():
    r = RuleNet(IDENT, np.ones((1, 1)), np.zeros(1), np.full((1, 1), 2.0))
    np.testing.assert_array_equal(rule_delta(np.full((1, 1, 3, 3), 3.0), r).data, 6.0)


def test_rule_delta_matches_composition(rng):
    C, hid = 3, 4
    r = _rule(rng, C, hid)
    x = rng.standard_normal((2, C, 5, 5))
    p = perceive(x, [r.neighborhood]).data
    ref = np.zeros_like(x)
    for b in range(2):
        for y in range(5):
            for xx in range(5):
                h = np.maximum(r.W1.data @ p[b, :, y, xx] + r.b1.data, 0)
                ref[b, :, y, xx] = r.W2.data @ h
    np.testing.assert_allclose(rule_delta(x, r).data, ref, atol=1e-12)


# -- mixing ------------------------------------------------------------------

def test_mix_sum_cases(rng):
    d = rng.standard_normal((1, 4, 3, 3))
    np.testing.assert_array_equal(mix_sum([Tensor(d)]).data, d)
    assert not mix_sum([Tensor(d), Tensor(-d)]).data.any()
    ds = [rng.standard_normal((1, 4, 3, 3)) for _ in range(3)]
    acc = np.zeros_like(d)
    for x in ds:
        acc = acc + x
    np.testing.assert_allclose(mix_sum([Tensor(x) for x in ds]).data, acc, atol=1e-15)
    with pytest.raises(ValueError):
        mix_sum([])


def test_mix_random_seeded_replay():
    shape = (1, 3, 2, 2)
    r = np.random.default_rng(5)
    d0, d1 = r.standard_normal(shape), r.standard_normal(shape)
    out = mix_random([Tensor(d0), Tensor(d1)], np.random.default_rng(42)).data
    # hand-unrolled: logits, softmax over the two rules, blend
    z = np.random.default_rng(42).standard_normal((1, 2, 2, 2))
    ref = np.zeros(shape)
    for y in range(2):
        for x in range(2):
            e = np.exp(z[0, :, y, x] - z[0, :, y, x].max())
            w = e / e.sum()
            ref[0, :, y, x] = w[0] * d0[0, :, y, x] + w[1] * d1[0, :, y, x]
    np.testing.assert_allclose(out, ref, atol=1e-6)


def test_mix_random_needs_two(rng):
    with pytest.raises(ValueError):
        mix_random([Tensor(np.zeros((1, 2, 2, 2)))], rng)


def test_mix_env_cases(rng):
    C = 5
    d0, d1 = rng.standard_normal((2, C, 3, 3)), rng.standard_normal((2, C, 3, 3))
    s = np.zeros((2, C, 3, 3))
    np.testing.assert_array_equal(mix_env([Tensor(d0), Tensor(d1)], s, (C - 1,)).data,
                                  (d0 + d1) / 2)
    s[:, C - 1] = 20.0
    assert np.max(np.abs(mix_env([Tensor(d0), Tensor(d1)], s, (C - 1,)).data - d0)) < 1e-6
    with pytest.raises(IndexError):
        mix_env([Tensor(d0), Tensor(d1)], s, (C,))
    with pytest.raises(ValueError):
        mix_env([Tensor(d0), Tensor(d1), Tensor(d1)], s, (1, 1, 2))


def test_mix_env_three_rules_matches_loop(rng):
    C, R = 6, 3
    ds = [rng.standard_normal((1, C, 3, 3)) for _ in range(R)]
    s = rng.standard_normal((1, C, 3, 3))
    res = (3, 4, 5)
    out = mix_env([Tensor(d) for d in ds], s, res).data
    ref = np.zeros_like(ds[0])
    for y in range(3):
        for x in range(3):
            z = np.array([s[0, c, y, x] for c in res])
            w = np.exp(z) / np.exp(z).sum()
            for i in range(R):
                ref[0, :, y, x] += w[i] * ds[i][0, :, y, x]
    np.testing.assert_allclose(out, ref, atol=1e-12)


def test_mix_output_cases(rng):
    C = 5
    d0, d1 = rng.standard_normal((1, C, 3, 3)), rng.standard_normal((1, C, 3, 3))
    d0[:, C - 1] = 0.0
    out = mix_output([Tensor(d0), Tensor(d1)], (C - 1,)).data
    np.testing.assert_array_equal(out[:, :C - 1], ((d0 + d1) / 2)[:, :C - 1])
    np.testing.assert_allclose(mix_output([Tensor(d1), Tensor(d1)], (0,)).data, d1, atol=1e-15)
    d0 = rng.standard_normal((1, C, 3, 3))
    m = 1 / (1 + np.exp(-d0[:, C - 1:C]))
    np.testing.assert_allclose(mix_output([Tensor(d0), Tensor(d1)], (C - 1,)).data,
                               d0 * m + d1 * (1 - m), atol=1e-12)


@settings(max_examples=20, deadline=None)
@given(R=st.integers(2, 4), kind=st.sampled_from(["random", "env", "output"]),
       seed=st.integers(0, 10_000))
def test_equal_deltas_and_mask_properties(R, kind, seed):
    r = np.random.default_rng(seed)
    C = 6
    d = r.standard_normal((1, C, 4, 4)).astype(np.float32)
    state = r.standard_normal((1, C, 4, 4)).astype(np.float32) * 3
    res = tuple(range(C - (1 if R == 2 else R), C))
    deltas = [Tensor(d.copy()) for _ in range(R)]
    strat = MixStrategy(kind, res)
    if kind == "random":
        out = mix_random(deltas, np.random.default_rng(seed)).data
    elif kind == "env":
        out = mix_env(deltas, state, res).data
    else:
        out = mix_output(deltas, res).data
    assert np.max(np.abs(out - d)) < 1e-6
    m = am.mix_weights([Tensor(r.standard_normal(d.shape)) for _ in range(R)], Tensor(state),
                       strat, np.random.default_rng(seed))
    assert m.min() >= 0 and m.max() <= 1
    assert np.max(np.abs(m.sum(axis=1) - 1)) < 1e-6


# -- step / rollout ----------------------------------------------------------

def test_zero_rules_step_is_identity(rng):
    aut = Automaton.init(_config(fire_rate=0.5), seed=3)
    x = rng.standard_normal((1, 6, 8, 8)).astype(np.float32)
    assert np.array_equal(aut.step(x, rng).data, x)


def test_step_fire_rate_one_sum_single_rule(rng):
    cfg = AutomatonConfig(4, (NeighborhoodSpec(),), 5, MixStrategy("sum"), 1.0)
    aut = Automaton(cfg, [_rule(rng, 4, 5)])
    x = rng.standard_normal((1, 4, 5, 5))
    np.testing.assert_array_equal(aut.step(x).data, x + rule_delta(x, aut.rules[0]).data)


def test_fire_fraction_within_three_sigma():
    r = np.random.default_rng(0)
    cfg = AutomatonConfig(4, (NeighborhoodSpec(),), 5, MixStrategy("sum"), 0.5)
    aut = Automaton(cfg, [_rule(r, 4, 5)])
    x = r.standard_normal((1, 4, 64, 64))
    nxt = aut.step(x, np.random.default_rng(7)).data
    frac = np.mean(np.any(nxt != x, axis=1))
    n = 64 * 64
    assert abs(frac - 0.5) <= 3 * np.sqrt(0.25 / n)


def test_rollout_bookkeeping(rng):
    aut = Automaton(_config(fire_rate=1.0), [_rule(rng, 6, 5, s)
                                             for s in _config().rules])
    x = rng.standard_normal((1, 6, 5, 5))
    one, _ = aut.rollout(x, 1)
    np.testing.assert_array_equal(one.data, aut.step(x).data)
    final, snaps = aut.rollout(x, 12, record_at=[0, 5, 12])
    assert sorted(snaps) == [0, 5, 12]
    assert all(v.shape == x.shape for v in snaps.values())
    np.testing.assert_array_equal(snaps[12], final.data)
    with pytest.raises(ValueError):
        aut.rollout(x, 5, record_at=[6])
    with pytest.raises(ValueError):
        aut.rollout(x, 0)


def test_zero_init_rollout_600_is_identity():
    aut = Automaton.init(presets.automaton_config("mnnca"), seed=1)
    x = np.random.default_rng(2).standard_normal((1, 12, 16, 16)).astype(np.float32)
    final, snaps = aut.rollout(x, 600, np.random.default_rng(0), record_at=(50, 200, 600))
    assert np.array_equal(final.data, x)
    assert len(snaps) == 3 and all(np.array_equal(s, x) for s in snaps.values())


@settings(max_examples=10, deadline=None)
@given(dy=st.integers(0, 7), dx=st.integers(0, 7), kind=st.sampled_from(["random", "env"]))
def test_step_translation_equivariant(dy, dx, kind):
    r = np.random.default_rng(dy * 8 + dx)
    cfg = _config(mix=kind, fire_rate=0.5)
    aut = Automaton(cfg, [_rule(r, 6, 5, s) for s in cfg.rules])
    x = r.standard_normal((1, 6, 8, 8))
    fm = (r.random((1, 1, 8, 8)) < 0.5).astype(np.float64)
    mm = am.random_mask(x.shape, 2, r, np.float64)
    sh = lambda a: np.roll(a, (dy, dx), axis=(2, 3))
    a = sh(aut.step(x, fire_mask=fm, mix_mask=mm).data)
    b = aut.step(sh(x), fire_mask=sh(fm), mix_mask=sh(mm)).data
    assert np.array_equal(a, b)


def test_rollout_gradient_env_fire_one():
    r = np.random.default_rng(11)
    cfg = _config(R=2, mix="env", fire_rate=1.0, C=4, hidden=3)
    base = [_rule(r, 4, 3, s) for s in cfg.rules]

    def fn(x, *ws):
        rules = [RuleNet(s, ws[3 * i], ws[3 * i + 1], ws[3 * i + 2], i)
                 for i, s in enumerate(cfg.rules)]
        final, _ = Automaton(cfg, rules).rollout(x, 10)
        return engine.mean(engine.square(final))

    arrays = [r.standard_normal((1, 4, 5, 5)) * 0.5]
    for rule in base:
        arrays += [rule.W1.data * 0.5, rule.b1.data, rule.W2.data * 0.3]
    assert gradcheck.check(fn, arrays, max_coords=20, rng=r) < 1e-4


# -- param_count -------------------------------------------------------------

def test_param_count_formula_and_enumeration():
    cfg = AutomatonConfig(12, (NeighborhoodSpec(),), 96, MixStrategy("sum"))
    assert param_count(cfg) == 96 * 48 + 96 + 12 * 96 == 5856
    aut = Automaton.init(cfg)
    assert sum(p.data.size for p in aut.params()) == 5856


def test_param_count_additive():
    one = AutomatonConfig(12, (NeighborhoodSpec(1, ("sobel_x", "laplacian")),), 20)
    two = AutomatonConfig(12, (NeighborhoodSpec(1, ("sobel_x", "laplacian")),
                               NeighborhoodSpec(2, ("sobel_x", "laplacian"))), 20,
                          MixStrategy("random"))
    assert param_count(two) == 2 * param_count(one)


def test_paper_scale_calibration():
    counts = {m: param_count(presets.automaton_config(m, "paper")) for m in presets.MODELS}
    assert counts == {"nca": 2806, "nca_xl": 37576, "mnnca": 37536}


def test_config_validation_and_json():
    with pytest.raises(ValueError):
        AutomatonConfig(3)
    with pytest.raises(ValueError):
        AutomatonConfig(6, (NeighborhoodSpec(), NeighborhoodSpec(2)), 4, MixStrategy("env"))
    with pytest.raises(ValueError):
        AutomatonConfig(6, (NeighborhoodSpec(),), 4, fire_rate=0.0)
    with pytest.raises(ValueError):
        MixStrategy("env", (1, 1))
    cfg = _config(R=3, mix="output")
    assert cfg.mix.reserved == (3, 4, 5)
    assert AutomatonConfig.from_json(cfg.to_json()) == cfg
