import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mnnca import engine, gradcheck
from mnnca.engine import Kernel, Tensor
from mnnca.texture import (BankLevel, FeatureBank, LossSpec, TargetFeatures, extract, gram,
                           nearest_rank_index, rgb_view, sw_distance, texture_loss)

SMALL = LossSpec("sw", 16, (BankLevel(1, 6, 3), BankLevel(2, 6, 3), BankLevel(4, 6, 3)))


def test_extract_zero_and_determinism(rng):
    bank = FeatureBank.from_spec(SMALL, np.float64)
    assert all(not f.data.any() for f in extract(np.zeros((1, 3, 8, 8)), bank))
    img = rng.random((1, 3, 8, 8))
    again = FeatureBank.from_spec(SMALL, np.float64)
    for a, b in zip(extract(img, bank), extract(img, again)):
        assert np.array_equal(a.data, b.data)


def test_extract_identity_level(rng):
    w = np.zeros((3, 3, 1, 1))
    w[[0, 1, 2], [0, 1, 2]] = 1.0
    bank = FeatureBank((BankLevel(1, 3, 1),), [Kernel(w)], 0)
    img = rng.random((1, 3, 5, 5))
    np.testing.assert_array_equal(extract(img, bank)[0].data, img)
    with pytest.raises(engine.ShapeError):
        extract(rng.random((1, 4, 5, 5)), bank)


def test_gram_properties(rng):
    assert not gram(np.zeros((1, 4, 3, 3))).data.any()
    f = rng.standard_normal((2, 4, 5, 5))
    G = gram(f).data
    np.testing.assert_allclose(G, np.swapaxes(G, 1, 2), atol=1e-14)
    assert np.linalg.eigvalsh(G).min() > -1e-12
    flat = f.reshape(2, 4, 25)
    np.testing.assert_allclose(G, flat @ np.swapaxes(flat, 1, 2) / 25, atol=1e-14)
    perm = rng.permutation(25)
    Gp = gram(flat[:, :, perm].reshape(f.shape)).data
    np.testing.assert_allclose(Gp, G, atol=1e-13)


def test_sw_identical_and_permuted():
    f = np.random.default_rng(0).standard_normal((1, 3, 4, 4))
    assert sw_distance(f, f, 8, np.random.default_rng(1)).item() == 0.0
    a = np.array([0.0, 1.0]).reshape(1, 1, 1, 2)
    b = np.array([1.0, 0.0]).reshape(1, 1, 1, 2)
    assert sw_distance(a, b, directions=np.ones((1, 1))).item() == 0.0


def test_sw_hand_computed():
    # F=2, three pixels each, direction (0.6, 0.8)
    fa = np.array([[1.0, 0.0, 2.0], [0.0, 1.0, 1.0]]).reshape(1, 2, 1, 3)
    fb = np.array([[0.0, 3.0, 1.0], [2.0, 0.0, 0.0]]).reshape(1, 2, 1, 3)
    d = np.array([[0.6, 0.8]])
    pa = sorted([0.6, 0.8, 2.0])
    pb = sorted([1.6, 1.8, 0.6])
    expected = sum((x - y) ** 2 for x, y in zip(pa, pb)) / 3
    assert abs(sw_distance(fa, fb, directions=d).item() - expected) < 1e-14


def test_sw_resamples_longer_sequence(rng):
    fa = rng.standard_normal((2, 4, 16, 16))
    fb = rng.standard_normal((1, 4, 8, 8))
    assert np.isfinite(sw_distance(fa, fb, 8, rng).item())
    idx = nearest_rank_index(512 * 512, 256 * 256)
    assert idx.shape == (256 * 256,) and idx[0] == 2 and idx[-1] == 512 * 512 - 2
    assert np.all(np.diff(idx) == 4)
    with pytest.raises(engine.ShapeError):
        sw_distance(fa, rng.standard_normal((1, 3, 8, 8)), 8, rng)


def test_sw_large_against_small_target():
    bank = FeatureBank.from_spec(LossSpec(), np.float32)
    r = np.random.default_rng(3)
    target = TargetFeatures.compute(r.random((1, 3, 256, 256)).astype(np.float32), bank)
    img = r.random((1, 3, 512, 512)).astype(np.float32)
    loss = texture_loss(img, target, LossSpec(), bank, r).item()
    assert np.isfinite(loss) and loss >= 0


@pytest.mark.parametrize("kind", ["sw", "gram"])
def test_loss_self_zero_and_nonnegative(rng, kind):
    spec = LossSpec(kind, 16, SMALL.levels)
    bank = FeatureBank.from_spec(spec, np.float64)
    img = rng.random((1, 3, 16, 16))
    target = TargetFeatures.compute(img, bank)
    assert abs(texture_loss(img, target, spec, bank, rng).item()) < 1e-6
    other = rng.random((2, 3, 16, 16))
    assert texture_loss(other, target, spec, bank, rng).item() >= 0


@settings(max_examples=12, deadline=None)
@given(kind=st.sampled_from(["sw", "gram"]), dy=st.integers(0, 3), dx=st.integers(0, 3),
       seed=st.integers(0, 1000))
def test_translation_invariance(kind, dy, dx, seed):
    # shifts by whole pooling blocks permute pixels at every level
    r = np.random.default_rng(seed)
    spec = LossSpec(kind, 16, SMALL.levels)
    bank = FeatureBank.from_spec(spec, np.float64)
    target = TargetFeatures.compute(r.random((1, 3, 16, 16)), bank)
    img = r.random((1, 3, 16, 16))
    shifted = np.roll(img, (4 * dy, 4 * dx), axis=(2, 3))
    a = texture_loss(img, target, spec, bank, np.random.default_rng(seed)).item()
    b = texture_loss(shifted, target, spec, bank, np.random.default_rng(seed)).item()
    assert abs(a - b) < 1e-5


def test_texture_loss_gradient_8x8(rng):
    spec = LossSpec("sw", 8, (BankLevel(1, 4, 3), BankLevel(2, 4, 3)))
    bank = FeatureBank.from_spec(spec, np.float64)
    target = TargetFeatures.compute(rng.random((1, 3, 8, 8)), bank)

    def fn(img):
        return texture_loss(img, target, spec, bank, np.random.default_rng(0))

    assert gradcheck.check(fn, [rng.random((1, 3, 8, 8))]) < 1e-4


def test_rgb_view_clamps(rng):
    s = rng.standard_normal((1, 6, 4, 4)) * 2
    np.testing.assert_array_equal(rgb_view(s).data, np.clip(s[:, :3], 0, 1))


def test_loss_spec_validation():
    with pytest.raises(ValueError):
        LossSpec(projections=4)
    with pytest.raises(ValueError):
        LossSpec(weights=(1.0, -1.0, 1.0))
    with pytest.raises(ValueError):
        LossSpec(kind="l2")
    assert LossSpec.from_json(SMALL.to_json()) == SMALL
    bank = FeatureBank.from_spec(SMALL)
    with pytest.raises(ValueError):
        texture_loss(np.zeros((1, 3, 8, 8), np.float32),
                     TargetFeatures.compute(np.zeros((1, 3, 8, 8), np.float32), bank),
                     LossSpec(), bank)
