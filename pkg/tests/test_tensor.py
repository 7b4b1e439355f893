import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from oracles import summed_mean, two_pass_variance
from resus.tensor import NonFiniteError, channel_mean, channel_moments, channel_variance, scale_channels


def test_constant_tensor_has_zero_variance_and_its_value_as_mean():
    t = np.full((2, 3, 4, 4), 5.0, dtype=np.float32)
    assert np.all(channel_variance(t) == 0.0)
    assert np.all(channel_mean(t) == 5.0)


def test_small_known_channels():
    t = np.array([1, 3, 1, 3], dtype=np.float32).reshape(1, 1, 2, 2)
    assert channel_variance(t)[0] == 1.0
    assert channel_mean(np.array([-1.0, 1.0]).reshape(1, 1, 1, 2))[0] == 0.0


def test_variance_and_mean_match_oracles():
    t = np.random.default_rng(0).normal(1.0, 2.0, (2, 3, 4, 4)).astype(np.float32)
    np.testing.assert_allclose(channel_variance(t), two_pass_variance(t), rtol=1e-6)
    np.testing.assert_allclose(channel_mean(t), summed_mean(t), rtol=1e-6)


def test_moments_agree_with_separate_reductions():
    t = np.random.default_rng(3).normal(size=(3, 2, 5, 5))
    n, mu, m2 = channel_moments(t)
    assert n == 75
    np.testing.assert_allclose(mu, channel_mean(t))
    np.testing.assert_allclose(m2 / n, channel_variance(t))


def test_scale_identity_and_quadrupling():
    t = np.random.default_rng(1).normal(size=(2, 3, 4, 4)).astype(np.float32)
    np.testing.assert_array_equal(scale_channels(t, np.ones(3)), t)
    one = t[:, :1]
    v = channel_variance(one)[0]
    assert channel_variance(scale_channels(one, [2.0]))[0] == pytest.approx(4 * v, rel=1e-6)


def test_scale_random_gain():
    rng = np.random.default_rng(2)
    t = rng.normal(size=(4, 5, 3, 3)).astype(np.float32)
    g = rng.uniform(0.1, 3.0, 5)
    np.testing.assert_allclose(channel_variance(scale_channels(t, g)), g ** 2 * channel_variance(t),
                               rtol=1e-6)


def test_errors():
    with pytest.raises(ValueError):
        channel_variance(np.zeros((3, 4)))
    with pytest.raises(ValueError):
        scale_channels(np.zeros((1, 3, 2, 2)), np.ones(2))
    bad = np.zeros((1, 3, 2, 2))
    bad[0, 2, 0, 0] = np.nan
    with pytest.raises(NonFiniteError, match="2"):
        channel_mean(bad)


def test_reductions_are_deterministic():
    t = np.random.default_rng(5).normal(size=(8, 4, 6, 6)).astype(np.float32)
    assert channel_variance(t).tobytes() == channel_variance(t.copy()).tobytes()
    assert channel_mean(t).tobytes() == channel_mean(t.copy()).tobytes()


tensors = arrays(np.float64, st.tuples(st.integers(1, 3), st.integers(1, 4), st.integers(1, 4),
                                       st.integers(1, 4)),
                 elements=st.floats(-100, 100, allow_nan=False, width=32))


@settings(max_examples=60, deadline=None)
@given(tensors, st.data())
def test_scaling_law_property(t, data):
    c = t.shape[1]
    g = np.array(data.draw(st.lists(st.floats(0.01, 10), min_size=c, max_size=c)))
    v = channel_variance(t)
    vs = channel_variance(scale_channels(t, g))
    np.testing.assert_allclose(vs, g ** 2 * v, rtol=1e-5, atol=1e-9 * (1 + v.max()) * g.max() ** 2)
    np.testing.assert_allclose(channel_mean(scale_channels(t, g)), g * channel_mean(t),
                               rtol=1e-6, atol=1e-9 * np.abs(t).max(initial=1) * g.max())
    assert np.all(v >= 0)
