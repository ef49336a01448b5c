import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from speclk import dist


def test_softmax_matches_direct_formula(rng):
    z = rng.normal(size=(5, 7))
    e = np.exp(z)
    np.testing.assert_allclose(dist.softmax(z), e / e.sum(axis=1, keepdims=True), rtol=1e-14)


def test_softmax_is_shift_invariant_and_handles_huge_logits():
    z = np.array([1000.0, 1001.0, 999.0])
    np.testing.assert_allclose(dist.softmax(z), dist.softmax(z - 1000.0), rtol=1e-15)


def test_softmax_temperature():
    z = np.array([0.0, np.log(4.0)])
    np.testing.assert_allclose(dist.softmax(z, t=2.0), [1 / 3, 2 / 3])
    with pytest.raises(ValueError):
        dist.softmax(z, t=0.0)


def test_masked_entries_are_exactly_zero():
    q = dist.masked_softmax(np.zeros(5), [0, 3])
    assert q[1] == 0.0 and q[2] == 0.0 and q[4] == 0.0
    np.testing.assert_allclose(q[[0, 3]], [0.5, 0.5])


def test_all_masked_is_rejected():
    with pytest.raises(ValueError):
        dist.softmax(np.full(3, -np.inf))
    with pytest.raises(ValueError):
        dist.mask_logits(np.zeros(3), [])


def test_log_softmax_consistent(rng):
    z = rng.normal(size=9)
    np.testing.assert_allclose(np.exp(dist.log_softmax(z)), dist.softmax(z), rtol=1e-13)


def test_point_mass_tie_break_lowest_index():
    np.testing.assert_array_equal(dist.point_mass_at_argmax([0.4, 0.4, 0.2]), [1.0, 0.0, 0.0])


def test_sample_with_inverse_cdf():
    d = np.array([0.25, 0.0, 0.75])
    assert dist.sample_with(d, 0.0) == 0
    assert dist.sample_with(d, 0.2499) == 0
    assert dist.sample_with(d, 0.25) == 2
    assert dist.sample_with(d, 0.999999) == 2


def test_sample_frequencies(rng):
    d = np.array([0.1, 0.6, 0.3])
    draws = np.array([dist.sample(d, rng) for _ in range(20000)])
    freq = np.bincount(draws, minlength=3) / len(draws)
    se = np.sqrt(d * (1 - d) / len(draws))
    assert np.all(np.abs(freq - d) < 4 * se)


def test_residual_distribution():
    p = np.array([0.5, 0.3, 0.2])
    q = np.array([0.2, 0.5, 0.3])
    np.testing.assert_allclose(dist.residual_distribution(p, q), [1.0, 0.0, 0.0])
    with pytest.raises(dist.NoRejectionMass):
        dist.residual_distribution(p, p)


def test_as_categorical_validates():
    with pytest.raises(ValueError):
        dist.as_categorical([0.5, 0.6])
    with pytest.raises(ValueError):
        dist.as_categorical([1.5, -0.5])


@settings(max_examples=200, deadline=None)
@given(arrays(np.float64, st.integers(2, 20), elements=st.floats(-50, 50)))
def test_softmax_is_a_distribution(z):
    q = dist.softmax(z)
    assert np.all(q >= 0)
    assert abs(q.sum() - 1.0) < 1e-12
