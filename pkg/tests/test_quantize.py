import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from pdqat.errors import ContractError, InputError
from pdqat.quantize import (QuantSpec, fixed_point_round, levels, quantize_activations,
                            quantize_weights, ste_backward, ste_weight_backward)

bits = st.sampled_from([1, 2, 3, 4, 8])
unit = st.floats(0.0, 1.0, allow_nan=False)
finite = st.floats(-1e3, 1e3, allow_nan=False, allow_infinity=False)


def on_grid(q, k, tol=1e-9):
    s = np.asarray(q) * levels(k)
    return np.all(np.abs(s - np.round(s)) <= tol)


@pytest.mark.parametrize("k", [1, 2, 4, 8])
def test_round_endpoints(k):
    assert fixed_point_round(0.0, k) == 0.0
    assert fixed_point_round(1.0, k) == 1.0


def test_round_examples():
    assert fixed_point_round(0.4, 1) == 0.0
    assert fixed_point_round(0.6, 1) == 1.0
    assert fixed_point_round(0.5, 2) == pytest.approx(2 / 3)


def test_round_half_goes_up():
    # exact ties on the scaled grid round away from zero
    assert fixed_point_round(0.5, 1) == 1.0
    assert fixed_point_round(1 / 6, 2) == pytest.approx(1 / 3)


def test_round_rejects_out_of_range():
    with pytest.raises(ContractError):
        fixed_point_round(np.array([0.2, 1.2]), 2)
    with pytest.raises(ContractError):
        fixed_point_round(-0.01, 2)


def test_levels_rejects_zero_bits():
    with pytest.raises(InputError):
        levels(0)


def test_weight_examples():
    np.testing.assert_array_equal(quantize_weights(np.zeros(3), 2), [0, 0, 0])
    np.testing.assert_array_equal(quantize_weights(np.array([-1000.0, 1000.0]), 1), [-1, 1])
    np.testing.assert_allclose(quantize_weights(np.array([0.0, 0.5493]), 2), [1 / 3, 1],
                               atol=1e-12)


def test_activation_examples():
    np.testing.assert_array_equal(quantize_activations(np.array([-0.3, 1.7]), 2), [0, 1])
    assert quantize_activations(np.array([0.3]), 2)[0] == pytest.approx(1 / 3)
    g = np.array([0, 1 / 3, 2 / 3, 1])
    np.testing.assert_array_equal(quantize_activations(g, 2), g)


def test_quantizers_keep_dtype():
    w = np.linspace(-1, 1, 5, dtype=np.float32)
    assert quantize_weights(w, 2).dtype == np.float32
    assert quantize_activations(w, 2).dtype == np.float32


@given(z=st.lists(unit, min_size=1, max_size=50), k=bits)
def test_round_on_grid_and_idempotent(z, k):
    q = fixed_point_round(np.array(z), k)
    assert on_grid(q, k)
    assert np.array_equal(fixed_point_round(q, k), q)


@given(a=unit, b=unit, k=bits)
def test_round_monotone(a, b, k):
    lo, hi = min(a, b), max(a, b)
    assert fixed_point_round(lo, k) <= fixed_point_round(hi, k)


@given(a=arrays(np.float64, st.integers(1, 30), elements=finite), k=bits)
def test_activation_idempotent_and_on_grid(a, k):
    q = quantize_activations(a, k)
    assert np.array_equal(quantize_activations(q, k), q)
    assert on_grid(q, k)


@given(w=arrays(np.float64, st.integers(1, 30), elements=finite), k=bits)
def test_weights_on_grid(w, k):
    q = quantize_weights(w, k)
    assert np.all(np.abs(q) <= 1)
    if np.max(np.abs(np.tanh(w))) > 0:  # all-zero input maps to zeros instead
        assert on_grid((q + 1) / 2, k)


@given(w=arrays(np.float64, st.integers(1, 30), elements=finite))
def test_one_bit_weights_are_binary(w):
    q = quantize_weights(w, 1)
    if np.max(np.abs(np.tanh(w))) > 0:
        assert set(np.unique(q)) <= {-1.0, 1.0}
    else:
        assert np.all(q == 0)


def test_determinism(rng):
    w = rng.standard_normal(1000)
    assert np.array_equal(quantize_weights(w, 3), quantize_weights(w.copy(), 3))


def test_ste_pass_through_inside():
    g = np.array([0.5, -2.0, 3.0])
    np.testing.assert_array_equal(ste_backward(g, np.array([0.0, 0.4, 1.0])), g)


def test_ste_zero_outside():
    out = ste_backward(np.ones(2), np.array([0.5, 1.7]))
    np.testing.assert_array_equal(out, [1, 0])


def test_ste_mask_matches_indicator(rng):
    x = rng.uniform(-1, 2, 200)
    g = rng.standard_normal(200)
    np.testing.assert_array_equal(ste_backward(g, x), g * ((x >= 0) & (x <= 1)))
    np.testing.assert_array_equal(ste_backward(g, x, clip=False), g)


def test_ste_weight_backward_matches_frozen_max_derivative(rng):
    w = rng.standard_normal(6)
    g = rng.standard_normal(6)
    m = np.max(np.abs(np.tanh(w)))
    h = 1e-6
    num = np.zeros(6)
    for i in range(6):
        e = np.zeros(6)
        e[i] = h
        num[i] = np.dot(g, (np.tanh(w + e) - np.tanh(w - e)) / m) / (2 * h)
    np.testing.assert_allclose(ste_weight_backward(g, w), num, rtol=1e-6)


def test_quantspec_from_bits_and_default():
    qs = QuantSpec.from_bits([0, 2, 4, 0])
    assert qs.enabled == [False, True, True, False]
    assert qs.bits[1:3] == [2, 4]
    assert qs.to_bits() == [0, 2, 4, 0]
    d = QuantSpec.default(5, 3)
    assert d.enabled == [False, True, True, True, False]
    assert d.to_bits() == [0, 3, 3, 3, 0]


def test_quantspec_rejects_enabled_zero_bits():
    with pytest.raises(InputError):
        QuantSpec([0, 2], [True, True])
    with pytest.raises(InputError):
        QuantSpec.from_bits([-1, 2])
