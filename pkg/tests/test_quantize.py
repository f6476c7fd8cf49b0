import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from qrobust.autodiff import Tensor, backward, ops
from qrobust.quantize import (
    SCHEMES,
    QuantizerError,
    QuantizerSpec,
    SqSchedule,
    levels,
    quantization_error,
    quantize,
    quantize_gradient,
    quantize_stochastic,
    scheme,
    sq_ratio,
    sq_select,
    ste_backward,
    ste_quantize,
)

UNIFORM_8_0 = QuantizerSpec("uniform", bits=8, integer_bits=0)
finite = st.floats(-4, 4, allow_nan=False, width=32)


def grid_levels(bits, integer_bits, symmetric=False, relu=False):
    """Independent enumeration of a fixed-point level set."""
    frac = bits - integer_bits - (0 if relu else 1)
    top = 2**integer_bits * 2**frac  # exclusive, in units of the step
    if relu:
        k = np.arange(0, top)
    elif symmetric:
        k = np.arange(-top + 1, top)
    else:
        k = np.arange(-top, top)
    return k / 2.0**frac


def ternary_scale(x):
    a = np.abs(x.astype(np.float64))
    delta = 0.7 * a.mean()
    above = a[a > delta]
    return delta, (above.mean() if above.size else 1.0)


# -- examples ----------------------------------------------------------------


def test_ternary_zero_input():
    np.testing.assert_array_equal(quantize(scheme("ternary"), np.zeros(3)), np.zeros(3))


def test_ternary_plus_minus_one():
    x = np.array([1.0, -1.0, 1.0, -1.0])
    np.testing.assert_array_equal(quantize(scheme("ternary"), x), x)


def test_uniform_8bit_grid_and_clip():
    assert quantize(UNIFORM_8_0, np.array([0.5]))[0] == 0.5
    assert quantize(UNIFORM_8_0, np.array([2.0]))[0] == 0.9921875


def test_non_finite_input_rejected():
    with pytest.raises(QuantizerError):
        quantize(scheme("ternary"), np.array([1.0, np.nan]))


def test_spec_validation():
    with pytest.raises(QuantizerError):
        QuantizerSpec("uniform", bits=4, integer_bits=4)
    with pytest.raises(QuantizerError):
        QuantizerSpec("float16")
    with pytest.raises(QuantizerError):
        scheme("3-bit")
    assert QuantizerSpec.from_dict("stq") == QuantizerSpec("stochastic_ternary")
    assert QuantizerSpec.from_dict(UNIFORM_8_0.to_dict()) == UNIFORM_8_0


def test_stochastic_ternary_on_level_is_certain():
    x = np.array([1.0, -1.0, 0.0, 1.0])  # s = 1, every element on a level
    rng = np.random.default_rng(0)
    for _ in range(20):
        np.testing.assert_array_equal(quantize_stochastic(scheme("stq"), x, rng), x)


def test_stochastic_midpoint_frequency():
    spec = QuantizerSpec("uniform", bits=4, integer_bits=0)
    n = 100_000
    x = np.full(n, 0.0625)  # midway between 0 and 0.125
    out = quantize_stochastic(spec, x, np.random.default_rng(1))
    freq = float(np.mean(out == 0.125))
    assert set(np.unique(out)) == {0.0, 0.125}
    assert abs(freq - 0.5) <= 3 * 0.5 / np.sqrt(n)


def test_stochastic_is_deterministic_given_seed():
    x = np.random.default_rng(0).normal(size=50)
    a = quantize_stochastic(scheme("stq"), x, np.random.default_rng(9))
    b = quantize_stochastic(scheme("stq"), x, np.random.default_rng(9))
    assert np.array_equal(a, b)
    assert np.array_equal(quantize(QuantizerSpec("stochastic_binary", seed=4), x), quantize(QuantizerSpec("stochastic_binary", seed=4), x))


def test_ste_examples():
    assert ste_backward(UNIFORM_8_0, np.array([1.5]), np.array([0.3]))[0] == 1.5
    assert ste_backward(UNIFORM_8_0, np.array([1.5]), np.array([5.0]))[0] == 0.0


def test_ste_descent_on_one_parameter_toy():
    w = Tensor(np.array([0.7]), requires_grad=True, dtype=np.float64)
    target = -0.25
    spec = QuantizerSpec("uniform", bits=4, integer_bits=0)
    losses = []
    for _ in range(50):
        q = ste_quantize(spec, w, training=True)
        loss = ops.sum((q - target) * (q - target))
        losses.append(loss.item())
        w.data -= 0.05 * backward(loss, [w])[w].data
    assert losses[-1] < losses[0]
    assert losses[-1] < 1e-2


def test_ste_quantize_forward_values_and_gradient_mask():
    x = Tensor(np.array([0.3, 2.0, -3.0]), requires_grad=True, dtype=np.float64)
    q = ste_quantize(UNIFORM_8_0, x, training=True)
    np.testing.assert_array_equal(q.data, quantize(UNIFORM_8_0, x.data))
    g = backward(ops.sum(q), [x])[x].data
    np.testing.assert_array_equal(g, [1.0, 0.0, 0.0])


def test_sq_select_extremes():
    e = np.random.default_rng(0).uniform(size=20)
    assert sq_select(e, 1.0, np.random.default_rng(0)).all()
    assert not sq_select(e, 0.0, np.random.default_rng(0)).any()


def test_sq_select_prefers_low_error():
    rng = np.random.default_rng(2)
    hits = sum(bool(sq_select(np.array([1e-8, 1.0]), 0.5, rng)[0]) for _ in range(10_000))
    assert hits >= 9900


def test_sq_ratio_schedule():
    s = SqSchedule(0.5, 1.0, 10)
    assert sq_ratio(s, 0) == 0.5
    assert sq_ratio(s, 5) == 0.75
    assert sq_ratio(s, 10) == sq_ratio(s, 99) == 1.0
    with pytest.raises(QuantizerError):
        SqSchedule(0.9, 0.5, 10)


def test_gradient_quantization_is_unbiased_and_on_grid():
    g = np.random.default_rng(0).normal(size=(8,))
    rng = np.random.default_rng(1)
    draws = np.stack([quantize_gradient(g, 4, rng) for _ in range(20_000)])
    step = 2 * np.abs(g).max() / 15
    np.testing.assert_allclose(draws.mean(axis=0), g, atol=4 * step / np.sqrt(20_000))
    k = (draws + np.abs(g).max()) / step
    np.testing.assert_allclose(k, np.round(k), atol=1e-9)


# -- properties --------------------------------------------------------------


@settings(max_examples=80, deadline=None)
@given(arrays(np.float64, st.integers(1, 40), elements=finite), st.sampled_from([(8, 0), (4, 0), (4, 2), (2, 0), (3, 1)]), st.booleans())
def test_uniform_output_on_grid(x, bits_int, symmetric):
    bits, integer_bits = bits_int
    spec = QuantizerSpec("uniform", bits=bits, integer_bits=integer_bits, symmetric=symmetric)
    out = quantize(spec, x)
    assert np.isin(out, grid_levels(bits, integer_bits, symmetric)).all()
    np.testing.assert_array_equal(levels(spec, x), grid_levels(bits, integer_bits, symmetric))


@settings(max_examples=80, deadline=None)
@given(arrays(np.float64, st.integers(1, 40), elements=finite))
def test_quantized_relu_nonnegative_grid(x):
    spec = QuantizerSpec("quantized_relu", bits=4, integer_bits=2)
    out = quantize(spec, x)
    assert np.isin(out, grid_levels(4, 2, relu=True)).all()
    assert (out >= 0).all()


@settings(max_examples=80, deadline=None)
@given(arrays(np.float64, st.integers(1, 40), elements=finite))
def test_ternary_matches_threshold_rule(x):
    delta, s = ternary_scale(x)
    expected = np.where(np.abs(x) > delta, np.sign(x) * s, 0.0)
    np.testing.assert_allclose(quantize(scheme("ternary"), x), expected, rtol=1e-12)
    out = quantize_stochastic(scheme("stq"), x, np.random.default_rng(0))
    assert np.isin(out, [-s, 0.0, s]).all()


@settings(max_examples=80, deadline=None)
@given(arrays(np.float64, st.integers(1, 40), elements=finite))
def test_binary_levels(x):
    s = np.abs(x).mean() or 1.0  # all-zero input falls back to unit scale
    assert np.isin(quantize(scheme("binary"), x), [-s, s]).all()
    assert np.isin(quantize_stochastic(scheme("s-binary"), x, np.random.default_rng(0)), [-s, s]).all()


@settings(max_examples=60, deadline=None)
@given(st.lists(finite, min_size=2, max_size=30))
def test_uniform_is_monotone(values):
    x = np.sort(np.array(values, dtype=np.float64))
    assert np.all(np.diff(quantize(QuantizerSpec("uniform", bits=4, integer_bits=1), x)) >= 0)


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, st.integers(1, 30), elements=finite), st.sampled_from(sorted(SCHEMES)))
def test_quantize_never_mutates_input(x, name):
    before = x.copy()
    quantize(scheme(name), x, np.random.default_rng(0))
    assert np.array_equal(x, before)


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, st.integers(2, 30), elements=st.floats(0, 2)), st.floats(0, 1))
def test_sq_select_count(errors, ratio):
    mask = sq_select(errors, ratio, np.random.default_rng(0))
    assert mask.sum() == int(round(ratio * errors.size))


def test_quantization_error_is_absolute_difference():
    x = np.array([0.26, -0.9, 0.0])
    np.testing.assert_allclose(quantization_error(QuantizerSpec("uniform", bits=3, integer_bits=0), x), np.abs(x - np.array([0.25, -1.0, 0.0])))


def bracket(spec, x, s_override=None):
    """Neighbouring levels (a, b) of each x, by independent arithmetic."""
    if spec.kind == "uniform":
        step = 2.0 ** -(spec.bits - spec.integer_bits - 1)
        a = np.floor(x / step) * step
        top = 2.0**spec.integer_bits - step
        return a, np.where(a + step > top, np.nan, a + step)  # above top clips
    s = s_override
    if spec.kind == "stochastic_binary":
        return np.full_like(x, -s), np.full_like(x, s)
    a = np.where(x >= 0, 0.0, -s)
    return a, np.where(x >= 0, s, 0.0)


@pytest.mark.parametrize("name", ["stq", "s-binary", "4-bit"])
def test_stochastic_rounding_unbiased_within_three_sigma(name):
    n = 100_000
    base = scheme(name)
    spec = QuantizerSpec("uniform", bits=4, integer_bits=0) if name == "4-bit" else base
    x = np.random.default_rng(11).uniform(-0.9, 0.9, size=100)
    s = None
    if spec.kind == "stochastic_ternary":
        s = ternary_scale(x)[1]
    elif spec.kind == "stochastic_binary":
        s = np.abs(x).mean()
    a, b = bracket(spec, x, s)
    with np.errstate(invalid="ignore"):
        inside = (x >= a) & (x <= b)
    rng = np.random.default_rng(6)
    total = np.zeros_like(x)
    for _ in range(n // 10_000):
        draws = quantize_stochastic(spec, np.tile(x, (10_000, 1)), rng)
        total += draws.sum(axis=0)
    mean = total / n
    with np.errstate(invalid="ignore"):
        sigma = np.sqrt((b - x) * (x - a))
    err = np.abs(mean - x)[inside]
    assert inside.sum() >= 40
    assert np.all(err <= 3 * sigma[inside] / np.sqrt(n) + 1e-12)
