import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from qatbnn.errors import DomainError, ShapeError
from qatbnn.quantizer import (
    QuantPlan,
    QuantSpec,
    RangeCalibrator,
    calibrate_range,
    compute_scale,
    fake_quant_forward,
    quantize,
    ste_backward,
)


def brute_force_quantize(x, spec):
    """Nearest value among all 2**b grid points; ties go to the larger |k|."""
    ks = np.arange(spec.qmin, spec.qmax + 1, dtype=np.float64)
    grid = ks * spec.scale
    d = np.abs(np.asarray(x)[..., None] - grid)
    best = d.min(axis=-1, keepdims=True)
    tied = d == best
    # among tied candidates prefer the one farthest from zero
    score = np.where(tied, np.abs(ks), -1.0)
    return grid[np.argmax(score, axis=-1)]


def test_compute_scale_examples():
    assert compute_scale(-1, 1, 8) == pytest.approx(2 / 255)
    assert compute_scale(0, 3, 2) == 1.0
    assert compute_scale(-0.5, 0.5, 4) == pytest.approx(1 / 15)
    with pytest.raises(DomainError):
        compute_scale(1, 1, 8)
    with pytest.raises(DomainError):
        compute_scale(-1, 1, 1)


def test_quantize_examples():
    spec = QuantSpec(8, -1.0, 1.0)
    assert quantize(0.0, spec) == 0.0
    assert quantize(2.0, spec) == pytest.approx(254 / 255)
    assert quantize(2.0, spec) == 127 * spec.scale
    assert quantize(-3.0, spec) == pytest.approx(-256 / 255)
    assert quantize(0.3, QuantSpec(2, -1.0, 0.5)) == 0.5


def test_round_half_away_from_zero():
    spec = QuantSpec(4, -1.5, 1.5)  # scale 0.2
    s = spec.scale
    assert quantize(2.5 * s, spec) == 3 * s
    assert quantize(-2.5 * s, spec) == -3 * s
    assert quantize(0.5 * s, spec) == s


@pytest.mark.parametrize("bits", [2, 3, 4])
def test_matches_brute_force_oracle(bits):
    rng = np.random.default_rng(bits)
    for _ in range(10):
        a = rng.uniform(-3, 0)
        b = rng.uniform(0.01, 3)
        spec = QuantSpec(bits, a, b)
        x = np.linspace(2 * a, 2 * b, 2001)
        np.testing.assert_array_equal(fake_quant_forward(x, spec), brute_force_quantize(x, spec))


def test_fake_quant_on_grid_is_identity():
    spec = QuantSpec(4, -1.0, 1.0)
    grid = np.arange(spec.qmin, spec.qmax + 1) * spec.scale
    np.testing.assert_array_equal(fake_quant_forward(grid, spec), grid)


specs = st.builds(
    lambda b, a, w: QuantSpec(b, a, a + w),
    st.sampled_from([2, 3, 4, 8, 16]),
    st.floats(-5, 5),
    st.floats(1e-3, 10),
)


@settings(max_examples=200, deadline=None)
@given(spec=specs, x=st.floats(-50, 50))
def test_idempotent_and_on_grid(spec, x):
    q = quantize(x, spec)
    assert quantize(q, spec) == q
    k = round(q / spec.scale)
    assert spec.qmin <= k <= spec.qmax
    assert q == k * spec.scale


@settings(max_examples=200, deadline=None)
@given(spec=specs, x=st.floats(-50, 50), y=st.floats(-50, 50))
def test_monotone(spec, x, y):
    lo, hi = min(x, y), max(x, y)
    assert quantize(lo, spec) <= quantize(hi, spec)


@settings(max_examples=200, deadline=None)
@given(b=st.sampled_from([2, 3, 4, 8, 16]), beta=st.floats(1e-3, 10), u=st.floats(-1, 1))
def test_error_bound_symmetric(b, beta, u):
    spec = QuantSpec(b, -beta, beta)
    x = u * beta
    assert abs(x - quantize(x, spec)) <= spec.scale / 2 * (1 + 1e-12)


def test_ste_examples():
    spec = QuantSpec(8, -1.0, 1.0)
    x = np.array([-0.9, 0.0, 0.5, 0.99])
    g = np.array([1.0, -2.0, 3.0, 4.0])
    np.testing.assert_array_equal(ste_backward(g, x, spec), g)
    np.testing.assert_array_equal(ste_backward(np.ones(2), np.array([10.0, 0.1]), spec), [0.0, 1.0])
    with pytest.raises(ShapeError):
        ste_backward(np.ones(3), np.ones(2), spec)


def test_ste_mask_elementwise_oracle():
    rng = np.random.default_rng(0)
    spec = QuantSpec(3, -0.7, 0.4)
    x = rng.uniform(-2, 2, size=500)
    g = rng.normal(size=500)
    expect = []
    for xi, gi in zip(x, g):
        k = np.trunc(xi / spec.scale)
        frac = xi / spec.scale - k
        k += int(frac >= 0.5) - int(frac <= -0.5)
        expect.append(gi if spec.qmin <= k <= spec.qmax else 0.0)
    np.testing.assert_array_equal(ste_backward(g, x, spec), expect)


def test_calibrate_examples():
    obs = [np.array([-2.0, 0.5, 3.0])]
    assert calibrate_range(obs) == (-2.0, 3.0)
    assert calibrate_range(obs, symmetric=True) == (-3.0, 3.0)
    lo, hi = calibrate_range([np.array([-1.0, 1.0]), np.array([-3.0, 2.0])], "ema", gamma=0.9)
    assert lo == pytest.approx(-1.2)
    assert hi == pytest.approx(1.1)
    assert calibrate_range([np.array([-1.0, 1.0]), np.array([-3.0, 2.0])]) == (-3.0, 2.0)
    with pytest.raises(DomainError):
        calibrate_range([])


def test_calibrator_degenerate_range_is_widened():
    cal = RangeCalibrator(symmetric=True)
    cal.update(np.zeros(4))
    spec = cal.spec(8, "activation")
    assert spec.alpha < spec.beta and spec.scale > 0


def test_plan_roundtrip():
    plan = QuantPlan()
    plan.set(0, "weight", QuantSpec(4, -0.3, 0.3, "weight"))
    plan.set(0, "activation", QuantSpec(4, -2.0, 2.0, "activation"))
    again = QuantPlan.from_list(plan.to_list())
    assert again.specs == plan.specs
    assert again.bits == 4
    assert plan.missing_sites([(0, "weight"), (1, "weight")]) == [(1, "weight")]


def test_error_bound_fails_outside_grid_hull():
    # the signed grid tops out at (2^(b-1) - 1) * S, well below beta when alpha = 0
    spec = QuantSpec(2, 0.0, 3.0)
    assert spec.scale == 1.0
    assert quantize(3.0, spec) == 1.0
    assert abs(3.0 - quantize(3.0, spec)) > spec.scale / 2
