"""Quantizer unit suite: branch values, idempotence, range, packing-free math."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from ttq.quant import (
    KernelError,
    QuantInputError,
    QuantParamError,
    QuantizedTensor,
    QuantSpec,
    code_bounds,
    fake_quant_forward,
    init_scale,
    int_matvec,
    quantize,
    round_half_away,
    ste_grad_input,
    ste_grad_scale,
)

finite_arrays = hnp.arrays(
    np.float64,
    hnp.array_shapes(max_dims=2, max_side=16),
    elements=st.floats(min_value=-1e9, max_value=1e9, allow_nan=False, allow_infinity=False),
)


class TestQuantize:
    def test_round_to_nearest_zero(self):
        q = quantize(np.array([0.4]), 1.0, 8)
        assert q.codes[0] == 0
        assert q.dequantize()[0] == 0.0

    def test_saturation_at_upper_bound(self):
        q = quantize(np.array([5.3]), 0.1, 4)
        assert q.codes[0] == 7
        np.testing.assert_allclose(q.dequantize(), [0.7])

    def test_exact_integer_multiple(self):
        q = quantize(np.array([-1.27]), 0.01, 8)
        assert q.codes[0] == -127
        np.testing.assert_allclose(q.dequantize(), [-1.27])

    def test_nonpositive_scale_rejected(self):
        with pytest.raises(QuantParamError):
            quantize(np.zeros(3), 0.0, 8)

    def test_nonfinite_input_rejected(self):
        with pytest.raises(QuantInputError):
            quantize(np.array([np.inf]), 1.0, 8)

    def test_ties_round_away_from_zero(self):
        q = quantize(np.array([0.5, -0.5, 1.5, -1.5]), 1.0, 8)
        np.testing.assert_array_equal(q.codes, [1, -1, 2, -2])

    @given(finite_arrays, st.sampled_from([2, 4, 8]))
    @settings(max_examples=200, deadline=None)
    def test_codes_always_in_signed_range(self, x, bits):
        q = quantize(x, 0.37, bits)
        lo, hi = code_bounds(bits)
        assert q.codes.min(initial=0) >= lo
        assert q.codes.max(initial=0) <= hi


class TestFakeQuant:
    def test_fixed_point_of_quantizer(self):
        x = 0.25 * np.arange(-4, 5, dtype=np.float64)
        np.testing.assert_array_equal(fake_quant_forward(x, 0.25, 8), x)

    def test_full_precision_sentinel_is_identity(self):
        x = np.array([0.123456, -9.87])
        out = fake_quant_forward(x, 1.0, 32)
        np.testing.assert_array_equal(out, x)

    def test_matches_quantize_example(self):
        np.testing.assert_array_equal(fake_quant_forward(np.array([0.4]), 1.0, 8), [0.0])

    @given(finite_arrays, st.sampled_from([2, 4, 8]))
    @settings(max_examples=200, deadline=None)
    def test_idempotent(self, x, bits):
        once = fake_quant_forward(x, 0.51, bits)
        twice = fake_quant_forward(once, 0.51, bits)
        np.testing.assert_array_equal(once, twice)


class TestSteGradInput:
    def test_in_range_passes_through(self):
        assert ste_grad_input(np.array([0.4]), 1.0, 8)[0] == 1.0

    def test_above_range_blocked(self):
        assert ste_grad_input(np.array([10.0]), 0.1, 4)[0] == 0.0

    def test_lower_boundary_inclusive(self):
        bits = 4
        lo, _ = code_bounds(bits)
        scale = 0.1
        assert ste_grad_input(np.array([lo * scale]), scale, bits)[0] == 1.0


class TestSteGradScale:
    def test_in_range_residual(self):
        np.testing.assert_allclose(ste_grad_scale(np.array([0.4]), 1.0, 8), [-0.4])

    def test_above_range_saturates_to_upper_code(self):
        np.testing.assert_allclose(ste_grad_scale(np.array([10.0]), 0.1, 4), [7.0])

    def test_below_range_saturates_to_lower_code(self):
        np.testing.assert_allclose(ste_grad_scale(np.array([-10.0]), 0.1, 4), [-8.0])

    def test_zero_at_exact_code_points(self):
        x = 0.25 * np.arange(-8, 8, dtype=np.float64)
        np.testing.assert_allclose(ste_grad_scale(x, 0.25, 4), np.zeros_like(x), atol=1e-12)

    def test_central_difference_sanity_of_input_surrogate(self):
        # Where the surrogate says 1 and we are away from rounding jumps, the
        # averaged finite-difference slope of the fake quantizer approaches 1.
        scale, bits = 0.1, 8
        xs = np.linspace(-1.0, 1.0, 4001)
        ratio = xs / scale
        near_jump = np.abs(ratio - np.floor(ratio) - 0.5) < 1e-3
        active = (ste_grad_input(xs, scale, bits) == 1.0) & ~near_jump
        h = scale / 4
        slopes = (fake_quant_forward(xs + h, scale, bits) - fake_quant_forward(xs - h, scale, bits)) / (2 * h)
        assert abs(slopes[active].mean() - 1.0) < 0.05


class TestInitScale:
    def test_formula(self):
        assert init_scale(np.array([0.5, -1.27]), 8) == pytest.approx(0.01)

    def test_zero_array_fallback(self):
        assert init_scale(np.zeros(5), 8) == 1.0

    def test_two_bit(self):
        assert init_scale(np.array([1.0, -0.2]), 2) == 1.0


class TestSharedScale:
    def test_concatenation_equals_per_chunk_quantization(self):
        rng = np.random.default_rng(0)
        chunks = [rng.normal(size=(3, 4)), rng.normal(size=7), rng.normal(size=(2, 2, 2))]
        flat = np.concatenate([c.ravel() for c in chunks])
        scale = init_scale(flat, 4)
        whole = quantize(flat, scale, 4).codes
        per_chunk = np.concatenate([quantize(c, scale, 4).codes.ravel() for c in chunks])
        np.testing.assert_array_equal(whole, per_chunk)

    def test_split_scale_gradients_sum_to_shared_gradient(self):
        rng = np.random.default_rng(1)
        x = rng.normal(size=64)
        scale = 0.2
        full = ste_grad_scale(x, scale, 4).sum()
        parts = ste_grad_scale(x[:20], scale, 4).sum() + ste_grad_scale(x[20:], scale, 4).sum()
        np.testing.assert_allclose(full, parts, rtol=1e-12)


class TestIntMatvec:
    def test_identity_codes(self):
        w = QuantizedTensor(np.eye(2, dtype=np.int32), 1.0, 8)
        x = QuantizedTensor(np.array([3, 5], dtype=np.int32), 1.0, 8)
        acc, scale = int_matvec(w, x)
        np.testing.assert_array_equal(acc, [3, 5])
        assert scale == 1.0

    def test_matches_fp64_reference(self):
        # Integer accumulation is exact, so it must equal the FP64 evaluation
        # of the code matmul bit for bit (codes are well inside 2**53).
        rng = np.random.default_rng(2)
        wc = rng.integers(-128, 128, size=(16, 64)).astype(np.int32)
        xc = rng.integers(-128, 128, size=64).astype(np.int32)
        w = QuantizedTensor(wc, 0.03, 8)
        x = QuantizedTensor(xc, 0.11, 8)
        acc, scale = int_matvec(w, x)
        ref = wc.astype(np.float64) @ xc.astype(np.float64)
        np.testing.assert_array_equal(acc.astype(np.float64), ref)
        np.testing.assert_array_equal(acc * scale, (0.03 * 0.11) * ref)

    def test_zero_codes(self):
        w = QuantizedTensor(np.zeros((4, 8), dtype=np.int32), 0.5, 4)
        x = QuantizedTensor(np.zeros(8, dtype=np.int32), 0.5, 8)
        acc, _ = int_matvec(w, x)
        np.testing.assert_array_equal(acc, np.zeros(4))

    def test_int8_safe_below_range_analysis_bound(self):
        n = 2 ** 15 - 1
        w = QuantizedTensor(np.zeros((1, n), dtype=np.int32), 1.0, 8)
        x = QuantizedTensor(np.zeros(n, dtype=np.int32), 1.0, 8)
        acc, _ = int_matvec(w, x)
        assert acc[0] == 0

    def test_overflow_bound_detected(self):
        n = 2 ** 17
        w = QuantizedTensor(np.zeros((1, n), dtype=np.int32), 1.0, 8)
        x = QuantizedTensor(np.zeros(n, dtype=np.int32), 1.0, 8)
        with pytest.raises(KernelError):
            int_matvec(w, x)

    def test_inner_dim_mismatch(self):
        w = QuantizedTensor(np.zeros((2, 3), dtype=np.int32), 1.0, 8)
        x = QuantizedTensor(np.zeros(4, dtype=np.int32), 1.0, 8)
        with pytest.raises(ValueError):
            int_matvec(w, x)


class TestSpecAndTensorValidation:
    def test_bad_bits_rejected(self):
        with pytest.raises(QuantParamError):
            QuantSpec(bits=3)

    def test_full_precision_spec_allowed(self):
        assert QuantSpec(bits=32).is_full_precision

    def test_out_of_range_codes_rejected(self):
        with pytest.raises(QuantParamError):
            QuantizedTensor(np.array([8], dtype=np.int32), 1.0, 4)


def test_round_half_away_behaviour():
    np.testing.assert_array_equal(
        round_half_away(np.array([-2.5, -0.5, 0.0, 0.5, 2.5, 2.4])),
        [-3.0, -1.0, 0.0, 1.0, 3.0, 2.0],
    )
