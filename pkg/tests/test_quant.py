import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from fractional_qat.quant import (
    CalibrationError,
    Form,
    Mode,
    QuantizationError,
    QuantizedTensor,
    QuantSpec,
    Rounding,
    calibrate_static,
    code_range,
    dequantize,
    factorized_matmul,
    fake_quant,
    levels,
    quantize,
    quantize_narrow,
    quantize_wide,
    wide_levels,
)

GRID = [4, 4.25, 4.5, 4.75, 5, 5.5, 6, 7, 8]


def narrow(bits, **kw):
    return QuantSpec(bits=bits, form=Form.NARROW, **kw)


def wide(bits, **kw):
    return QuantSpec(bits=bits, form=Form.WIDE, **kw)


# -- scalar reference quantizers: plain python floats, one element at a time --

def _round_scalar(u, rounding):
    # python's round() on floats is round-half-to-even
    return round(u) if rounding is Rounding.NEAREST_EVEN else math.floor(u)


def scalar_narrow(values, bits, rounding=Rounding.NEAREST_EVEN):
    half = math.floor(2.0 ** (bits - 1))
    q_min, q_max = -half, half - 1
    peak = max(abs(v) for v in values)
    if peak == 0:
        return [0] * len(values), 1.0
    s = peak / max(q_max, 1)
    return [min(max(_round_scalar(v / s, rounding), q_min), q_max) for v in values], s


def scalar_wide(values, bits, rounding=Rounding.NEAREST_EVEN):
    L = math.floor(2.0 ** bits)
    lo, hi = min(values), max(values)
    if hi == lo:
        return [0] * len(values), 1.0, lo
    codes = [min(max(_round_scalar(L * (v - lo) / (hi - lo), rounding), 0), L - 1) for v in values]
    return codes, (hi - lo) / L, lo


class TestLevels:
    @pytest.mark.parametrize("bits, expected", [
        (6, (-32, 31, 64)),
        (5.5, (-22, 21, 44)),
        (5, (-16, 15, 32)),
        (1, (-1, 0, 2)),
        (4.5, (-11, 10, 22)),
        (8, (-128, 127, 256)),
    ])
    def test_examples(self, bits, expected):
        assert levels(bits) == expected

    @pytest.mark.parametrize("bits", [0.5, 0, 32.5, -3, float("nan")])
    def test_out_of_domain(self, bits):
        with pytest.raises(QuantizationError):
            levels(bits)

    def test_wide_levels(self):
        assert wide_levels(8) == 256
        assert wide_levels(4.25) == 19

    @given(st.floats(1, 32), st.floats(1, 32))
    def test_range_law(self, b1, b2):
        lo, hi = sorted((b1, b2))
        assert levels(lo)[2] <= levels(hi)[2]
        assert levels(lo)[2] == 2 * math.floor(2.0 ** (lo - 1))


class TestQuantSpec:
    def test_static_needs_scale(self):
        with pytest.raises(QuantizationError):
            QuantSpec(mode=Mode.STATIC)

    def test_dynamic_rejects_static_params(self):
        with pytest.raises(QuantizationError):
            QuantSpec(scale=1.0)

    def test_scale_positive(self):
        with pytest.raises(QuantizationError):
            QuantSpec(mode=Mode.STATIC, scale=0.0)

    def test_round_trip_dict(self):
        s = QuantSpec(bits=4.5, form=Form.WIDE, mode=Mode.STATIC, scale=0.25, offset=-1.0)
        assert QuantSpec.from_dict(s.to_dict()) == s


class TestQuantizeNarrow:
    def test_extremes(self):
        q = quantize_narrow([-3.0, 0.0, 3.0], narrow(4))
        assert q.codes.tolist() == [-7, 0, 7]
        assert q.scale == pytest.approx(3 / 7, rel=0, abs=1e-15)
        assert q.offset == 0

    def test_identity(self):
        q = quantize_narrow(np.eye(2), narrow(8))
        assert np.array_equal(q.codes, 127 * np.eye(2, dtype=np.int64))
        assert q.scale == 1 / 127
        assert np.array_equal(dequantize(q), np.eye(2))

    def test_all_zero(self):
        q = quantize_narrow(np.zeros((3, 2)), narrow(4))
        assert q.scale == 1.0
        assert not q.codes.any()

    @pytest.mark.parametrize("rounding", list(Rounding))
    def test_matches_scalar_oracle(self, rounding):
        w = np.random.default_rng(1234).standard_normal(64)
        q = quantize_narrow(w, narrow(4.5, rounding=rounding))
        codes, s = scalar_narrow(w.tolist(), 4.5, rounding)
        assert q.codes.tolist() == codes
        assert q.scale == s

    def test_rejects_wide_spec(self):
        with pytest.raises(QuantizationError):
            quantize_narrow([1.0], wide(8))

    def test_rejects_non_finite(self):
        with pytest.raises(QuantizationError):
            quantize_narrow([1.0, np.inf], narrow(8))

    def test_static_scale(self):
        q = quantize_narrow([0.5, 10.0, -10.0], narrow(4, mode=Mode.STATIC, scale=0.5))
        assert q.codes.tolist() == [1, 7, -8]

    def test_per_channel(self):
        w = np.array([[1.0, 100.0], [-2.0, 25.0]])
        q = quantize(w, narrow(8, axis=1))
        assert q.codes[:, 0].tolist() == [64, -127]
        assert q.codes[:, 1].tolist() == [127, 32]
        assert np.allclose(dequantize(q), w, atol=np.max(q.scale))


class TestQuantizeWide:
    def test_max_clamps(self):
        q = quantize_wide([0.0, 1.0], wide(8))
        assert q.codes.tolist() == [0, 255]
        assert q.scale == 1 / 256
        assert q.offset == 0.0

    def test_constant(self):
        q = quantize_wide([5.0, 5.0, 5.0], wide(4))
        assert q.codes.tolist() == [0, 0, 0]
        assert q.offset == 5.0 and q.scale == 1.0
        assert dequantize(q).tolist() == [5.0, 5.0, 5.0]

    def test_matches_scalar_oracle_and_bound(self):
        w = np.random.default_rng(7).uniform(-2, 3, 64)
        q = quantize_wide(w, wide(4.25))
        codes, s, lo = scalar_wide(w.tolist(), 4.25)
        assert q.codes.tolist() == codes
        assert q.scale == s and q.offset == lo
        assert np.all(np.abs(dequantize(q) - w) <= q.scale)

    def test_floor_matches_scalar_oracle(self):
        w = np.random.default_rng(8).uniform(-1, 1, 64)
        q = quantize_wide(w, wide(5.5, rounding=Rounding.FLOOR))
        assert q.codes.tolist() == scalar_wide(w.tolist(), 5.5, Rounding.FLOOR)[0]

    def test_static_clamps_outside(self):
        q = quantize_wide([-10.0, 0.0, 10.0], wide(8, mode=Mode.STATIC, scale=0.01, offset=-1.0))
        assert q.codes.tolist() == [0, 100, 255]


class TestDequantize:
    def test_narrow(self):
        q = QuantizedTensor(np.array([-7, 0, 7]), 3 / 7, 0.0, narrow(4))
        assert np.allclose(dequantize(q), [-3, 0, 3], rtol=0, atol=1e-15)

    def test_wide(self):
        q = QuantizedTensor(np.array([0, 0, 0]), 1.0, 5.0, wide(4))
        assert dequantize(q).tolist() == [5.0, 5.0, 5.0]

    def test_shape_preserved(self):
        w = np.random.default_rng(0).standard_normal((3, 4, 5))
        assert dequantize(quantize(w, narrow(6))).shape == (3, 4, 5)

    def test_round_trip_bound_random(self):
        rng = np.random.default_rng(42)
        # below 2 bits q_max is 0 and positive values clamp, so the half-bin bound needs b >= 2
        for i in range(1000):
            bits = rng.uniform(2, 32)
            w = rng.standard_normal(rng.integers(1, 40)) * rng.uniform(0.01, 100)
            q = quantize_narrow(w, narrow(bits))
            err = np.abs(dequantize(q) - w)
            assert np.all(err <= q.scale / 2 + 4 * np.spacing(np.max(np.abs(w)))), (i, bits)

    def test_sub_two_bits_keeps_codes_in_range(self):
        q = quantize_narrow([-1.0, 0.3, 1.0], narrow(1.5))
        assert q.codes.tolist() == [-1, 0, 0]


class TestFakeQuant:
    def test_full_width_near_identity(self):
        w = np.random.default_rng(3).standard_normal(200)
        out = fake_quant(w, narrow(32))
        assert np.all(np.abs(out - w) <= 2.0**-20 * np.max(np.abs(w)))

    def test_grid_fixed_point(self):
        w = 0.125 * np.arange(-7, 8, dtype=float)
        assert np.array_equal(fake_quant(w, narrow(4)), w)

    def test_mse_monotone_in_bits(self):
        grid = sorted(GRID, reverse=True)
        mse = np.zeros(len(grid))
        for seed in range(100):
            w = np.random.default_rng(seed).standard_normal(256)
            mse += [np.mean((fake_quant(w, narrow(b)) - w) ** 2) for b in grid]
        assert np.all(np.diff(mse) > 0)

    @settings(max_examples=300, deadline=None)
    @given(hnp.arrays(np.float64, st.integers(1, 30), elements=st.floats(-1e6, 1e6)),
           st.floats(1, 32))
    def test_idempotent_narrow(self, w, bits):
        once = fake_quant(w, narrow(bits))
        assert np.array_equal(fake_quant(once, narrow(bits)), once)

    @settings(max_examples=200, deadline=None)
    @given(hnp.arrays(np.float64, st.integers(1, 30), elements=st.floats(-100, 100)),
           st.floats(1, 16), st.sampled_from(list(Form)))
    def test_idempotent_static(self, w, bits, form):
        spec = QuantSpec(bits=bits, form=form, mode=Mode.STATIC, scale=0.37,
                         offset=-3.0 if form is Form.WIDE else 0.0)
        once = fake_quant(w, spec)
        assert np.array_equal(fake_quant(once, spec), once)


class TestContainment:
    @settings(max_examples=300, deadline=None)
    @given(hnp.arrays(np.float64, hnp.array_shapes(max_dims=3, max_side=6), elements=st.floats(-1e8, 1e8)),
           st.floats(1, 32), st.sampled_from(list(Form)), st.sampled_from(list(Rounding)))
    def test_codes_in_range(self, w, bits, form, rounding):
        spec = QuantSpec(bits=bits, form=form, rounding=rounding)
        q = quantize(w, spec)
        lo, hi = code_range(spec)
        assert q.codes.min(initial=lo) >= lo and q.codes.max(initial=hi) <= hi
        assert np.all(np.asarray(q.scale) > 0)
        assert dequantize(q).shape == w.shape


class TestFactorizedMatmul:
    def test_identity_operand(self):
        rng = np.random.default_rng(5)
        xq = quantize(np.eye(2), narrow(8))
        wq = quantize(rng.standard_normal((2, 3)), narrow(4))
        assert np.allclose(factorized_matmul(xq, wq), dequantize(wq), rtol=1e-15, atol=0)

    def test_scalar(self):
        xq = quantize([[2.0]], narrow(8))
        wq = quantize([[3.0]], narrow(8))
        out = factorized_matmul(xq, wq)
        assert abs(out[0, 0] - 6.0) <= 3.0 * xq.scale + 2.0 * wq.scale

    def test_random_vs_double_oracle(self):
        rng = np.random.default_rng(11)
        xq = quantize(rng.standard_normal((8, 16)), narrow(8))
        wq = quantize(rng.standard_normal((16, 4)), narrow(4))
        dx, dw = dequantize(xq), dequantize(wq)
        ref = dx @ dw
        out = factorized_matmul(xq, wq)
        assert np.max(np.abs(out - ref)) <= 2.0**-16 * np.linalg.norm(dx) * np.linalg.norm(dw)
        # codes as floats are exact here, so a float GEMM of the codes has the same sums
        matched = (xq.scale * wq.scale) * (xq.codes.astype(float) @ wq.codes.astype(float))
        assert np.array_equal(out, matched)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            factorized_matmul(quantize(np.ones((2, 3)), narrow(8)), quantize(np.ones((2, 3)), narrow(8)))

    def test_overflow_guard(self):
        xq = quantize(np.ones((1, 4)), narrow(32))
        wq = quantize(np.ones((4, 1)), narrow(32))
        with pytest.raises(OverflowError):
            factorized_matmul(xq, wq)

    def test_rejects_wide(self):
        with pytest.raises(QuantizationError):
            factorized_matmul(quantize(np.ones((1, 2)), wide(8)), quantize(np.ones((2, 1)), narrow(8)))


class TestCalibration:
    def test_constant(self):
        st_ = calibrate_static([np.full(10, 2.5), np.full(10, 2.5)])
        assert st_.mean == 2.5 and st_.std == 0.0
        assert st_.zero_std and st_.scale == 1.0
        assert st_.outlier_fraction == 0.0

    def test_hand_computed(self):
        st_ = calibrate_static([np.array([0.0, 0.0]), np.array([2.0, 2.0])], k_sigma=3)
        assert st_.mean == 1.0 and st_.std == 1.0
        assert (st_.inlier_lo, st_.inlier_hi) == (-2.0, 4.0)
        assert st_.offset == -2.0 and st_.scale == 6.0 / 256
        assert st_.sample_count == 2

    def test_gaussian_tail(self):
        rng = np.random.default_rng(0)
        st_ = calibrate_static([rng.standard_normal(1000) for _ in range(100)])
        assert abs(st_.outlier_fraction - 0.0027) <= 0.002

    def test_too_few_samples(self):
        with pytest.raises(CalibrationError):
            calibrate_static([np.ones(4)])

    def test_bad_k(self):
        with pytest.raises(CalibrationError):
            calibrate_static([np.ones(4), np.ones(4)], k_sigma=0)

    def test_static_spec(self):
        st_ = calibrate_static([np.array([0.0, 0.0]), np.array([2.0, 2.0])])
        spec = st_.static_spec()
        assert spec.mode is Mode.STATIC and spec.form is Form.WIDE
        assert spec.scale == st_.scale and spec.offset == -2.0
        assert st_.static_spec(16).scale == 6.0 / 65536
