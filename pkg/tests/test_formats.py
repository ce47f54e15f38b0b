import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from fpq.errors import QuantDomainError
from fpq.formats import (
    FpFormat,
    bias_from_clip_max,
    clip_max,
    decode,
    encode,
    fake_quantize,
    format_space,
    quantize_value,
    scale_from_bias,
    step_size,
    unit_grid,
)
from fpq.oracle import code_table, default_formats, nearest_grid, verify
from fpq.quantizer import QuantScheme, quantize_tensor_int

E1M2, E2M1, E2M2, E3M0, E4M3 = FpFormat(1, 2), FpFormat(2, 1), FpFormat(2, 2), FpFormat(3, 0), FpFormat(4, 3)

formats = st.sampled_from(default_formats())
biases = st.floats(-6, 10, allow_nan=False)


def q(x, fmt, bias=0.0):
    return quantize_value(x, QuantScheme(fmt, bias))


class TestFormat:
    def test_name_and_bits(self):
        assert E2M1.name == "E2M1"
        assert E4M3.bits == 8
        assert FpFormat.parse("e5m2") == FpFormat(5, 2)

    @pytest.mark.parametrize("text", ["E0M3", "M2", "E2M", "fp8", ""])
    def test_parse_rejects(self, text):
        with pytest.raises(QuantDomainError):
            FpFormat.parse(text)

    def test_needs_exponent_bit(self):
        with pytest.raises(QuantDomainError):
            FpFormat(0, 3)

    @pytest.mark.parametrize("bits,names", [
        (4, ["E1M2", "E2M1", "E3M0"]),
        (6, ["E1M4", "E2M3", "E3M2", "E4M1", "E5M0"]),
        (8, ["E1M6", "E2M5", "E3M4", "E4M3", "E5M2", "E6M1", "E7M0"]),
    ])
    def test_format_space(self, bits, names):
        assert [f.name for f in format_space(bits)] == names

    def test_format_space_domain(self):
        assert [f.name for f in format_space(3)] == ["E1M1", "E2M0"]
        with pytest.raises(QuantDomainError):
            format_space(2)


class TestClipMax:
    def test_examples(self):
        assert clip_max(E2M1, 1.0) == 6.0
        assert clip_max(E4M3, 7.0) == 480.0
        assert clip_max(E1M2, 0.0) == 3.5

    def test_inverse_examples(self):
        assert bias_from_clip_max(E2M1, 6.0) == pytest.approx(1.0, abs=4 * math.ulp(1.0))
        assert bias_from_clip_max(E4M3, 480.0) == pytest.approx(7.0, abs=4 * math.ulp(7.0))
        assert bias_from_clip_max(E2M1, 12.0) == pytest.approx(0.0, abs=4 * math.ulp(1.0))

    @pytest.mark.parametrize("qmax", [0.0, -1.0, math.inf, math.nan])
    def test_inverse_domain(self, qmax):
        with pytest.raises(QuantDomainError):
            bias_from_clip_max(E2M1, qmax)

    @given(formats, biases)
    def test_round_trip(self, fmt, bias):
        back = bias_from_clip_max(fmt, clip_max(fmt, bias))
        assert abs(back - bias) <= 4 * math.ulp(max(abs(bias), 2.0**fmt.exponent_bits))

    def test_integer_bias_shift_is_exact(self):
        assert scale_from_bias(3.25) == scale_from_bias(0.25) / 8
        assert clip_max(E2M1, -2.0) == 48.0


class TestUnitGrid:
    def test_examples(self):
        assert unit_grid(E2M1).tolist() == [0, 1, 2, 3, 4, 6, 8, 12]
        assert unit_grid(E1M2).tolist() == [0, 0.5, 1, 1.5, 2, 2.5, 3, 3.5]
        assert unit_grid(E3M0).tolist() == [0, 2, 4, 8, 16, 32, 64, 128]

    @pytest.mark.parametrize("fmt", default_formats(), ids=str)
    def test_sorted_and_max(self, fmt):
        g = unit_grid(fmt)
        assert np.all(np.diff(g) > 0)
        assert g[-1] == clip_max(fmt, 0.0)
        assert g.size == 2 ** (fmt.exponent_bits + fmt.mantissa_bits)

    @pytest.mark.parametrize("fmt", default_formats(), ids=str)
    def test_matches_code_table(self, fmt):
        values, _ = code_table(fmt)
        assert np.array_equal(values[values >= 0], unit_grid(fmt))

    def test_e1_is_uniform(self):
        for m in range(4):
            assert np.unique(np.diff(unit_grid(FpFormat(1, m)))).size == 1


class TestStepSize:
    def test_examples(self):
        assert step_size(5.0, E2M2, 0.0) == 1.0
        assert step_size(1.1, E2M2, 0.0) == 0.5
        assert step_size(0.0, E2M2, 3.7) == 0.5
        assert step_size(0.0, E3M0, -1.0) == 2.0


class TestQuantizeValue:
    def test_examples(self):
        assert q(2.4, E2M1) == 2.0
        assert q(-13.0, E2M1) == -12.0
        assert q(0.0, E2M1, 2.3) == 0.0
        assert q(2.5, E2M1) == 2.0
        assert q(3.6, E2M2) == 3.5
        assert q(3.9, E2M2) == 4.0  # rounds up across the binade boundary

    def test_ties_to_even_mantissa(self):
        assert q(3.5, E2M1) == 4.0  # 3 has mantissa 1, 4 has mantissa 0
        assert q(5.0, E2M1) == 4.0
        assert q(7.0, E2M1) == 8.0
        assert q(0.5, E2M1) == 0.0

    def test_m0_ties(self):
        # E3M0: 2 and 4 are both mantissa 0; 3 rounds to the even multiple of the step at 2.
        assert q(3.0, E3M0) == 4.0
        assert q(1.0, E3M0) == 0.0
        assert q(6.0, E3M0) == 8.0

    @pytest.mark.parametrize("x", [math.inf, -math.inf, math.nan])
    def test_non_finite(self, x):
        with pytest.raises(QuantDomainError):
            q(x, E2M1)
        with pytest.raises(QuantDomainError):
            fake_quantize(np.array([1.0, x]), E2M1, 0.0)

    def test_vector_bias_broadcasts(self):
        x = np.array([[13.0, 13.0]])
        assert fake_quantize(x, E2M1, np.array([[0.0, 1.0]])).tolist() == [[12.0, 6.0]]


class TestProperties:
    @given(formats, biases, st.floats(-1e6, 1e6))
    def test_matches_oracle(self, fmt, bias, x):
        assert fake_quantize(np.array([x]), fmt, bias)[0] == nearest_grid(np.array([x]), fmt, bias)[0]

    @given(formats, biases, st.floats(-1e6, 1e6))
    def test_symmetric(self, fmt, bias, x):
        assert q(-x, fmt, bias) == -q(x, fmt, bias)

    @given(formats, biases, st.floats(-1e6, 1e6), st.floats(-1e6, 1e6))
    def test_monotone(self, fmt, bias, x, y):
        lo, hi = min(x, y), max(x, y)
        assert q(lo, fmt, bias) <= q(hi, fmt, bias)

    @given(formats, biases, st.floats(-1e6, 1e6))
    def test_idempotent(self, fmt, bias, x):
        once = q(x, fmt, bias)
        assert q(once, fmt, bias) == once

    @given(formats, biases, st.floats(-1e6, 1e6))
    def test_on_scaled_grid(self, fmt, bias, x):
        grid = scale_from_bias(bias) * unit_grid(fmt)
        assert abs(q(x, fmt, bias)) in set(grid.tolist())

    @given(st.integers(0, 3), biases, st.lists(st.floats(-50, 50), min_size=1, max_size=40))
    def test_e1_matches_uniform_quantizer(self, m, bias, xs):
        fmt = FpFormat(1, m)
        x = np.array(xs)
        # E1Mm unit grid is 2**(1-m) * {0 .. 2**(m+1) - 1}: INT(m+2) with step 2**(1-m).
        alpha = scale_from_bias(bias) * 2.0 ** (1 - m)
        assert np.array_equal(fake_quantize(x, fmt, bias), quantize_tensor_int(x, m + 2, scale=alpha))


class TestCodes:
    @pytest.mark.parametrize("fmt", default_formats(), ids=str)
    def test_encode_decode_round_trip(self, fmt):
        values, _ = code_table(fmt)
        for bias in (0.0, 1.5, -2.25):
            grid = scale_from_bias(bias) * values
            codes = encode(grid, fmt, bias)
            assert codes.min() >= 0 and codes.max() < 2**fmt.bits
            back = decode(codes, fmt, bias)
            assert np.allclose(back, grid, rtol=4 * np.finfo(float).eps, atol=0)

    def test_e2m1_codes(self):
        assert encode(np.array([0.0, 1.0, 6.0, -12.0]), E2M1, 0.0).tolist() == [0b0000, 0b0001, 0b0101, 0b1111]


def test_verify_report_counts():
    report = verify([E2M1], [0.0, 1.3], 500, seed=1, quantize=fake_quantize)
    assert report.passed and len(report.rows) == 2

    def broken(x, fmt, bias):
        return np.floor(fake_quantize(x, fmt, bias))

    assert not verify([E1M2], [0.0], 500, seed=1, quantize=broken).passed
