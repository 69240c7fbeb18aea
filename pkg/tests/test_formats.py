import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lowprec_gp.formats import (
    BF16,
    FP16,
    FP32,
    FP64,
    FloatFormat,
    SignedLogValue,
    format_constants,
    get_format,
    lse_dot,
    quantize,
)

FP16_FTZ = FloatFormat("fp16-ftz", 5, 10, supports_subnormals=False)


def test_binary32_constants():
    c = format_constants(FP32)
    assert c["max_finite"] == pytest.approx(3.4028235e38, rel=1e-7)
    assert c["min_positive_normal"] == pytest.approx(1.1754943508e-38, rel=1e-9)
    assert c["unit_roundoff"] == 2.0 ** -24


def test_binary16_constants():
    c = format_constants("fp16")
    assert c["min_positive_normal"] == 2.0 ** -14
    assert c["min_positive_normal"] == pytest.approx(6.1035e-5, rel=1e-4)
    # 65504 = (2 - 2^-10) * 2^15, from the 5/10-bit widths
    assert c["max_finite"] == 65504.0


def test_bfloat16_constants():
    assert BF16.exponent_bits == 8 and BF16.mantissa_bits == 7
    # range matches single precision's binade, reduced mantissa
    assert BF16.min_positive_normal == FP32.min_positive_normal
    assert BF16.unit_roundoff == 2.0 ** -8


def test_fp64_constants_match_ieee_double():
    assert FP64.max_finite == np.finfo(np.float64).max
    assert FP64.min_positive_normal == np.finfo(np.float64).tiny


def test_format_name_lookup():
    assert get_format("FP16") is FP16
    assert get_format(FP64) is FP64
    with pytest.raises(ValueError):
        get_format("fp8")


def test_invalid_widths_rejected():
    with pytest.raises(ValueError):
        FloatFormat("bad", exponent_bits=1, mantissa_bits=4)
    with pytest.raises(ValueError):
        FloatFormat("bad", exponent_bits=5, mantissa_bits=0)


def test_quantize_examples():
    assert quantize(1.0, FP16) == 1.0
    assert quantize(70000.0, FP16) == math.inf  # 70000 > 65504
    # nearest binary16 subnormal to 6e-8 is 2^-24
    assert quantize(6.0e-8, FP16) == 2.0 ** -24


def test_quantize_overflow_boundary():
    # midpoint (2 - 2^-11) * 2^15 = 65520 ties to the even 2^16 -> inf
    assert quantize(65519.999, FP16) == 65504.0
    assert quantize(65520.0, FP16) == math.inf
    assert quantize(-65520.0, FP16) == -math.inf


def test_quantize_flush_to_zero_variant():
    assert quantize(1e-6, FP16_FTZ) == 0.0
    assert quantize(1e-6, FP16) != 0.0
    assert quantize(2.0 ** -14, FP16_FTZ) == 2.0 ** -14


def test_quantize_special_values():
    assert math.isinf(quantize(math.inf, FP16))
    assert math.isnan(quantize(math.nan, FP16))
    assert quantize(0.0, FP16) == 0.0


@given(st.floats(allow_nan=False, allow_infinity=False, width=64))
@settings(max_examples=300)
def test_quantize_fp16_matches_numpy_half(x):
    with np.errstate(over="ignore"):
        ref = float(np.float64(x).astype(np.float16))
    q = quantize(x, FP16)
    assert q == ref or (math.isnan(q) and math.isnan(ref))


@given(st.floats(allow_nan=False, allow_infinity=False, width=64))
@settings(max_examples=300)
def test_quantize_fp32_matches_numpy_single(x):
    with np.errstate(over="ignore"):
        ref = float(np.float64(x).astype(np.float32))
    assert quantize(x, FP32) == ref


@given(st.floats(allow_nan=False, allow_infinity=False, width=64))
@settings(max_examples=300)
def test_quantize_idempotent(x):
    for fmt in (FP16, BF16, FP32, FP16_FTZ):
        once = quantize(x, fmt)
        assert quantize(once, fmt) == once


@given(
    st.floats(allow_nan=False, allow_infinity=False, width=64),
    st.floats(allow_nan=False, allow_infinity=False, width=64),
)
@settings(max_examples=300)
def test_quantize_monotone(a, b):
    if a > b:
        a, b = b, a
    for fmt in (FP16, BF16):
        assert quantize(a, fmt) <= quantize(b, fmt)


def test_quantize_identity_on_doubles():
    rng = np.random.default_rng(0)
    x = rng.standard_normal(1000) * np.exp(rng.uniform(-300, 300, 1000))
    assert np.array_equal(quantize(x, FP64), x)


def test_quantize_relative_error_bound():
    rng = np.random.default_rng(1)
    for fmt in (FP16, BF16, FP32):
        # magnitudes drawn inside the format's normal range
        lo = math.log(fmt.min_positive_normal * 2)
        hi = math.log(fmt.max_finite / 2)
        mag = np.exp(rng.uniform(lo, hi, 5000))
        x = np.where(rng.random(5000) < 0.5, mag, -mag)
        q = np.asarray(quantize(x, fmt))
        assert np.all(np.abs(q - x) <= fmt.unit_roundoff * np.abs(x))


def test_quantize_bf16_is_float32_truncation_rounding():
    # bf16 values are exactly float32 values whose low 16 mantissa bits are 0
    rng = np.random.default_rng(2)
    x = rng.standard_normal(2000)
    q = np.asarray(quantize(x, BF16))
    bits = q.astype(np.float32).view(np.uint32)
    assert np.all(bits & 0xFFFF == 0)


def test_signed_log_value():
    z = SignedLogValue.zero()
    assert z.sign == 0 and z.value() == 0.0
    v = SignedLogValue(math.log(2.5), -1)
    assert v.value() == pytest.approx(-2.5)
    with pytest.raises(ValueError):
        SignedLogValue(1.0, 2)
    with pytest.raises(ValueError):
        SignedLogValue(1.0, 0)


def test_lse_dot_examples():
    r = lse_dot([1.0, 1.0, 1.0], [1.0, 1.0, 1.0])
    assert r.sign == 1
    assert r.log_magnitude == pytest.approx(math.log(3.0), abs=1e-15)
    assert lse_dot([1.0, -1.0], [1.0, 1.0]).sign == 0
    tiny = lse_dot([1e-30, 2e-30], [1e-30, 1e-30])
    assert tiny.sign == 1
    assert tiny.log_magnitude == pytest.approx(math.log(3e-60), rel=1e-12)


def test_lse_dot_all_zero_terms():
    r = lse_dot([0.0, 0.0], [1.0, 2.0])
    assert r.sign == 0
    assert r.log_magnitude == -math.inf


def test_lse_dot_validation():
    with pytest.raises(ValueError):
        lse_dot([1.0, 2.0], [1.0])
    with pytest.raises(ValueError):
        lse_dot([], [])
    with pytest.raises(ValueError):
        lse_dot([np.inf], [1.0])


@given(st.integers(min_value=1, max_value=64), st.integers(0, 2**32 - 1))
@settings(max_examples=120)
def test_lse_dot_matches_double_oracle(n, seed):
    rng = np.random.default_rng(seed)
    w = rng.standard_normal(n)
    z = rng.standard_normal(n)
    got = lse_dot(w, z)
    ref = float(np.dot(w, z))
    if got.sign == 0:
        assert abs(ref) <= 1e-10 * max(1.0, np.abs(w * z).sum())
    else:
        val = got.sign * math.exp(got.log_magnitude)
        assert val == pytest.approx(ref, rel=1e-10, abs=1e-12)


@given(st.integers(min_value=2, max_value=40), st.integers(0, 2**32 - 1))
@settings(max_examples=80)
def test_lse_dot_permutation_invariant(n, seed):
    rng = np.random.default_rng(seed)
    w = rng.standard_normal(n)
    z = rng.standard_normal(n)
    p = rng.permutation(n)
    a = lse_dot(w, z)
    b = lse_dot(w[p], z[p])
    assert a.sign == b.sign
    if a.sign != 0:
        assert a.log_magnitude == pytest.approx(b.log_magnitude, rel=1e-13,
                                                abs=1e-13)
