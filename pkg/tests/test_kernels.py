import json
import math

import numpy as np
import pytest

from lowprec_gp.formats import FP16, FP32, FP64, FloatFormat, quantize
from lowprec_gp.kernels import (
    DimensionMismatch,
    KernelSpec,
    UnsupportedFamily,
    assemble_kernel_matrix,
    eval_kernel,
    kernel_rows,
    max_representable_distance,
    support_mask,
)

FP16_FTZ = FloatFormat("fp16-ftz", 5, 10, supports_subnormals=False)

ALL_FAMILIES = ["rbf", "matern12", "matern32", "matern52", "rq", "periodic"]


def test_spec_validation():
    with pytest.raises(ValueError):
        KernelSpec("rbf", lengthscales=-1.0)
    with pytest.raises(ValueError):
        KernelSpec("rbf", noise_sq=0.0)
    with pytest.raises(UnsupportedFamily):
        KernelSpec("cosine")
    s = KernelSpec("rbf", lengthscales=(1.0, 2.0), noise_sq=0.1)
    with pytest.raises(DimensionMismatch):
        s.lengthscale_array(3)


def test_spec_json_roundtrip():
    s = KernelSpec("rq", lengthscales=(0.5, 1.5), outputscale_sq=2.0,
                   noise_sq=0.05, alpha=3.0)
    s2 = KernelSpec.from_json(s.to_json())
    assert s2 == s
    d = json.loads(s.to_json())
    assert d["family"] == "rq" and d["lengthscales"] == [0.5, 1.5]


def test_eval_kernel_trivials():
    s = KernelSpec("rbf", lengthscales=1.0, outputscale_sq=1.0)
    assert eval_kernel(s, [0.3], [0.3], FP64) == 1.0
    m = KernelSpec("matern12", lengthscales=1.0)
    v = eval_kernel(m, [0.0], [0.75], FP64)
    assert v == pytest.approx(math.exp(-0.75), rel=1e-15)


def test_eval_kernel_fp16_exact_zero():
    # exp(-50) is far below the binary16 smallest subnormal
    s = KernelSpec("rbf", lengthscales=1.0)
    assert eval_kernel(s, [0.0], [10.0], FP16) == 0.0


def test_eval_kernel_double_oracle_all_families():
    rng = np.random.default_rng(3)
    x = rng.standard_normal(3)
    y = rng.standard_normal(3)
    ls = (0.8, 1.3, 0.6)
    d2 = sum(((a - b) / l) ** 2 for a, b, l in zip(x, y, ls))
    d = math.sqrt(d2)
    a2 = 1.7
    expected = {
        "rbf": a2 * math.exp(-0.5 * d2),
        "matern12": a2 * math.exp(-d),
        "matern32": a2 * (1 + math.sqrt(3) * d) * math.exp(-math.sqrt(3) * d),
        "matern52": a2 * (1 + math.sqrt(5) * d + 5 * d2 / 3)
        * math.exp(-math.sqrt(5) * d),
        "rq": a2 * (1 + d2 / (2 * 2.5)) ** -2.5,
        "periodic": a2 * math.exp(-(2 / 0.9) * math.sin(math.pi * d / 1.3) ** 2),
    }
    for fam, want in expected.items():
        s = KernelSpec(fam, lengthscales=ls, outputscale_sq=a2, alpha=2.5,
                       period=1.3, per_lengthscale=0.9)
        got = eval_kernel(s, x, y, FP64)
        assert got == pytest.approx(want, rel=1e-13), fam


@pytest.mark.parametrize("family", ALL_FAMILIES)
def test_eval_kernel_symmetric_every_format(family):
    rng = np.random.default_rng(11)
    s = KernelSpec(family, lengthscales=(0.7, 1.1), outputscale_sq=1.3,
                   alpha=2.0, period=2.0, per_lengthscale=1.0)
    for fmt in (FP64, FP32, FP16, "bf16"):
        for _ in range(10):
            x = rng.standard_normal(2)
            y = rng.standard_normal(2)
            assert eval_kernel(s, x, y, fmt) == eval_kernel(s, y, x, fmt)


def test_eval_fp16_close_to_quantized_fp64():
    # per-op emulation cannot equal quantize-at-the-end exactly: rounding the
    # distance to fp16 perturbs exp(-d^2/2) by about d^2 ulps, so the
    # elementwise-fidelity check scales its band accordingly.
    rng = np.random.default_rng(5)
    s = KernelSpec("rbf", lengthscales=1.0)
    for _ in range(300):
        x = rng.uniform(-1.5, 1.5, 1)
        y = rng.uniform(-1.5, 1.5, 1)
        v16 = eval_kernel(s, x, y, FP16)
        v64 = eval_kernel(s, x, y, FP64)
        ref = quantize(v64, FP16)
        if ref != 0:
            d2 = float((x[0] - y[0]) ** 2)
            band = 2.0 + d2
            assert abs(v16 - ref) <= band * 2.0 ** -11 * abs(ref)


def test_dimension_mismatch():
    s = KernelSpec("rbf", lengthscales=1.0)
    with pytest.raises(DimensionMismatch):
        eval_kernel(s, [0.0, 1.0], [0.0], FP64)


def test_max_distance_examples():
    r = max_representable_distance("matern12", 1.0, FP16)
    assert r.d_max == pytest.approx(-math.log(2.0 ** -14), rel=1e-12)
    assert r.d_max == pytest.approx(9.704, abs=5e-4)
    r = max_representable_distance("rbf", 1.0, FP16)
    assert r.d_max == pytest.approx(math.sqrt(-2 * math.log(2.0 ** -14)),
                                    rel=1e-12)
    assert r.d_max == pytest.approx(4.406, abs=1e-3)


def test_max_distance_format_ordering():
    for fam in ("matern12", "rbf", "rq"):
        d16 = max_representable_distance(fam, 1.0, FP16).d_max
        d32 = max_representable_distance(fam, 1.0, FP32).d_max
        d64 = max_representable_distance(fam, 1.0, FP64).d_max
        assert d64 > d32 > d16


def test_max_distance_monotone_in_epsilon():
    # non-increasing in the format's min positive normal
    d_norm = max_representable_distance("matern12", 1.0, FP16).d_max
    d_sub = max_representable_distance("matern12", 1.0, FP16,
                                       use_subnormal=True).d_max
    assert d_sub > d_norm


def test_max_distance_closed_forms_vs_bisection():
    # independent oracle: bisect the fp64 kernel value against epsilon
    for fam, kw in [("matern12", {}), ("rbf", {}), ("rq", {"alpha": 5.0})]:
        eps = FP16.min_positive_normal
        r = max_representable_distance(fam, 2.0, FP16, **kw)
        spec = KernelSpec(fam, lengthscales=2.0, **kw)

        def kval(d):
            return eval_kernel(spec, [0.0], [d], FP64)

        lo, hi = 1e-6, 1e9
        for _ in range(200):
            mid = 0.5 * (lo + hi)
            if kval(mid) < eps:
                hi = mid
            else:
                lo = mid
        assert r.d_max == pytest.approx(0.5 * (lo + hi), rel=1e-6)


def test_max_distance_periodic():
    # small per-lengthscale: kernel dips below eps within a period
    r = max_representable_distance("periodic", 1.0, FP16, period=2.0,
                                   per_lengthscale=0.05)
    arg = -math.log(FP16.min_positive_normal) * 0.05 / 2
    assert r.d_max == pytest.approx((2.0 / math.pi) * math.asin(math.sqrt(arg)))
    # large per-lengthscale: never representable as zero
    r2 = max_representable_distance("periodic", 1.0, FP16, period=2.0,
                                    per_lengthscale=10.0)
    assert math.isinf(r2.d_max)


def test_max_distance_unsupported():
    for fam in ("matern32", "matern52"):
        with pytest.raises(UnsupportedFamily):
            max_representable_distance(fam, 1.0, FP16)


def test_support_cutoff_ftz_format():
    # with flush-to-zero the closed-form radius is the genuine zero cutoff
    spec = KernelSpec("matern12", lengthscales=1.0)
    d_max = max_representable_distance("matern12", 1.0, FP16_FTZ).d_max
    X = np.linspace(0.0, 20.0, 801)[:, None]
    row = kernel_rows(spec, np.array([[0.0]]), X, FP16_FTZ)[0]
    dist = X[:, 0]
    inside = dist < 0.995 * d_max
    outside = dist > 1.005 * d_max
    assert np.all(row[inside] != 0.0)
    assert np.all(row[outside] == 0.0)
    mask = support_mask(spec, [0.0], X, FP16_FTZ)
    expect = np.nonzero(row != 0.0)[0]
    assert np.array_equal(mask, expect)


def test_support_nonzero_below_radius_ieee_fp16():
    spec = KernelSpec("rbf", lengthscales=1.0)
    d_max = max_representable_distance("rbf", 1.0, FP16).d_max
    X = np.linspace(0.0, 0.99 * d_max, 500)[:, None]
    row = kernel_rows(spec, np.array([[0.0]]), X, FP16)[0]
    assert np.all(row != 0.0)


def test_support_mask_full_in_fp64():
    rng = np.random.default_rng(0)
    spec = KernelSpec("rbf", lengthscales=1.0)
    X = rng.uniform(-2, 2, (50, 1))
    mask = support_mask(spec, [0.0], X, FP64)
    assert len(mask) == 50


def test_support_mask_half_grid():
    # 1-D grid on [-10, 10], x* at the left edge, lengthscale chosen so the
    # fp16 radius cuts roughly half the span
    d_zero = 17.3  # true fp16 zero cutoff for matern12 at l=1 (min_sub/2)
    l = 10.0 / d_zero
    spec = KernelSpec("matern12", lengthscales=l)
    X = np.linspace(-10, 10, 400)[:, None]
    mask = support_mask(spec, [-10.0], X, FP16)
    frac = len(mask) / 400
    assert 0.35 < frac < 0.65


def test_assemble_matrix_n1():
    spec = KernelSpec("rbf", lengthscales=1.0, outputscale_sq=1.0,
                      noise_sq=0.1)
    K = assemble_kernel_matrix(spec, np.zeros((1, 1)), FP64, with_noise=True)
    assert K.shape == (1, 1) and K[0, 0] == pytest.approx(1.1, rel=1e-15)


def test_assemble_matrix_spd_fp64():
    rng = np.random.default_rng(4)
    for fam in ("rbf", "matern32", "rq"):
        spec = KernelSpec(fam, lengthscales=0.9, noise_sq=1e-6)
        X = rng.uniform(-2, 2, (60, 2))
        K = assemble_kernel_matrix(spec, X, FP64, with_noise=True)
        assert np.array_equal(K, K.T)
        np.linalg.cholesky(K)  # SPD whenever noise_sq >= 1e-6
        lam_min = np.linalg.eigvalsh(K)[0]
        assert lam_min >= spec.noise_sq - 1e-8


def test_assemble_matrix_fp16_exact_zeros():
    spec = KernelSpec("rbf", lengthscales=1.0, noise_sq=0.1)
    X = np.linspace(-10, 10, 200)[:, None]
    K = assemble_kernel_matrix(spec, X, FP16, with_noise=False)
    assert np.sum(K == 0.0) > 0.2 * K.size


def test_assemble_matrix_fidelity_fp16():
    rng = np.random.default_rng(9)
    spec = KernelSpec("matern32", lengthscales=1.2, noise_sq=0.1)
    X = rng.uniform(-1, 1, (40, 1))
    K16 = assemble_kernel_matrix(spec, X, FP16, with_noise=False)
    K64 = assemble_kernel_matrix(spec, X, FP64, with_noise=False)
    ref = np.asarray(quantize(K64, FP16))
    ulps = np.abs(K16 - ref) / (2.0 ** -11 * np.maximum(np.abs(ref), 2**-14))
    assert ulps.max() <= 4.0
