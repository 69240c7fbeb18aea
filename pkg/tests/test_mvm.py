import math

import numpy as np
import pytest

from lowprec_gp.formats import FP16, FP32, FP64, quantize
from lowprec_gp.kernels import KernelSpec, assemble_kernel_matrix, kernel_rows, support_mask
from lowprec_gp.mvm import (
    BLOCK_SAME,
    BLOCK_WIDER,
    KAHAN,
    DenseOperator,
    KernelOperator,
    MvmPolicy,
    OverflowDetected,
    block_mvm,
    cross_mvm,
    dot_in_format,
    kahan_sum,
    naive_sum,
    truncated_predict_dot,
)


def test_policy_validation():
    with pytest.raises(ValueError):
        MvmPolicy(block_size=0)
    with pytest.raises(ValueError):
        MvmPolicy(accumulation="pairwise")
    with pytest.raises(ValueError):
        MvmPolicy(accumulation=BLOCK_WIDER)  # wide format required
    with pytest.raises(ValueError):
        MvmPolicy(compute_format=FP32, accumulation=BLOCK_WIDER,
                  wide_format=FP16)  # narrower than compute
    p = MvmPolicy(compute_format="fp16", accumulation=BLOCK_WIDER,
                  wide_format="fp32")
    assert p.wide_format is FP32


def test_pure_noise_operator_is_identity_times_noise():
    rng = np.random.default_rng(0)
    X = rng.standard_normal((40, 2))
    # a^2 ~ 0 kills the kernel sum exactly in fp16 (underflows to zero)
    spec = KernelSpec("rbf", lengthscales=1.0, outputscale_sq=1e-30,
                      noise_sq=1.0)
    v = rng.standard_normal(40)
    for fmt in (FP64, FP16):
        op = KernelOperator(spec, X, MvmPolicy(compute_format=fmt))
        got = block_mvm(op, v)
        want = np.asarray(quantize(v, fmt))
        assert np.array_equal(got, want)


def test_fp64_matches_dense_oracle():
    rng = np.random.default_rng(1)
    X = rng.uniform(-2, 2, (120, 3))
    spec = KernelSpec("matern32", lengthscales=(0.8, 1.0, 1.2), noise_sq=0.3,
                      outputscale_sq=1.5)
    K = assemble_kernel_matrix(spec, X, FP64, with_noise=True)
    v = rng.standard_normal(120)
    for block in (1, 7, 64, 120):
        op = KernelOperator(spec, X, MvmPolicy(block_size=block))
        got = block_mvm(op, v)
        ref = K @ v
        assert np.allclose(got, ref, rtol=1e-12, atol=1e-12)


def test_block_size_independence():
    # fp64: different blockings agree to the last few ulps (an exactly
    # bit-identical result is not achievable under honest per-op rounding);
    # fp32: within 1e-6 relative.
    rng = np.random.default_rng(2)
    X = rng.uniform(-2, 2, (150, 2))
    spec = KernelSpec("rbf", lengthscales=1.0, noise_sq=0.1)
    v = rng.standard_normal(150)
    outs64 = []
    outs32 = []
    for block in (1, 7, 64, 150):
        outs64.append(block_mvm(
            KernelOperator(spec, X, MvmPolicy(block_size=block)), v))
        outs32.append(block_mvm(
            KernelOperator(spec, X, MvmPolicy(block_size=block,
                                              compute_format=FP32)), v))
    scale = np.abs(outs64[0]).max()
    for o in outs64[1:]:
        assert np.max(np.abs(o - outs64[0])) <= 1e-13 * scale
    scale32 = np.abs(outs32[0]).max()
    for o in outs32[1:]:
        assert np.max(np.abs(o - outs32[0])) <= 1e-6 * scale32


def test_linearity_fp64():
    rng = np.random.default_rng(3)
    X = rng.standard_normal((60, 2))
    spec = KernelSpec("rq", lengthscales=1.0, noise_sq=0.2, alpha=1.5)
    op = KernelOperator(spec, X, MvmPolicy())
    v = rng.standard_normal(60)
    assert np.allclose(op.apply(2.0 * v), 2.0 * op.apply(v), rtol=1e-13)


def test_operator_symmetry():
    rng = np.random.default_rng(4)
    X = rng.standard_normal((80, 2))
    spec = KernelSpec("matern52", lengthscales=1.1, noise_sq=0.05)
    op = KernelOperator(spec, X, MvmPolicy())
    v = rng.standard_normal(80)
    w = rng.standard_normal(80)
    assert float(v @ op.apply(w)) == pytest.approx(float(w @ op.apply(v)),
                                                   rel=1e-12)


def test_policy_accuracy_ordering_fp16():
    # N=500 RBF: wider-format block accumulation beats same-format blocks;
    # mean relative error of the wider policy is below 1e-3.
    rng = np.random.default_rng(5)
    X = rng.standard_normal((500, 2))
    spec = KernelSpec("rbf", lengthscales=2.5, noise_sq=0.1)
    v = rng.standard_normal(500)
    K32 = assemble_kernel_matrix(spec, X, FP32, with_noise=True)
    ref = (K32.astype(np.float32) @ v.astype(np.float32)).astype(np.float64)
    denom = np.maximum(np.abs(ref), 1e-12)

    def err(policy):
        out = block_mvm(KernelOperator(spec, X, policy), v)
        return float(np.mean(np.abs(out - ref) / denom))

    e_wide = err(MvmPolicy(32, FP16, BLOCK_WIDER, FP32))
    e_same = err(MvmPolicy(32, FP16, BLOCK_SAME))
    e_kahan = err(MvmPolicy(32, FP16, KAHAN))
    assert e_wide < 1e-3
    assert e_same > e_wide
    assert e_kahan < 3 * e_wide


def test_overflow_detected_and_downscale_rescue():
    rng = np.random.default_rng(6)
    n = 600
    X = 0.01 * rng.standard_normal((n, 1))
    spec = KernelSpec("rbf", lengthscales=10.0, outputscale_sq=1.0,
                      noise_sq=0.1)
    v = np.full(n, 150.0)  # output ~ n * 150 >> 65504
    op = KernelOperator(spec, X, MvmPolicy(compute_format=FP16))
    with pytest.raises(OverflowDetected):
        op.apply(v)
    op_ds = KernelOperator(spec, X, MvmPolicy(compute_format=FP16,
                                              downscale=True))
    out = op_ds.apply(v)
    assert np.all(np.isfinite(out))


def test_downscale_bound():
    # with downscaling the output is bounded by sqrt(N) (a^2 + s^2) ||v||_inf
    rng = np.random.default_rng(7)
    n = 400
    X = 0.05 * rng.standard_normal((n, 1))
    spec = KernelSpec("rbf", lengthscales=25.0, outputscale_sq=1.0,
                      noise_sq=0.05)
    v = rng.uniform(-3, 3, n)
    op = KernelOperator(spec, X, MvmPolicy(compute_format=FP16,
                                           downscale=True))
    out = op.apply(v)
    bound = math.sqrt(n) * (spec.outputscale_sq + spec.noise_sq) * np.abs(v).max()
    assert np.abs(out).max() <= bound * 1.01


def test_downscale_fp64_equivalence():
    rng = np.random.default_rng(8)
    X = rng.standard_normal((100, 2))
    spec = KernelSpec("matern12", lengthscales=1.0, noise_sq=0.1)
    v = rng.standard_normal(100)
    plain = block_mvm(KernelOperator(spec, X, MvmPolicy()), v)
    ds_op = KernelOperator(spec, X, MvmPolicy(downscale=True))
    scaled = block_mvm(ds_op, v)
    assert np.allclose(scaled / ds_op.input_scale, plain, rtol=1e-12)


def test_dense_operator_matches_kernel_operator():
    rng = np.random.default_rng(9)
    X = rng.standard_normal((90, 2))
    spec = KernelSpec("rbf", lengthscales=1.0, noise_sq=0.2)
    pol = MvmPolicy(block_size=32, compute_format=FP16)
    K16 = assemble_kernel_matrix(spec, X, FP16, with_noise=True)
    dense = DenseOperator(K16, pol)
    v = rng.standard_normal(90)
    # same reduction path over identical entries minus the noise-add order:
    # compare against a noise-free operator plus explicit diagonal instead
    spec_nf = spec
    Knf = assemble_kernel_matrix(spec_nf, X, FP16, with_noise=False)
    op_out = block_mvm(KernelOperator(spec_nf, X, pol, include_noise=False), v)
    dn_out = DenseOperator(Knf, pol).apply(v)
    assert np.array_equal(op_out, dn_out)
    assert dense.apply(v).shape == (90,)


def test_kahan_sum_examples():
    assert kahan_sum([1.0], FP16) == 1.0
    vals = [1.0] + [1e-3] * 1000
    kah = kahan_sum(vals, FP16)
    nai = naive_sum(vals, FP16)
    # frozen oracle values: emulated-fp16 run gives exactly these
    assert kah == 2.0
    assert nai == 1.9765625
    assert abs(kah - 2.0) <= 2 * 2.0 ** -10
    assert nai < kah


def test_kahan_permutation_stability():
    rng = np.random.default_rng(10)
    x = rng.standard_normal(1000)
    base = kahan_sum(x, FP16)
    ulp = 2.0 ** -10 * max(1.0, abs(base))
    for s in range(10):
        p = np.random.default_rng(s).permutation(1000)
        assert abs(kahan_sum(x[p], FP16) - base) <= 4 * ulp


def test_dot_in_format_overflow_behavior():
    # fp16 sequential dot of large same-sign values overflows to inf
    v = np.full(3000, 10.0)
    assert math.isinf(dot_in_format(v, v, FP16))
    assert dot_in_format(v, v, FP32) == pytest.approx(3000 * 100.0, rel=1e-6)


def test_cross_mvm_rectangular():
    rng = np.random.default_rng(11)
    Xr = rng.standard_normal((20, 2))
    Xc = rng.standard_normal((50, 2))
    spec = KernelSpec("rbf", lengthscales=1.0, noise_sq=0.1)
    v = rng.standard_normal(50)
    got = cross_mvm(spec, Xr, Xc, v, MvmPolicy())
    Kx = kernel_rows(spec, Xr, Xc, FP64)
    assert np.allclose(got, Kx @ v, rtol=1e-12)


def _grid_instance():
    # 1-D grid spanning far beyond the fp16 support of matern12 at l=1
    X = np.linspace(0.0, 40.0, 900)[:, None]
    spec = KernelSpec("matern12", lengthscales=1.0, noise_sq=0.1)
    rng = np.random.default_rng(12)
    v = rng.standard_normal(900)
    return spec, X, v


@pytest.mark.parametrize("policy", [
    MvmPolicy(64, FP16, BLOCK_SAME),
    MvmPolicy(64, FP16, BLOCK_WIDER, FP32),
    MvmPolicy(64, FP16, KAHAN),
    MvmPolicy(17, FP16, BLOCK_SAME),
])
def test_truncated_dot_exact(policy):
    from lowprec_gp.mvm import _policy_row_dot

    spec, X, v = _grid_instance()
    x_star = X[0]
    mask = support_mask(spec, x_star, X, FP16)
    assert 0 < len(mask) < 0.6 * X.shape[0]
    mu_t = truncated_predict_dot(spec, x_star, X, v, FP16, policy)
    entries = kernel_rows(spec, x_star[None, :], X, FP16)[0]
    vq = np.asarray(quantize(v, FP16))
    mu_f = _policy_row_dot(entries, vq, np.ones(X.shape[0], bool), FP16,
                           policy)
    assert mu_t == mu_f  # bit-exact: dropped terms are exact zeros


def test_truncated_dot_matches_cross_mvm_row():
    spec, X, v = _grid_instance()
    policy = MvmPolicy(64, FP16, BLOCK_SAME)
    x_star = X[3]
    mu_t = truncated_predict_dot(spec, x_star, X, v, FP16, policy)
    row_out = cross_mvm(spec, x_star[None, :], X, np.asarray(quantize(v, FP16)),
                        policy)[0]
    assert mu_t == row_out


def test_truncated_dot_empty_mask():
    spec = KernelSpec("matern12", lengthscales=1.0, noise_sq=0.1)
    X = np.full((30, 1), 100.0)
    v = np.ones(30)
    got = truncated_predict_dot(spec, [0.0], X, v, FP16)
    assert got == 0.0
