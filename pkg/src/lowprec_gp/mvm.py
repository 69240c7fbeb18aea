"""Matrix-free block-partitioned kernel MVMs with selectable precision policy.

The operator never materializes the N x N kernel matrix: entries are
generated tile by tile in the compute format and reduced in a fixed order
(ascending block index, ascending in-block index), so quantized results are
reproducible run to run.  Accumulation across blocks follows the policy:
same-format, wider-format (cast back at the end), or Kahan compensation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import backend
from ._core_py import ACC_BLOCK_SAME, ACC_BLOCK_WIDER, ACC_KAHAN
from .formats import FP64, FloatFormat, get_format, quantize
from .kernels import KernelSpec, _as_points, kernel_rows, prepare_kernel

__all__ = [
    "MvmPolicy",
    "KernelOperator",
    "DenseOperator",
    "OverflowDetected",
    "block_mvm",
    "cross_mvm",
    "kahan_sum",
    "naive_sum",
    "dot_in_format",
    "truncated_predict_dot",
    "BLOCK_SAME",
    "BLOCK_WIDER",
    "KAHAN",
]

BLOCK_SAME = "block_same"
BLOCK_WIDER = "block_wider"
KAHAN = "kahan"

_ACC_CODES = {BLOCK_SAME: ACC_BLOCK_SAME, BLOCK_WIDER: ACC_BLOCK_WIDER,
              KAHAN: ACC_KAHAN}


class OverflowDetected(FloatingPointError):
    """An MVM produced a non-finite entry; enable downscaling and retry."""


@dataclass(frozen=True)
class MvmPolicy:
    """Block size, compute format and accumulation strategy for MVMs."""

    block_size: int = 64
    compute_format: FloatFormat = FP64
    accumulation: str = BLOCK_SAME
    wide_format: FloatFormat | None = None
    downscale: bool = False

    def __post_init__(self):
        object.__setattr__(self, "compute_format",
                           get_format(self.compute_format))
        if self.block_size < 1:
            raise ValueError("block_size must be >= 1")
        if self.accumulation not in _ACC_CODES:
            raise ValueError(f"unknown accumulation {self.accumulation!r}")
        wide = self.wide_format
        if self.accumulation == BLOCK_WIDER:
            if wide is None:
                raise ValueError("block_wider accumulation needs wide_format")
            wide = get_format(wide)
            if wide.mantissa_bits < self.compute_format.mantissa_bits:
                raise ValueError(
                    "wide_format must carry at least the compute format's "
                    "mantissa bits"
                )
            object.__setattr__(self, "wide_format", wide)
        else:
            object.__setattr__(self, "wide_format", None)

    @property
    def effective_wide_format(self) -> FloatFormat:
        return self.wide_format if self.wide_format else self.compute_format


def _as_columns(v):
    v = np.asarray(v, dtype=np.float64)
    if v.ndim == 1:
        return v[:, None], True
    if v.ndim == 2:
        return v, False
    raise ValueError("expected a vector or a matrix of column vectors")


class KernelOperator:
    """Matrix-free K~ = a^2 K + sigma^2 I over a fixed dataset.

    Deterministic: identical inputs produce bit-identical outputs.  When the
    policy requests downscaling, ``apply`` computes K~(v * s) with
    s = quantize(N^{-1/2}); the factor actually applied is exposed as
    ``input_scale`` so drivers can compensate exactly in double precision.
    """

    def __init__(self, spec: KernelSpec, X, policy: MvmPolicy,
                 include_noise: bool = True):
        self.spec = spec
        self.X = _as_points(X)
        self.policy = policy
        self.include_noise = include_noise
        self._prep = prepare_kernel(spec, self.X.shape[1],
                                    policy.compute_format)
        if policy.downscale:
            self.input_scale = quantize(1.0 / math.sqrt(self.X.shape[0]),
                                        policy.compute_format)
        else:
            self.input_scale = 1.0

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def shape(self):
        return (self.n, self.n)

    @property
    def compute_format(self) -> FloatFormat:
        return self.policy.compute_format

    def _run(self, v, deriv_dim: int, with_noise: bool):
        V, single = _as_columns(v)
        if V.shape[0] != self.n:
            raise ValueError(f"vector length {V.shape[0]} != {self.n} points")
        fmt = self.policy.compute_format
        V = np.asarray(quantize(V, fmt))
        if self.input_scale != 1.0:
            V = np.asarray(quantize(V * self.input_scale, fmt))
        p = self._prep
        out = backend.mvm_kernel(
            self.X, self.X, V, family=p.family_code, ls_q=p.ls_q, a2_q=p.a2_q,
            alpha=p.alpha, consts=p.consts,
            noise_q=p.noise_q if with_noise else 0.0,
            deriv_dim=deriv_dim, fmt=fmt,
            acc_mode=_ACC_CODES[self.policy.accumulation],
            wide_fmt=self.policy.effective_wide_format,
            block_size=self.policy.block_size,
        )
        if not np.isfinite(out).all():
            raise OverflowDetected(
                "non-finite MVM output; enable the N^{-1/2} downscale policy"
            )
        return out[:, 0] if single else out

    def apply(self, v):
        """K~ v (or K~(v/sqrt(N)) when the policy downscales)."""
        return self._run(v, -1, self.include_noise)

    def apply_noise_free(self, v):
        """a^2 K v without the diagonal noise term."""
        return self._run(v, -1, False)

    def apply_lengthscale_deriv(self, v, dim: int | None):
        """(d K / d log l_dim) v; dim=None differentiates a shared lengthscale."""
        return self._run(v, -2 if dim is None else int(dim), False)


class DenseOperator:
    """Emulated blocked product with an explicit matrix (tests, small solves)."""

    def __init__(self, M, policy: MvmPolicy):
        self.M = np.ascontiguousarray(M, dtype=np.float64)
        if self.M.ndim != 2 or self.M.shape[0] != self.M.shape[1]:
            raise ValueError("DenseOperator expects a square matrix")
        self.policy = policy
        if policy.downscale:
            self.input_scale = quantize(1.0 / math.sqrt(self.M.shape[0]),
                                        policy.compute_format)
        else:
            self.input_scale = 1.0

    @property
    def n(self) -> int:
        return self.M.shape[0]

    @property
    def shape(self):
        return self.M.shape

    @property
    def compute_format(self) -> FloatFormat:
        return self.policy.compute_format

    def apply(self, v):
        V, single = _as_columns(v)
        fmt = self.policy.compute_format
        V = np.asarray(quantize(V, fmt))
        if self.input_scale != 1.0:
            V = np.asarray(quantize(V * self.input_scale, fmt))
        out = backend.mvm_dense(
            self.M, V, fmt=fmt, acc_mode=_ACC_CODES[self.policy.accumulation],
            wide_fmt=self.policy.effective_wide_format,
            block_size=self.policy.block_size,
        )
        if not np.isfinite(out).all():
            raise OverflowDetected("non-finite MVM output")
        return out[:, 0] if single else out


def block_mvm(op: KernelOperator, v):
    """K~ v through the operator's policy (matrix-free)."""
    return op.apply(v)


def cross_mvm(spec: KernelSpec, X_rows, X_cols, v, policy: MvmPolicy):
    """Rectangular kernel product K(X_rows, X_cols) v, no noise term.

    With a downscaling policy the caller owns the compensating 1/scale.
    """
    Xr = _as_points(X_rows)
    Xc = _as_points(X_cols)
    V, single = _as_columns(v)
    fmt = policy.compute_format
    V = np.asarray(quantize(V, fmt))
    if policy.downscale:
        scale = quantize(1.0 / math.sqrt(Xc.shape[0]), fmt)
        V = np.asarray(quantize(V * scale, fmt))
    p = prepare_kernel(spec, Xr.shape[1], fmt)
    out = backend.mvm_kernel(
        Xr, Xc, V, family=p.family_code, ls_q=p.ls_q, a2_q=p.a2_q,
        alpha=p.alpha, consts=p.consts, noise_q=0.0, deriv_dim=-1, fmt=fmt,
        acc_mode=_ACC_CODES[policy.accumulation],
        wide_fmt=policy.effective_wide_format, block_size=policy.block_size,
    )
    if not np.isfinite(out).all():
        raise OverflowDetected("non-finite MVM output")
    return out[:, 0] if single else out


def kahan_sum(values, fmt) -> float:
    """Compensated sum with every operation rounded into fmt."""
    return backend.kahan_sum(np.asarray(values, np.float64), get_format(fmt))


def naive_sum(values, fmt) -> float:
    """Plain left-to-right sum in fmt (the Kahan baseline)."""
    return backend.sum_seq(np.asarray(values, np.float64), get_format(fmt))


def dot_in_format(a, b, fmt) -> float:
    """Flat sequential dot product with every operation rounded into fmt."""
    return backend.dot_seq(np.asarray(a, np.float64),
                           np.asarray(b, np.float64), get_format(fmt))


def _policy_row_dot(entries, v, include, fmt, policy: MvmPolicy) -> float:
    """Row dot product replaying the blocked reduction order scalar-wise.

    Excluded positions contribute an exact-zero term: block accumulations
    skip them outright; Kahan performs the zero-term compensation fold (same
    state the full sum reaches) without any kernel evaluation.
    """
    q = lambda x: quantize(x, fmt)
    wide = policy.effective_wide_format
    qw = lambda x: quantize(x, wide)
    n = len(entries)
    acc = 0.0
    comp = 0.0
    for b0 in range(0, n, policy.block_size):
        b1 = min(b0 + policy.block_size, n)
        if policy.accumulation == KAHAN:
            for j in range(b0, b1):
                term = q(entries[j] * v[j]) if include[j] else 0.0
                y = q(term - comp)
                t = q(acc + y)
                comp = q(q(t - acc) - y)
                acc = t
        else:
            part = 0.0
            for j in range(b0, b1):
                if include[j]:
                    part = q(part + q(entries[j] * v[j]))
            if policy.accumulation == BLOCK_SAME:
                acc = q(acc + part)
            else:
                acc = qw(acc + part)
    if policy.accumulation == BLOCK_WIDER:
        acc = q(acc)
    return acc


def truncated_predict_dot(spec: KernelSpec, x_star, X, v, fmt,
                          policy: MvmPolicy | None = None) -> float:
    """Predictive-mean dot over the finite-support neighbours of x_star.

    Terms whose kernel value quantizes to exact zero are dropped; because
    they contribute exactly zero, the result equals the full dot product
    bit for bit while only |support| kernel values are needed.
    """
    fmt = get_format(fmt)
    if policy is None:
        policy = MvmPolicy(compute_format=fmt)
    X = _as_points(X)
    x_star = np.atleast_1d(np.asarray(x_star, np.float64))
    v = np.asarray(v, np.float64).ravel()
    if v.size != X.shape[0]:
        raise ValueError("cache vector length must match the dataset")
    entries = kernel_rows(spec, x_star[None, :], X, fmt)[0]
    vq = np.asarray(quantize(v, fmt))
    include = entries != 0.0
    return _policy_row_dot(entries, vq, include, fmt, policy)
