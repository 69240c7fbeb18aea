"""Pure-NumPy backend for the emulated low-precision hot loops.

This module is the normative definition of the arithmetic: the compiled
extension (``lowprec_gp._core``) implements exactly the same sequence of
correctly rounded elementary operations and must agree with it.

Emulation contract
------------------
* Every elementary arithmetic result (+, -, *, /, sqrt) is computed exactly
  (or correctly rounded) in double and immediately rounded once into the
  compute format.  For the four named formats this equals the format's own
  correctly rounded arithmetic.
* Transcendentals (exp, sin, pow) are evaluated in double on the quantized
  argument, then rounded once into the compute format.
* Kernel entry sequence per pair (x, x'), per dimension t:
      diff = q(x[t] - x'[t]);  s = q(diff / l_t);  u_t = q(s * s);
      d2 = q(d2 + u_t)
  followed by the family evaluation (see ``_family_tile``) and finally
  k = q(a2 * base).  Input coordinates are plain doubles; quantization
  starts with the first arithmetic result.
* Matrix-vector reduction order is fixed: ascending block index, ascending
  in-block index, per output row.  Within a block the partial dot product
  accumulates in the compute format; block partials combine according to the
  accumulation mode (0 = same format, 1 = wider format then cast back,
  2 = Kahan compensation in the compute format over the flat term stream).
  The noise term q(noise * v_i) is added last in the compute format.
"""

from __future__ import annotations

import math

import numpy as np

from .formats import FP16, FP32, FP64, FloatFormat, _quantize_array

# Kernel family codes shared with the compiled backend.
FAMILY_CODES = {
    "rbf": 0,
    "matern12": 1,
    "matern32": 2,
    "matern52": 3,
    "rq": 4,
    "periodic": 5,
}

# Accumulation mode codes.
ACC_BLOCK_SAME = 0
ACC_BLOCK_WIDER = 1
ACC_KAHAN = 2

_ROW_CHUNK = 256


def _q_fn(fmt: FloatFormat):
    """Vectorized round-into-format function (float64 -> float64)."""
    if fmt.is_double:
        return lambda a: a
    if fmt == FP32:
        def q32(a):
            with np.errstate(over="ignore"):
                return np.asarray(a, np.float64).astype(np.float32).astype(np.float64)
        return q32
    if fmt == FP16:
        def q16(a):
            with np.errstate(over="ignore"):
                return np.asarray(a, np.float64).astype(np.float16).astype(np.float64)
        return q16
    return lambda a: _quantize_array(np.asarray(a, np.float64), fmt)


def _q_scalar(fmt: FloatFormat):
    qf = _q_fn(fmt)
    if fmt.is_double:
        return lambda x: x
    return lambda x: float(qf(np.float64(x)))


def _family_tile(q, family, d2, u_sel, a2_q, alpha, consts, deriv):
    """Family evaluation on a tile of squared scaled distances.

    ``consts`` are format-quantized constants prepared by the caller:
      rbf:       (unused)
      matern32:  c0 = q(sqrt(3))
      matern52:  c0 = q(sqrt(5)), c1 = q(5/3)
      rq:        c0 = q(2*alpha)
      periodic:  c0 = q(pi / period), c1 = q(2 / per_lengthscale),
                 c2 = q(2*pi / period), c3 = q(2*pi / (per_lengthscale*period))
    """
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        if family == 0:  # rbf: a2 * exp(-d2/2)
            arg = q(-0.5 * d2)
            e = q(np.exp(arg))
            k = q(a2_q * e)
            if deriv:
                return q(k * u_sel)
            return k
        if family == 1:  # matern12: a2 * exp(-d)
            d = q(np.sqrt(d2))
            e = q(np.exp(-d))
            k = q(a2_q * e)
            if deriv:
                r = np.where(d > 0, q(u_sel / np.where(d > 0, d, 1.0)), 0.0)
                return q(k * r)
            return k
        if family == 2:  # matern32: a2 * (1 + c0 d) exp(-c0 d)
            d = q(np.sqrt(d2))
            t1 = q(consts[0] * d)
            e = q(np.exp(-t1))
            if deriv:
                t4 = q(3.0 * u_sel)
                t5 = q(t4 * e)
                return q(a2_q * t5)
            p = q(1.0 + t1)
            pe = q(p * e)
            return q(a2_q * pe)
        if family == 3:  # matern52: a2 * (1 + c0 d + (c0 d)^2/3) exp(-c0 d)
            d = q(np.sqrt(d2))
            t1 = q(consts[0] * d)
            e = q(np.exp(-t1))
            p1 = q(1.0 + t1)
            if deriv:
                t4 = q(consts[1] * u_sel)
                t5 = q(t4 * p1)
                t6 = q(t5 * e)
                return q(a2_q * t6)
            t2 = q(t1 * t1)
            t3 = q(t2 / 3.0)
            p = q(p1 + t3)
            pe = q(p * e)
            return q(a2_q * pe)
        if family == 4:  # rq: a2 * (1 + d2/(2 alpha))^(-alpha)
            t = q(d2 / consts[0])
            b = q(1.0 + t)
            if deriv:
                pm = q(np.power(b, -alpha - 1.0))
                t4 = q(pm * u_sel)
                return q(a2_q * t4)
            p = q(np.power(b, -alpha))
            return q(a2_q * p)
        if family == 5:  # periodic: a2 * exp(-(2/lam) sin^2(pi d / p))
            d = q(np.sqrt(d2))
            u = q(consts[0] * d)
            s = q(np.sin(u))
            s2 = q(s * s)
            w = q(s2 * consts[1])
            e = q(np.exp(-w))
            k = q(a2_q * e)
            if deriv:
                v = q(consts[2] * d)
                sv = q(np.sin(v))
                r = np.where(d > 0, q(u_sel / np.where(d > 0, d, 1.0)), 0.0)
                t4 = q(sv * r)
                t5 = q(t4 * consts[3])
                return q(k * t5)
            return k
    raise ValueError(f"unknown family code {family}")


def kernel_tile(Xr, Xc, family, ls_q, a2_q, alpha, consts, deriv_dim, fmt):
    """Quantized kernel (or lengthscale-derivative) entries for Xr x Xc.

    deriv_dim: -1 plain kernel, t >= 0 for d/d log(l_t), -2 for the shared
    single-lengthscale derivative (the per-dimension terms summed).
    """
    q = _q_fn(fmt)
    Xr = np.asarray(Xr, np.float64)
    Xc = np.asarray(Xc, np.float64)
    R, D = Xr.shape
    d2 = np.zeros((R, Xc.shape[0]))
    u_sel = None
    for t in range(D):
        diff = q(Xr[:, t][:, None] - Xc[:, t][None, :])
        s = q(diff / ls_q[t])
        u = q(s * s)
        d2 = q(d2 + u)
        if deriv_dim == t:
            u_sel = u
    if deriv_dim == -2:
        u_sel = d2
    return _family_tile(q, family, d2, u_sel, a2_q, alpha, consts, deriv_dim != -1)


def _accumulate_tiles(tile_of, N, V, fmt, acc_mode, wide_fmt, block_size, noise_q, rows):
    """Shared reduction loop: rows x N tiles against V, fixed order."""
    q = _q_fn(fmt)
    qw = _q_fn(wide_fmt)
    C = V.shape[1]
    R = len(rows)
    acc = np.zeros((R, C))
    comp = np.zeros((R, C))  # Kahan compensation
    with np.errstate(over="ignore", invalid="ignore"):
        for b0 in range(0, N, block_size):
            b1 = min(b0 + block_size, N)
            tile = tile_of(b0, b1)  # (R, b1-b0) quantized entries
            if acc_mode == ACC_KAHAN:
                for j in range(b1 - b0):
                    term = q(tile[:, j][:, None] * V[b0 + j][None, :])
                    y = q(term - comp)
                    t = q(acc + y)
                    comp = q(q(t - acc) - y)
                    acc = t
            else:
                part = np.zeros((R, C))
                for j in range(b1 - b0):
                    term = q(tile[:, j][:, None] * V[b0 + j][None, :])
                    part = q(part + term)
                if acc_mode == ACC_BLOCK_SAME:
                    acc = q(acc + part)
                else:
                    acc = qw(acc + part)
        if acc_mode == ACC_BLOCK_WIDER:
            acc = q(acc)
        if noise_q != 0.0:
            acc = q(acc + q(noise_q * V[rows]))
    return acc


def mvm_kernel(Xr, Xc, V, family, ls_q, a2_q, alpha, consts, noise_q,
               deriv_dim, fmt, acc_mode, wide_fmt, block_size):
    """Blocked matrix-free product (kernel matrix restricted to Xr x Xc) @ V.

    V must already hold compute-format values (pre-quantized, pre-scaled).
    Returns float64 entries of the compute format; no finiteness check here.
    """
    Xr = np.asarray(Xr, np.float64)
    Xc = np.asarray(Xc, np.float64)
    V = np.asarray(V, np.float64)
    T, N = Xr.shape[0], Xc.shape[0]
    out = np.empty((T, V.shape[1]))
    for r0 in range(0, T, _ROW_CHUNK):
        r1 = min(r0 + _ROW_CHUNK, T)
        rows = np.arange(r0, r1)

        def tile_of(b0, b1, _r0=r0, _r1=r1):
            return kernel_tile(Xr[_r0:_r1], Xc[b0:b1], family, ls_q, a2_q,
                               alpha, consts, deriv_dim, fmt)

        out[r0:r1] = _accumulate_tiles(tile_of, N, V, fmt, acc_mode, wide_fmt,
                                       block_size, noise_q, rows)
    return out


def mvm_dense(M, V, fmt, acc_mode, wide_fmt, block_size):
    """Blocked emulated product of a dense matrix (quantized tile-wise) with V."""
    M = np.asarray(M, np.float64)
    V = np.asarray(V, np.float64)
    q = _q_fn(fmt)
    T, N = M.shape
    out = np.empty((T, V.shape[1]))
    for r0 in range(0, T, _ROW_CHUNK):
        r1 = min(r0 + _ROW_CHUNK, T)
        rows = np.arange(r0, r1)

        def tile_of(b0, b1, _r0=r0, _r1=r1):
            return q(M[_r0:_r1, b0:b1])

        out[r0:r1] = _accumulate_tiles(tile_of, N, V, fmt, acc_mode, wide_fmt,
                                       block_size, 0.0, rows)
    return out


def _np_dtype(fmt: FloatFormat):
    if fmt.is_double:
        return np.float64
    if fmt == FP32:
        return np.float32
    if fmt == FP16:
        return np.float16
    return None


def dot_seq(a, b, fmt):
    """Flat left-to-right dot product, every operation rounded into fmt."""
    a = np.asarray(a, np.float64)
    b = np.asarray(b, np.float64)
    q = _q_fn(fmt)
    with np.errstate(over="ignore", invalid="ignore"):
        p = q(a * b)
        dt = _np_dtype(fmt)
        if dt is not None:
            # ufunc.accumulate is sequential with per-step rounding to dtype.
            return float(np.add.accumulate(p.astype(dt))[-1])
        qs = _q_scalar(fmt)
        acc = 0.0
        for x in p:
            acc = qs(acc + x)
        return acc


def sum_seq(a, fmt):
    """Naive left-to-right sum in fmt."""
    return dot_seq(a, np.ones_like(np.asarray(a, np.float64)), fmt)


def kahan_sum(a, fmt):
    """Compensated summation with all operations rounded into fmt."""
    a = np.asarray(a, np.float64)
    qs = _q_scalar(fmt)
    acc = 0.0
    comp = 0.0
    for x in a:
        xq = qs(x)
        y = qs(xq - comp)
        t = qs(acc + y)
        comp = qs(qs(t - acc) - y)
        acc = t
    return acc
