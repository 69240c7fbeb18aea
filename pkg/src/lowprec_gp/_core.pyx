# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled backend for the emulated low-precision hot loops.

Semantics are defined by ``lowprec_gp._core_py``; this module replays the
exact same sequence of correctly rounded operations in C.  Rounding into a
format happens directly from the double-precision result (single rounding),
never through an intermediate width.
"""

import numpy as np

from libc.math cimport exp, sqrt, sin, pow, fabs

cdef extern from *:
    """
    #include <stdint.h>
    #include <string.h>
    #include <math.h>

    /* Round a double to the nearest IEEE binary16 value (RNE), returned as
       a double.  Overflow -> +-inf, subnormals supported. */
    static inline double lp_q_f16(double x) {
        uint64_t u, mag, sign, lsb, rounded, rbits;
        double d, a, r;
        memcpy(&u, &x, 8);
        sign = u & 0x8000000000000000ULL;
        mag = u & 0x7FFFFFFFFFFFFFFFULL;
        if (mag >= 0x7FF0000000000000ULL) return x;           /* nan, inf */
        if (mag >= 0x40EFFE0000000000ULL) {                   /* |x| >= 65520 */
            rbits = sign | 0x7FF0000000000000ULL;
            memcpy(&d, &rbits, 8);
            return d;
        }
        if (mag < 0x3F10000000000000ULL) {                    /* |x| < 2^-14 */
            a = fabs(x) * 0x1.0p24;
            r = nearbyint(a) * 0x1.0p-24;
            return copysign(r, x);
        }
        lsb = (mag >> 42) & 1ULL;
        rounded = (mag + 0x1FFFFFFFFFFULL + lsb) & ~0x3FFFFFFFFFFULL;
        rbits = sign | rounded;
        memcpy(&d, &rbits, 8);
        return d;
    }

    /* Round a double to the nearest bfloat16 value (RNE). */
    static inline double lp_q_bf16(double x) {
        uint64_t u, mag, sign, lsb, rounded, rbits;
        double d, a, r;
        memcpy(&u, &x, 8);
        sign = u & 0x8000000000000000ULL;
        mag = u & 0x7FFFFFFFFFFFFFFFULL;
        if (mag >= 0x7FF0000000000000ULL) return x;
        if (mag >= 0x47EFF00000000000ULL) {            /* |x| >= (2-2^-8)*2^127 */
            rbits = sign | 0x7FF0000000000000ULL;
            memcpy(&d, &rbits, 8);
            return d;
        }
        if (mag < 0x3810000000000000ULL) {             /* |x| < 2^-126 */
            a = fabs(x) * 0x1.0p133;
            r = nearbyint(a) * 0x1.0p-133;
            return copysign(r, x);
        }
        lsb = (mag >> 45) & 1ULL;
        rounded = (mag + 0xFFFFFFFFFFFULL + lsb) & ~0x1FFFFFFFFFFFULL;
        rbits = sign | rounded;
        memcpy(&d, &rbits, 8);
        return d;
    }

    static inline double lp_q_f32(double x) { return (double)(float)x; }
    """
    double lp_q_f16(double x) nogil
    double lp_q_bf16(double x) nogil
    double lp_q_f32(double x) nogil

COMPILED = True

# Format codes: 0 fp64, 1 fp32, 2 fp16, 3 bf16.
# Accumulation modes: 0 block-same, 1 block-wider, 2 kahan.
# Family codes: 0 rbf, 1 matern12, 2 matern32, 3 matern52, 4 rq, 5 periodic.


cdef inline double q(int fc, double x) nogil:
    if fc == 0:
        return x
    if fc == 1:
        return lp_q_f32(x)
    if fc == 2:
        return lp_q_f16(x)
    return lp_q_bf16(x)


cdef inline double _entry(int family, const double* xr, const double* xc,
                          Py_ssize_t D, const double* ls, double a2,
                          double alpha, const double* consts, int deriv_dim,
                          int fc) nogil:
    cdef double d2 = 0.0, usel = 0.0
    cdef double diff, s, u, d, e, k, t1, t2, t3, t4, t5, t6, p, p1, pe, w
    cdef double arg, b, pm, r, v, sv
    cdef Py_ssize_t t
    for t in range(D):
        diff = q(fc, xr[t] - xc[t])
        s = q(fc, diff / ls[t])
        u = q(fc, s * s)
        d2 = q(fc, d2 + u)
        if deriv_dim == t:
            usel = u
    if deriv_dim == -2:
        usel = d2

    if family == 0:  # rbf
        arg = q(fc, -0.5 * d2)
        e = q(fc, exp(arg))
        k = q(fc, a2 * e)
        if deriv_dim != -1:
            return q(fc, k * usel)
        return k
    if family == 1:  # matern12
        d = q(fc, sqrt(d2))
        e = q(fc, exp(-d))
        k = q(fc, a2 * e)
        if deriv_dim != -1:
            if d > 0.0:
                r = q(fc, usel / d)
            else:
                r = 0.0
            return q(fc, k * r)
        return k
    if family == 2:  # matern32
        d = q(fc, sqrt(d2))
        t1 = q(fc, consts[0] * d)
        e = q(fc, exp(-t1))
        if deriv_dim != -1:
            t4 = q(fc, 3.0 * usel)
            t5 = q(fc, t4 * e)
            return q(fc, a2 * t5)
        p = q(fc, 1.0 + t1)
        pe = q(fc, p * e)
        return q(fc, a2 * pe)
    if family == 3:  # matern52
        d = q(fc, sqrt(d2))
        t1 = q(fc, consts[0] * d)
        e = q(fc, exp(-t1))
        p1 = q(fc, 1.0 + t1)
        if deriv_dim != -1:
            t4 = q(fc, consts[1] * usel)
            t5 = q(fc, t4 * p1)
            t6 = q(fc, t5 * e)
            return q(fc, a2 * t6)
        t2 = q(fc, t1 * t1)
        t3 = q(fc, t2 / 3.0)
        p = q(fc, p1 + t3)
        pe = q(fc, p * e)
        return q(fc, a2 * pe)
    if family == 4:  # rq
        t1 = q(fc, d2 / consts[0])
        b = q(fc, 1.0 + t1)
        if deriv_dim != -1:
            pm = q(fc, pow(b, -alpha - 1.0))
            t4 = q(fc, pm * usel)
            return q(fc, a2 * t4)
        p = q(fc, pow(b, -alpha))
        return q(fc, a2 * p)
    # family == 5: periodic
    d = q(fc, sqrt(d2))
    u = q(fc, consts[0] * d)
    s = q(fc, sin(u))
    t2 = q(fc, s * s)
    w = q(fc, t2 * consts[1])
    e = q(fc, exp(-w))
    k = q(fc, a2 * e)
    if deriv_dim != -1:
        v = q(fc, consts[2] * d)
        sv = q(fc, sin(v))
        if d > 0.0:
            r = q(fc, usel / d)
        else:
            r = 0.0
        t4 = q(fc, sv * r)
        t5 = q(fc, t4 * consts[3])
        return q(fc, k * t5)
    return k


def mvm_kernel(double[:, ::1] Xr, double[:, ::1] Xc, double[:, ::1] V,
               int family, double[::1] ls_q, double a2_q, double alpha,
               double[::1] consts, double noise_q, int deriv_dim,
               int fc, int acc_mode, int wc, int block_size):
    """Blocked matrix-free (kernel restricted to Xr x Xc) @ V, emulated in fc."""
    cdef Py_ssize_t T = Xr.shape[0], N = Xc.shape[0], C = V.shape[1]
    cdef Py_ssize_t D = Xr.shape[1]
    out_arr = np.empty((T, C), dtype=np.float64)
    acc_arr = np.empty(C, dtype=np.float64)
    part_arr = np.empty(C, dtype=np.float64)
    comp_arr = np.empty(C, dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef double[::1] acc = acc_arr, part = part_arr, comp = comp_arr
    cdef Py_ssize_t i, j, c, b0, b1
    cdef double kv, term, y, tt
    with nogil:
        for i in range(T):
            for c in range(C):
                acc[c] = 0.0
                comp[c] = 0.0
            b0 = 0
            while b0 < N:
                b1 = b0 + block_size
                if b1 > N:
                    b1 = N
                if acc_mode != 2:
                    for c in range(C):
                        part[c] = 0.0
                for j in range(b0, b1):
                    kv = _entry(family, &Xr[i, 0], &Xc[j, 0], D, &ls_q[0],
                                a2_q, alpha, &consts[0], deriv_dim, fc)
                    if acc_mode == 2:
                        for c in range(C):
                            term = q(fc, kv * V[j, c])
                            y = q(fc, term - comp[c])
                            tt = q(fc, acc[c] + y)
                            comp[c] = q(fc, q(fc, tt - acc[c]) - y)
                            acc[c] = tt
                    else:
                        for c in range(C):
                            part[c] = q(fc, part[c] + q(fc, kv * V[j, c]))
                if acc_mode == 0:
                    for c in range(C):
                        acc[c] = q(fc, acc[c] + part[c])
                elif acc_mode == 1:
                    for c in range(C):
                        acc[c] = q(wc, acc[c] + part[c])
                b0 = b1
            for c in range(C):
                tt = acc[c]
                if acc_mode == 1:
                    tt = q(fc, tt)
                if noise_q != 0.0:
                    tt = q(fc, tt + q(fc, noise_q * V[i, c]))
                out[i, c] = tt
    return out_arr


def mvm_dense(double[:, ::1] M, double[:, ::1] V,
              int fc, int acc_mode, int wc, int block_size):
    """Blocked emulated product of a dense matrix (quantized tile-wise) with V."""
    cdef Py_ssize_t T = M.shape[0], N = M.shape[1], C = V.shape[1]
    out_arr = np.empty((T, C), dtype=np.float64)
    acc_arr = np.empty(C, dtype=np.float64)
    part_arr = np.empty(C, dtype=np.float64)
    comp_arr = np.empty(C, dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef double[::1] acc = acc_arr, part = part_arr, comp = comp_arr
    cdef Py_ssize_t i, j, c, b0, b1
    cdef double kv, term, y, tt
    with nogil:
        for i in range(T):
            for c in range(C):
                acc[c] = 0.0
                comp[c] = 0.0
            b0 = 0
            while b0 < N:
                b1 = b0 + block_size
                if b1 > N:
                    b1 = N
                if acc_mode != 2:
                    for c in range(C):
                        part[c] = 0.0
                for j in range(b0, b1):
                    kv = q(fc, M[i, j])
                    if acc_mode == 2:
                        for c in range(C):
                            term = q(fc, kv * V[j, c])
                            y = q(fc, term - comp[c])
                            tt = q(fc, acc[c] + y)
                            comp[c] = q(fc, q(fc, tt - acc[c]) - y)
                            acc[c] = tt
                    else:
                        for c in range(C):
                            part[c] = q(fc, part[c] + q(fc, kv * V[j, c]))
                if acc_mode == 0:
                    for c in range(C):
                        acc[c] = q(fc, acc[c] + part[c])
                elif acc_mode == 1:
                    for c in range(C):
                        acc[c] = q(wc, acc[c] + part[c])
                b0 = b1
            for c in range(C):
                tt = acc[c]
                if acc_mode == 1:
                    tt = q(fc, tt)
                out[i, c] = tt
    return out_arr


def kernel_tile(double[:, ::1] Xr, double[:, ::1] Xc, int family,
                double[::1] ls_q, double a2_q, double alpha,
                double[::1] consts, int deriv_dim, int fc):
    """Quantized kernel (or derivative) entries for Xr x Xc."""
    cdef Py_ssize_t T = Xr.shape[0], N = Xc.shape[0], D = Xr.shape[1]
    out_arr = np.empty((T, N), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef Py_ssize_t i, j
    with nogil:
        for i in range(T):
            for j in range(N):
                out[i, j] = _entry(family, &Xr[i, 0], &Xc[j, 0], D, &ls_q[0],
                                   a2_q, alpha, &consts[0], deriv_dim, fc)
    return out_arr


def dot_seq(double[::1] a, double[::1] b, int fc):
    """Flat left-to-right dot product, every operation rounded into fc."""
    cdef Py_ssize_t i, n = a.shape[0]
    cdef double acc = 0.0
    with nogil:
        for i in range(n):
            acc = q(fc, acc + q(fc, a[i] * b[i]))
    return acc


def sum_seq(double[::1] a, int fc):
    """Naive left-to-right sum in fc (inputs quantized first)."""
    cdef Py_ssize_t i, n = a.shape[0]
    cdef double acc = 0.0
    with nogil:
        for i in range(n):
            acc = q(fc, acc + q(fc, a[i]))
    return acc


def kahan_sum(double[::1] a, int fc):
    """Compensated summation with all operations rounded into fc."""
    cdef Py_ssize_t i, n = a.shape[0]
    cdef double acc = 0.0, comp = 0.0, xq, y, t
    with nogil:
        for i in range(n):
            xq = q(fc, a[i])
            y = q(fc, xq - comp)
            t = q(fc, acc + y)
            comp = q(fc, q(fc, t - acc) - y)
            acc = t
    return acc


def quantize_named(double[::1] a, int fc):
    """Vectorized rounding of a double array into a named format."""
    cdef Py_ssize_t i, n = a.shape[0]
    out_arr = np.empty(n, dtype=np.float64)
    cdef double[::1] out = out_arr
    with nogil:
        for i in range(n):
            out[i] = q(fc, a[i])
    return out_arr
